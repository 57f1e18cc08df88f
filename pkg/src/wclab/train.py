"""Teacher-student training harness.

A student layer is trained to match a perturbed copy of its own frozen
initialization under mean-squared error. The teacher mixes a low-rank
subspace perturbation with a per-column rescale, so conditioning methods
have genuine headroom over a pure low-rank update. Gradients are analytic
for every method and checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapters
from .adapters import AdapterConfig, AdapterState, Method, merged_weight, trainable_params
from .backend import kernels
from .errors import ConfigError, DivergenceError, ShapeError
from .spectral import SpectralReport, layer_report

_SP_NORM_FLOOR = 1e-30  # below this factor norm the s_p chain contributes nothing


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic layer-matching task.

    The teacher is W* = (W_pre + lowrank) * Diag(1 + spread*u), u ~ U(-1, 1):
    a rank-`lowrank_rank` subspace shift composed with a column rescale.
    """

    m: int
    n: int
    num_samples: int = 256
    lowrank_rank: int = 2
    lowrank_scale: float = 0.5
    diag_scale_spread: float = 0.3
    noise_sigma: float = 0.0
    seed: int = 0


def standard_task(seed: int = 0) -> TaskSpec:
    """The 64x64 reference task used by the method comparison suite."""
    return TaskSpec(m=64, n=64, seed=seed)


@dataclass(frozen=True)
class TaskInstance:
    w_pre: np.ndarray
    w_star: np.ndarray
    x: np.ndarray
    y: np.ndarray


def build_task(task: TaskSpec) -> TaskInstance:
    rng = np.random.default_rng(task.seed)
    m, n = task.m, task.n
    w_pre = rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, n))
    lowrank = np.zeros((m, n))
    if task.lowrank_rank > 0 and task.lowrank_scale != 0.0:
        k = task.lowrank_rank
        u = rng.normal(0.0, 1.0, size=(m, k))
        v = rng.normal(0.0, 1.0, size=(k, n))
        # Normalized so ||lowrank||_F is about lowrank_scale * ||w_pre||_F.
        lowrank = task.lowrank_scale * (u @ v) / math.sqrt(n * k)
    col_rescale = 1.0 + task.diag_scale_spread * rng.uniform(-1.0, 1.0, size=n)
    w_star = (w_pre + lowrank) * col_rescale
    x = rng.normal(0.0, 1.0, size=(n, task.num_samples))
    y = w_star @ x
    if task.noise_sigma > 0.0:
        y = y + task.noise_sigma * rng.normal(0.0, 1.0, size=y.shape)
    return TaskInstance(w_pre=w_pre, w_star=w_star, x=x, y=y)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"  # "sgd" | "adam"
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    steps: int = 400
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")


def forward(state: AdapterState, config: AdapterConfig, x: np.ndarray) -> np.ndarray:
    """Merged weight applied to a batch of column vectors (x is n x batch)."""
    if x.shape[0] != state.shape[1]:
        raise ShapeError(f"input rows {x.shape[0]} do not match layer width {state.shape[1]}")
    return merged_weight(state, config) @ x


def loss(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    """Half mean squared error over all entries."""
    if y_pred.shape != y_true.shape:
        raise ShapeError(f"prediction {y_pred.shape} vs target {y_true.shape}")
    diff = y_pred - y_true
    return 0.5 * float(np.mean(diff * diff))


def _rotation_grads(m_mat, g, state, config, s_p, gf, mf):
    """Gradients of the rotation factors, never forming the n x n K = M^T G.

    gf = G @ [dp | cp] and mf = M @ [dp | cp] are reused from the caller, so
    the large matrices are each read once here (stacked products). Includes
    the chain through s_p under the epsilon policy, where s_p depends on the
    factor norms; that term vanishes in the limit of a zero factor and is
    skipped below the norm floor.
    """
    dp, cp = state.dp, state.cp
    rp = dp.shape[1]
    mt_gf = m_mat.T @ gf   # [K dp | K cp] with K = M^T G
    gt_mf = g.T @ mf       # [K^T dp | K^T cp]
    k_dp, k_cp = mt_gf[:, :rp], mt_gf[:, rp:]
    kt_dp, kt_cp = gt_mf[:, :rp], gt_mf[:, rp:]
    g_dp = s_p * (k_cp - kt_cp)
    g_cp = -s_p * (k_dp - kt_dp)
    if config.sp_policy.mode == "epsilon":
        nd = float(np.linalg.norm(dp))
        nc = float(np.linalg.norm(cp))
        if nd > _SP_NORM_FLOOR and nc > _SP_NORM_FLOOR:
            eps = config.sp_policy.value
            q = 2.0 * nd * nc + eps
            g_sp = float(np.sum(dp * k_cp) - np.sum(cp * k_dp))
            g_dp += g_sp * (-2.0 * eps * nc / (q * q * nd)) * dp
            g_cp += g_sp * (-2.0 * eps * nd / (q * q * nc)) * cp
    return g_dp, g_cp


def _apply_rotation(mat, dp, cp, s_p, mat_f):
    """mat @ P from the precomputed stacked product mat_f = mat @ [dp | cp]."""
    rp = dp.shape[1]
    u = np.ascontiguousarray(mat_f[:, :rp])
    v = np.ascontiguousarray(mat_f[:, rp:])
    return kernels.rotation_combine(mat, u, v, dp, cp, s_p)


def _factor_grads_rotated(state, g, g_f, s, s_p):
    """dL/dA and dL/dB for a rotated merge, without materializing G P^T.

    With Gm = G - s_p*(G dp cp^T - G cp dp^T), the products B^T Gm and
    Gm A^T expand into B^T G / G A^T plus rank-r_p corrections built from
    the stacked g_f = G @ [dp | cp].
    """
    a, b, dp, cp = state.a, state.b, state.dp, state.cp
    rp = dp.shape[1]
    g_dp, g_cp = g_f[:, :rp], g_f[:, rp:]
    bt_gf = b.T @ g_f
    grad_a = s * (b.T @ g - s_p * (bt_gf[:, :rp] @ cp.T - bt_gf[:, rp:] @ dp.T))
    a_f = a @ np.hstack((dp, cp))
    grad_b = s * (g @ a.T - s_p * (g_dp @ a_f[:, rp:].T - g_cp @ a_f[:, :rp].T))
    return grad_a, grad_b


def _diag_grad_rotated(state, w_pre, g, g_f, s_p):
    """dL/dd for the rotated pre-diagonal merge, per-column inner products
    of W_pre against G P^T expressed through the stacked g_f blocks.
    """
    dp, cp = state.dp, state.cp
    rp = dp.shape[1]
    wt_gf = w_pre.T @ g_f
    corr = (cp * wt_gf[:, :rp]).sum(axis=1) - (dp * wt_gf[:, rp:]).sum(axis=1)
    return np.einsum("ij,ij->j", w_pre, g) - s_p * corr


def _loss_and_grads(state, config, x, y_true):
    """Loss and the analytic gradient of every trainable tensor.

    The ortho methods stack [dp | cp] so every product against a large
    matrix is taken once, and the forward's intermediates are reused by
    the backward pass.
    """
    method = config.method
    s = config.scale_s
    w_pre = state.w_pre
    a, b = state.a, state.b

    f = mat_f = None
    if method in (Method.SORA, Method.PRE_ORTHO, Method.POST_ORTHO):
        f = np.hstack((state.dp, state.cp))
        s_p = adapters.resolve_sp(config, state.dp, state.cp)

    if method is Method.LORA:
        w = kernels.add_scaled(w_pre, b @ a, s)
    elif method is Method.DORA:
        v, norms = adapters._dora_direction_basis(state, config)
        w = kernels.scale_columns(v, state.mag_or_scale / norms)
    elif method is Method.PRE_DIAG:
        w = adapters.prediag_merged(state, config)
    elif method is Method.SORA:
        m_mat = adapters.prediag_merged(state, config)
        mat_f = m_mat @ f
        w = _apply_rotation(m_mat, state.dp, state.cp, s_p, mat_f)
    elif method is Method.PRE_ORTHO:
        mat_f = w_pre @ f
        rotated = _apply_rotation(w_pre, state.dp, state.cp, s_p, mat_f)
        w = kernels.add_scaled(rotated, b @ a, s)
    elif method is Method.POST_ORTHO:
        m_mat = kernels.add_scaled(w_pre, b @ a, s)
        mat_f = m_mat @ f
        w = _apply_rotation(m_mat, state.dp, state.cp, s_p, mat_f)
    else:
        raise ConfigError(f"unhandled method {method!r}")

    residual = w @ x - y_true
    value = 0.5 * float(np.mean(residual * residual))
    g = (residual @ x.T) / y_true.size  # dL/dW

    grads: dict[str, np.ndarray] = {}
    if method is Method.LORA:
        grads["a"] = s * (b.T @ g)
        grads["b"] = s * (g @ a.T)
    elif method is Method.DORA:
        mag = state.mag_or_scale
        t = np.einsum("ij,ij->j", g, v)
        grads["mag_or_scale"] = t / norms
        gv = g * (mag / norms) - v * (mag * t / norms**3)
        grads["a"] = s * (b.T @ gv)
        grads["b"] = s * (gv @ a.T)
    elif method is Method.PRE_DIAG:
        grads["a"] = s * (b.T @ g)
        grads["b"] = s * (g @ a.T)
        grads["mag_or_scale"] = np.einsum("ij,ij->j", w_pre, g)
    elif method is Method.SORA:
        g_f = g @ f
        ga, gb = _factor_grads_rotated(state, g, g_f, s, s_p)
        grads["a"], grads["b"] = ga, gb
        grads["mag_or_scale"] = _diag_grad_rotated(state, w_pre, g, g_f, s_p)
        grads["dp"], grads["cp"] = _rotation_grads(m_mat, g, state, config, s_p, g_f, mat_f)
    elif method is Method.PRE_ORTHO:
        g_f = g @ f
        grads["a"] = s * (b.T @ g)
        grads["b"] = s * (g @ a.T)
        grads["dp"], grads["cp"] = _rotation_grads(w_pre, g, state, config, s_p, g_f, mat_f)
    else:  # POST_ORTHO
        g_f = g @ f
        grads["a"], grads["b"] = _factor_grads_rotated(state, g, g_f, s, s_p)
        grads["dp"], grads["cp"] = _rotation_grads(m_mat, g, state, config, s_p, g_f, mat_f)
    return value, grads


def grad_params(state, config, x, y_true) -> dict[str, np.ndarray]:
    """Analytic gradient of the loss w.r.t. every trainable tensor.

    The frozen w_pre receives no gradient (and is read-only besides).
    """
    return _loss_and_grads(state, config, x, y_true)[1]


def fd_grad(state, config, x, y_true, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite-difference gradient, one scalar parameter at a time."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")

    def value() -> float:
        return loss(forward(state, config, x), y_true)

    grads = {}
    for name, arr in trainable_params(state, config).items():
        g = np.empty_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp = value()
            arr[idx] = orig - h
            lm = value()
            arr[idx] = orig
            g[idx] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m_moments: dict = field(default_factory=dict)
    v_moments: dict = field(default_factory=dict)


def make_optimizer(train: TrainConfig) -> OptimizerState:
    return OptimizerState(
        kind=train.optimizer, lr=train.lr,
        beta1=train.beta1, beta2=train.beta2, eps=train.eps_opt,
    )


def optimizer_step(state, grads: dict[str, np.ndarray], opt: OptimizerState):
    """Update the gradient-named tensors of `state` in place and return it.

    `state` only needs array attributes matching the gradient keys, so the
    same stepper drives adapter states and plain namespaces in tests.
    """
    opt.step_count += 1
    t = opt.step_count
    for name, g in grads.items():
        p = getattr(state, name)
        if opt.kind == "sgd":
            p -= opt.lr * g
            continue
        m = opt.m_moments.setdefault(name, np.zeros_like(p))
        v = opt.v_moments.setdefault(name, np.zeros_like(p))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return state


def train_step(state, config, opt, x, y_true) -> float:
    """One merge + gradient + optimizer step; returns the step's loss."""
    value, grads = _loss_and_grads(state, config, x, y_true)
    if not math.isfinite(value):
        raise DivergenceError(opt.step_count)
    optimizer_step(state, grads, opt)
    return value


@dataclass
class TrainRun:
    task: TaskSpec
    adapter: AdapterConfig
    train: TrainConfig
    loss_trajectory: np.ndarray
    final_state: AdapterState
    final_delta: np.ndarray
    spectral: SpectralReport | None
    resolved_sp: float | None = None


def run_experiment(task: TaskSpec, adapter: AdapterConfig, train: TrainConfig) -> TrainRun:
    """Train one adapter on one task instance; deterministic for fixed seeds."""
    inst = build_task(task)
    init_seed, batch_seed = np.random.SeedSequence(train.seed).spawn(2)
    state = adapters.init_adapter(inst.w_pre, adapter, init_seed)
    opt = make_optimizer(train)
    batch_rng = np.random.default_rng(batch_seed)
    losses = np.empty(train.steps)
    for step in range(train.steps):
        idx = batch_rng.integers(0, task.num_samples, size=train.batch)
        value, grads = _loss_and_grads(state, adapter, inst.x[:, idx], inst.y[:, idx])
        if not math.isfinite(value):
            raise DivergenceError(step, seed=train.seed)
        losses[step] = value
        optimizer_step(state, grads, opt)
    final_delta = adapters.delta_weight(state, adapter)
    report = layer_report(adapter.method.value, final_delta)
    resolved = None
    if state.dp is not None:
        resolved = adapters.resolve_sp(adapter, state.dp, state.cp)
    return TrainRun(
        task=task,
        adapter=adapter,
        train=train,
        loss_trajectory=losses,
        final_state=state,
        final_delta=final_delta,
        spectral=None if report.degenerate else report,
        resolved_sp=resolved,
    )


@dataclass
class MethodStats:
    entropies: list[float]
    stable_ranks: list[float]

    @property
    def median_entropy(self) -> float:
        return float(np.median(self.entropies))

    @property
    def median_stable_rank(self) -> float:
        return float(np.median(self.stable_ranks))


@dataclass
class ComparisonReport:
    """Per-method medians plus pairwise per-seed win fractions.

    wins[(p, q)] is the fraction of seeds on which method p's final-update
    entropy strictly exceeds method q's.
    """

    seeds: list[int]
    per_method: dict[Method, MethodStats]
    wins: dict[tuple[str, str], float]


def entropy_comparison_suite(
    task: TaskSpec,
    methods,
    seeds,
    rank: int = 4,
    rotation_rank: int = 1,
    train: TrainConfig | None = None,
) -> ComparisonReport:
    """Train every method across seeds, re-seeding task and trainer per seed.

    Ten or more seeds are recommended for stable medians; fewer are allowed
    (with a single seed the medians are that seed's values).
    """
    seeds = list(seeds)
    methods = list(methods)
    if not seeds:
        raise ConfigError("at least one seed is required")
    base_train = train or TrainConfig()
    per_method = {m: MethodStats([], []) for m in methods}
    per_seed: list[dict[Method, float]] = []
    for s in seeds:
        task_s = replace(task, seed=s)
        row: dict[Method, float] = {}
        for method in methods:
            config = AdapterConfig(method, rank_r=rank, rotation_rank_rp=rotation_rank)
            run = run_experiment(task_s, config, replace(base_train, seed=s))
            if run.spectral is None:
                continue
            per_method[method].entropies.append(run.spectral.svd_entropy_nats)
            per_method[method].stable_ranks.append(run.spectral.stable_rank)
            row[method] = run.spectral.svd_entropy_nats
        per_seed.append(row)
    wins: dict[tuple[str, str], float] = {}
    for p in methods:
        for q in methods:
            if p is q:
                continue
            both = [row for row in per_seed if p in row and q in row]
            if both:
                frac = sum(1 for row in both if row[p] > row[q]) / len(both)
                wins[(p.value, q.value)] = frac
    return ComparisonReport(seeds=seeds, per_method=per_method, wins=wins)
