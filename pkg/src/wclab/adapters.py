"""The weight-conditioning adapter family.

Six methods over a frozen m x n layer W_pre (forward map y = W x, column
norms taken over the n columns):

    LoRA       W = W_pre + s*B*A
    DoRA       W = mag * (W_pre + s*B*A) / ||W_pre + s*B*A||_c
               == (W_pre + s*B*A) * Diag(d),  d = mag / ||W_pre + s*B*A||_c
    Pre-Diag   W = W_pre*Diag(d) + s*B*A
    SORA       W = (W_pre*Diag(d) + s*B*A) * P
    Pre-Ortho  W = W_pre*P + s*B*A
    Post-Ortho W = (W_pre + s*B*A) * P

with P = I + s_p*(D_p C_p^T - C_p D_p^T) a near-orthogonal rotation built
from a low-rank skew generator. Merged weights are recomputed on demand and
never cached. Hot combines are dispatched to the kernel backend.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .backend import kernels
from .errors import (
    ConfigError,
    DegenerateColumnError,
    MethodStateError,
    ShapeError,
)

COLUMN_NORM_FLOOR = 1e-12
RANK_THRESHOLD = 1e-10  # numerical rank counts sigma_i > RANK_THRESHOLD * sigma_1


class Method(enum.Enum):
    LORA = "lora"
    DORA = "dora"
    PRE_DIAG = "prediag"
    SORA = "sora"
    PRE_ORTHO = "preortho"
    POST_ORTHO = "postortho"


# Methods carrying a per-column trainable vector (DoRA magnitude or diagonal scale).
_DIAG_METHODS = {Method.DORA, Method.PRE_DIAG, Method.SORA}
# Methods carrying the skew rotation factors.
_ORTHO_METHODS = {Method.SORA, Method.PRE_ORTHO, Method.POST_ORTHO}


@dataclass(frozen=True)
class SpPolicy:
    """Rotation strength policy: either a fixed s_p or the epsilon rule

        s_p = eps / (2*||D_p||_F*||C_p||_F + eps)

    which keeps ||exp(s_p*S_p) - I||_2 <= eps.
    """

    mode: str  # "fixed" | "epsilon"
    value: float

    @classmethod
    def fixed(cls, s_p: float) -> "SpPolicy":
        if s_p < 0:
            raise ConfigError(f"fixed s_p must be >= 0, got {s_p}")
        return cls("fixed", float(s_p))

    @classmethod
    def epsilon(cls, eps: float = 0.01) -> "SpPolicy":
        if not eps > 0:
            raise ConfigError(f"epsilon must be > 0, got {eps}")
        return cls("epsilon", float(eps))


@dataclass(frozen=True)
class AdapterConfig:
    method: Method
    rank_r: int
    scale_s: float = 2.0
    rotation_rank_rp: int = 1
    sp_policy: SpPolicy = field(default_factory=SpPolicy.epsilon)

    def __post_init__(self):
        if self.rank_r < 1:
            raise ConfigError(f"rank_r must be positive, got {self.rank_r}")
        if not self.scale_s > 0:
            raise ConfigError(f"scale_s must be positive, got {self.scale_s}")
        if self.rotation_rank_rp < 1:
            raise ConfigError(
                f"rotation_rank_rp must be positive, got {self.rotation_rank_rp}"
            )

    def validate_for_shape(self, m: int, n: int) -> None:
        if self.rank_r > min(m, n):
            raise ConfigError(
                f"rank_r={self.rank_r} exceeds min(m, n)={min(m, n)}"
            )
        if self.method in _ORTHO_METHODS and self.rotation_rank_rp > n:
            raise ConfigError(
                f"rotation_rank_rp={self.rotation_rank_rp} exceeds n={n}"
            )


@dataclass
class AdapterState:
    """All tensors of one adapted layer.

    w_pre is frozen (marked read-only); a, b, mag_or_scale, dp, cp are the
    trainables actually present for the configured method. mag_or_scale is
    the DoRA magnitude vector or the Pre-Diag/SORA diagonal, length n.
    """

    w_pre: np.ndarray
    a: np.ndarray
    b: np.ndarray
    mag_or_scale: np.ndarray | None = None
    dp: np.ndarray | None = None
    cp: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_pre.shape


def init_adapter(w_pre: np.ndarray, config: AdapterConfig, seed=0) -> AdapterState:
    """Zero-delta initialization: merged_weight(state) == w_pre for all methods.

    A ~ uniform(-1/sqrt(n), 1/sqrt(n)), B = 0; DoRA magnitude starts at the
    column norms of w_pre; diagonal scales start at 1; D_p ~ gaussian(0, 0.02)
    with C_p = 0 so the rotation starts at the identity.
    """
    w_pre = linalg.as_matrix(w_pre).copy()
    w_pre.flags.writeable = False
    m, n = w_pre.shape
    config.validate_for_shape(m, n)
    rng = np.random.default_rng(seed)
    r = config.rank_r
    bound = 1.0 / np.sqrt(n)
    a = linalg.random_matrix(r, n, ("uniform", -bound, bound), rng)
    b = np.zeros((m, r))
    mag_or_scale = None
    if config.method is Method.DORA:
        mag_or_scale = linalg.column_norms(w_pre)
    elif config.method in (Method.PRE_DIAG, Method.SORA):
        mag_or_scale = np.ones(n)
    dp = cp = None
    if config.method in _ORTHO_METHODS:
        dp = linalg.random_matrix(n, config.rotation_rank_rp, ("gaussian", 0.0, 0.02), rng)
        cp = np.zeros((n, config.rotation_rank_rp))
    return AdapterState(w_pre=w_pre, a=a, b=b, mag_or_scale=mag_or_scale, dp=dp, cp=cp)


def random_state(w_pre: np.ndarray, config: AdapterConfig, seed=0) -> AdapterState:
    """A generic non-degenerate mid-training state, for tests and benchmarks."""
    rng = np.random.default_rng(seed)
    state = init_adapter(w_pre, config, rng)
    m, n = state.shape
    state.b = rng.normal(0.0, 1.0 / np.sqrt(n), size=state.b.shape)
    if config.method is Method.DORA:
        state.mag_or_scale = state.mag_or_scale * rng.uniform(0.5, 1.5, size=n)
    elif state.mag_or_scale is not None:
        state.mag_or_scale = rng.uniform(0.7, 1.3, size=n)
    if state.dp is not None:
        state.dp = rng.normal(0.0, 0.5, size=state.dp.shape)
        state.cp = rng.normal(0.0, 0.5, size=state.cp.shape)
    return state


def _require(state: AdapterState, config: AdapterConfig) -> None:
    m, n = state.shape
    r = config.rank_r
    if state.a.shape != (r, n) or state.b.shape != (m, r):
        raise MethodStateError(
            f"factor shapes {state.a.shape}/{state.b.shape} do not match "
            f"rank {r} for a {m}x{n} layer"
        )
    if config.method in _DIAG_METHODS:
        if state.mag_or_scale is None or state.mag_or_scale.shape != (n,):
            raise MethodStateError(
                f"{config.method.value} needs a length-{n} mag_or_scale vector"
            )
    if config.method in _ORTHO_METHODS:
        rp = config.rotation_rank_rp
        if state.dp is None or state.cp is None:
            raise MethodStateError(f"{config.method.value} needs dp and cp factors")
        if state.dp.shape != (n, rp) or state.cp.shape != (n, rp):
            raise MethodStateError(
                f"rotation factors {state.dp.shape}/{state.cp.shape} do not match "
                f"(n, r_p) = ({n}, {rp})"
            )


def trainable_params(state: AdapterState, config: AdapterConfig) -> dict[str, np.ndarray]:
    """The method's trainable tensors, keyed by state field name."""
    _require(state, config)
    params = {"a": state.a, "b": state.b}
    if config.method in _DIAG_METHODS:
        params["mag_or_scale"] = state.mag_or_scale
    if config.method in _ORTHO_METHODS:
        params["dp"] = state.dp
        params["cp"] = state.cp
    return params


def _ba(state: AdapterState) -> np.ndarray:
    return state.b @ state.a


def _dora_direction_basis(state: AdapterState, config: AdapterConfig):
    """V = W_pre + s*B*A and its column norms, with the degeneracy check."""
    v = kernels.add_scaled(state.w_pre, _ba(state), config.scale_s)
    norms = np.sqrt(kernels.column_sq_norms(v))
    bad = np.flatnonzero(norms < COLUMN_NORM_FLOOR)
    if bad.size:
        j = int(bad[0])
        raise DegenerateColumnError(j, float(norms[j]))
    return v, norms


def dora_merged_original(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """DoRA merge in the published column-normalized form.

    Deliberately materializes the direction matrix V/||V||_c before scaling
    by the magnitude; this is the baseline the matrix form is benchmarked
    against, so it is kept unfused.
    """
    _require(state, config)
    v, norms = _dora_direction_basis(state, config)
    direction = v / norms
    return state.mag_or_scale * direction


def dora_conditioning_vector(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """d = mag / ||W_pre + s*B*A||_c, the diagonal of the conditioning matrix."""
    _require(state, config)
    _, norms = _dora_direction_basis(state, config)
    return state.mag_or_scale / norms


def dora_merged_matrix_form(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """DoRA merge as weight conditioning: (W_pre + s*B*A) * Diag(d).

    Equals W_pre + W_pre*(D - I) + s*B*A*D; the only column-norm computation
    is the one inside the conditioning vector, everything else is matrix
    products, fused by the kernel backend.
    """
    _require(state, config)
    v, norms = _dora_direction_basis(state, config)
    d = state.mag_or_scale / norms
    return kernels.scale_columns(v, d)


def prediag_merged(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """W_pre * Diag(d) + s*B*A."""
    _require(state, config)
    return kernels.prediag_combine(state.w_pre, _ba(state), state.mag_or_scale, config.scale_s)


def sora_skew(dp: np.ndarray, cp: np.ndarray) -> np.ndarray:
    """Low-rank skew generator S = dp @ cp.T - cp @ dp.T (n x n)."""
    if dp.shape != cp.shape or dp.ndim != 2:
        raise ShapeError(f"skew factors must share a (n, r_p) shape, got {dp.shape} and {cp.shape}")
    return kernels.skew_lowrank(
        np.ascontiguousarray(dp, dtype=np.float64),
        np.ascontiguousarray(cp, dtype=np.float64),
    )


def sora_rotation(dp: np.ndarray, cp: np.ndarray, s_p: float) -> np.ndarray:
    """Explicit rotation P = I + s_p * S; materializes the full n x n matrix."""
    if s_p < 0:
        raise ValueError(f"s_p must be >= 0, got {s_p}")
    n = dp.shape[0]
    return np.eye(n) + s_p * sora_skew(dp, cp)


def resolve_sp(config: AdapterConfig, dp: np.ndarray, cp: np.ndarray) -> float:
    """The rotation strength for this state under the configured policy.

    Epsilon policy: eps / (2*||dp||_F*||cp||_F + eps), always in (0, 1].
    Zero factor norms give s_p = 1, which is harmless since S is then zero.
    """
    if config.sp_policy.mode == "fixed":
        return config.sp_policy.value
    eps = config.sp_policy.value
    denom = 2.0 * float(np.linalg.norm(dp)) * float(np.linalg.norm(cp)) + eps
    return eps / denom


def sora_apply_rotation_naive(w: np.ndarray, dp, cp, s_p: float) -> np.ndarray:
    """w @ P with the full n x n rotation materialized; O(m*n^2)."""
    if w.shape[1] != dp.shape[0]:
        raise ShapeError(f"cannot rotate {w.shape} with n={dp.shape[0]} factors")
    return linalg.matmul(w, sora_rotation(dp, cp, s_p))


def sora_apply_rotation_reordered(w: np.ndarray, dp, cp, s_p: float) -> np.ndarray:
    """w + s_p*((w @ dp) @ cp.T - (w @ cp) @ dp.T); O(m*n*r_p).

    Never materializes an n x n intermediate.
    """
    if w.shape[1] != dp.shape[0] or dp.shape != cp.shape:
        raise ShapeError(f"cannot rotate {w.shape} with factors {dp.shape}/{cp.shape}")
    w = np.ascontiguousarray(w, dtype=np.float64)
    dp = np.ascontiguousarray(dp, dtype=np.float64)
    cp = np.ascontiguousarray(cp, dtype=np.float64)
    return kernels.rotation_combine(w, w @ dp, w @ cp, dp, cp, s_p)


def sora_merged(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """(W_pre*Diag(d) + s*B*A) @ P via the reordered multiply."""
    _require(state, config)
    m = prediag_merged(state, config)
    s_p = resolve_sp(config, state.dp, state.cp)
    return sora_apply_rotation_reordered(m, state.dp, state.cp, s_p)


def ortho_variant_merged(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """Pre-Ortho: W_pre @ P + s*B*A. Post-Ortho: (W_pre + s*B*A) @ P."""
    _require(state, config)
    s_p = resolve_sp(config, state.dp, state.cp)
    if config.method is Method.PRE_ORTHO:
        rotated = sora_apply_rotation_reordered(state.w_pre, state.dp, state.cp, s_p)
        return kernels.add_scaled(rotated, _ba(state), config.scale_s)
    if config.method is Method.POST_ORTHO:
        base = kernels.add_scaled(state.w_pre, _ba(state), config.scale_s)
        return sora_apply_rotation_reordered(base, state.dp, state.cp, s_p)
    raise MethodStateError(f"{config.method.value} is not an ortho-only variant")


def merged_weight(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """Single merge entry point; dispatches on the configured method."""
    method = config.method
    if method is Method.LORA:
        _require(state, config)
        return kernels.add_scaled(state.w_pre, _ba(state), config.scale_s)
    if method is Method.DORA:
        return dora_merged_matrix_form(state, config)
    if method is Method.PRE_DIAG:
        return prediag_merged(state, config)
    if method is Method.SORA:
        return sora_merged(state, config)
    if method in (Method.PRE_ORTHO, Method.POST_ORTHO):
        return ortho_variant_merged(state, config)
    raise MethodStateError(f"unhandled method {method!r}")


def delta_weight(state: AdapterState, config: AdapterConfig) -> np.ndarray:
    """Effective update: merged weight minus the frozen weight."""
    return merged_weight(state, config) - state.w_pre


def numerical_rank(a: np.ndarray, threshold: float = RANK_THRESHOLD) -> int:
    """Count of singular values above threshold * sigma_1."""
    s = linalg.singular_values(a)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > threshold * s[0]))


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    frozen: int

    @property
    def ratio(self) -> float:
        return self.trainable / (self.trainable + self.frozen)


def param_count(config: AdapterConfig, m: int, n: int) -> ParamCount:
    """Trainable/frozen parameter counts for one m x n layer."""
    r = config.rank_r
    rp = config.rotation_rank_rp
    trainable = r * (m + n)
    if config.method in _DIAG_METHODS:
        trainable += n
    if config.method in _ORTHO_METHODS:
        trainable += 2 * n * rp
    return ParamCount(trainable=trainable, frozen=m * n)


@dataclass
class EquivalenceReport:
    """Result of a DoRA two-form agreement sweep."""

    trials: int
    passes: int
    max_rel_deviation: float
    tolerance: float
    counterexample: dict | None = None

    @property
    def ok(self) -> bool:
        return self.passes == self.trials


def verify_dora_equivalence(
    trials: int,
    seed: int = 0,
    max_m: int = 128,
    max_n: int = 128,
    max_r: int = 16,
    tolerance: float = 1e-12,
) -> EquivalenceReport:
    """Check dora_merged_original against dora_merged_matrix_form on random
    instances; the two must agree to `tolerance` relative Frobenius error.
    """
    rng = np.random.default_rng(seed)
    passes = 0
    worst = 0.0
    counterexample = None
    for _ in range(trials):
        m = int(rng.integers(2, max_m + 1))
        n = int(rng.integers(2, max_n + 1))
        r = int(rng.integers(1, min(max_r, m, n) + 1))
        config = AdapterConfig(Method.DORA, rank_r=r)
        w_pre = rng.normal(0.0, 1.0, size=(m, n))
        state = random_state(w_pre, config, seed=int(rng.integers(0, 2**31)))
        original = dora_merged_original(state, config)
        matrix_form = dora_merged_matrix_form(state, config)
        dev = linalg.frobenius_norm(original - matrix_form) / linalg.frobenius_norm(original)
        if dev <= tolerance:
            passes += 1
        elif counterexample is None:
            counterexample = {"m": m, "n": n, "r": r, "rel_deviation": dev}
        worst = max(worst, dev)
    return EquivalenceReport(trials, passes, worst, tolerance, counterexample)
