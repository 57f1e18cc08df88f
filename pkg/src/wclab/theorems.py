"""Numerical verifiers for the two spectrum/rotation guarantees.

First: among step-shaped normalized spectra with the minor-singular-value
energy held fixed, the three-level spectrum {1, beta x (r-1), gamma x (s-r)}
has strictly higher entropy than the two-level {1, alpha x (r-1)}, and the
gap has the closed form

    ((r-1) b^2 log(a^2/b^2) + (s-r) g^2 log(a^2/g^2)) / E,   E = 1 + (r-1) a^2.

Second: for skew-symmetric J, ||exp(J) - T_k(J)||_2 <= ||J||_2^k / k! with
T_k the k-term Taylor prefix, and the epsilon rule for s_p keeps
||exp(s_p*S) - I||_2 <= epsilon. Both are checked against the high-precision
exponential in wclab.linalg; failures are reported, never thrown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .adapters import AdapterConfig, Method, SpPolicy, resolve_sp, sora_skew
from .errors import ShapeError
from .spectral import entropy_of_spectrum

_SKEW_TOL = 1e-12
_FP_SLACK = 1e-12


@dataclass(frozen=True)
class StepSpectrumParams:
    """Parameters of one paired two-level/three-level spectrum draw.

    Hypotheses: s > r >= 2, 0 < gamma < beta < alpha < 1, and the energy
    constraint (r-1)*alpha^2 == (r-1)*beta^2 + (s-r)*gamma^2.
    """

    r: int
    s: int
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if not (self.s > self.r >= 2):
            raise ValueError(f"need s > r >= 2, got r={self.r}, s={self.s}")
        lhs = (self.r - 1) * self.alpha**2
        rhs = (self.r - 1) * self.beta**2 + (self.s - self.r) * self.gamma**2
        if abs(lhs - rhs) > 1e-12 * max(lhs, rhs):
            raise ValueError("energy constraint violated")
        if not (self.alpha > self.gamma > 0 and self.beta > 0):
            raise ValueError("need alpha > gamma > 0 and beta > 0")


def step_spectrum_lora(r: int, alpha: float) -> np.ndarray:
    """Two-level spectrum: one 1 followed by (r-1) copies of alpha."""
    if r < 2:
        raise ValueError(f"r must be >= 2, got {r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return np.concatenate(([1.0], np.full(r - 1, alpha)))


def step_spectrum_dora(r: int, s: int, alpha: float, beta: float):
    """Three-level spectrum with gamma fixed by the energy constraint.

    Returns (spectrum, gamma). Raises if the derived gamma violates the
    hypotheses gamma < alpha and gamma < beta; samplers resample instead.
    """
    if not s > r >= 2:
        raise ValueError(f"need s > r >= 2, got r={r}, s={s}")
    if not 0.0 < beta < alpha < 1.0:
        raise ValueError(f"need 0 < beta < alpha < 1, got alpha={alpha}, beta={beta}")
    gamma = math.sqrt((r - 1) * (alpha**2 - beta**2) / (s - r))
    if gamma >= alpha or gamma >= beta:
        raise ValueError(
            f"derived gamma={gamma:.6g} violates gamma < min(alpha, beta)"
        )
    spectrum = np.concatenate(([1.0], np.full(r - 1, beta), np.full(s - r, gamma)))
    return spectrum, gamma


def closed_form_entropy_gap(params: StepSpectrumParams, base: float | None = None) -> float:
    """The proof's closed form for H(three-level) - H(two-level)."""
    r, s = params.r, params.s
    a2, b2, g2 = params.alpha**2, params.beta**2, params.gamma**2
    energy = 1.0 + (r - 1) * a2
    gap = ((r - 1) * b2 * math.log(a2 / b2) + (s - r) * g2 * math.log(a2 / g2)) / energy
    if base is not None:
        gap /= math.log(base)
    return gap


def sample_step_spectrum_params(rng: np.random.Generator, max_resamples: int = 100) -> StepSpectrumParams:
    """Draw hypothesis-satisfying parameters; resample on gamma violations."""
    for _ in range(max_resamples):
        r = int(rng.integers(2, 17))
        s = int(rng.integers(r + 1, 65))
        alpha = float(rng.uniform(0.05, 0.95))
        beta = float(rng.uniform(0.01, 0.99 * alpha))
        gamma = math.sqrt((r - 1) * (alpha**2 - beta**2) / (s - r))
        if gamma < beta:  # beta < alpha already holds by construction
            return StepSpectrumParams(r=r, s=s, alpha=alpha, beta=beta, gamma=gamma)
    raise RuntimeError(f"no valid draw in {max_resamples} attempts")


@dataclass
class Theorem1Report:
    trials: int
    passes: int
    min_gap: float
    max_closed_form_error: float
    counterexample: dict | None = None
    log_base: float | None = None

    @property
    def ok(self) -> bool:
        return self.passes == self.trials


def verify_theorem1(trials: int, seed: int = 0, base: float | None = None,
                    form_tol: float = 1e-10) -> Theorem1Report:
    """Check, per random draw, that the three-level entropy strictly exceeds
    the two-level one and that the closed-form gap matches the direct gap.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    passes = 0
    min_gap = math.inf
    max_form_err = 0.0
    counterexample = None
    for _ in range(trials):
        params = sample_step_spectrum_params(rng)
        h_lora = entropy_of_spectrum(step_spectrum_lora(params.r, params.alpha), base=base)
        spectrum, _ = step_spectrum_dora(params.r, params.s, params.alpha, params.beta)
        h_dora = entropy_of_spectrum(spectrum, base=base)
        gap = h_dora - h_lora
        form_err = abs(gap - closed_form_entropy_gap(params, base=base))
        min_gap = min(min_gap, gap)
        max_form_err = max(max_form_err, form_err)
        if gap > 0.0 and form_err <= form_tol:
            passes += 1
        elif counterexample is None:
            counterexample = {
                "r": params.r, "s": params.s,
                "alpha": params.alpha, "beta": params.beta, "gamma": params.gamma,
                "gap": gap, "closed_form_error": form_err,
            }
    return Theorem1Report(trials, passes, min_gap, max_form_err, counterexample, base)


def taylor_exp(j: np.ndarray, k: int) -> np.ndarray:
    """k-term Taylor prefix of the exponential: sum_{i<k} J^i / i!."""
    if j.ndim != 2 or j.shape[0] != j.shape[1]:
        raise ShapeError(f"taylor_exp needs a square matrix, got {j.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = np.eye(j.shape[0])
    term = np.eye(j.shape[0])
    for i in range(1, k):
        term = (term @ j) / i
        total = total + term
    return total


@dataclass(frozen=True)
class ExpBoundCheck:
    error: float
    bound: float
    ok: bool


def verify_exp_bound(j: np.ndarray, k: int) -> ExpBoundCheck:
    """error = ||exp(J) - T_k(J)||_2 against bound = ||J||_2^k / k!."""
    defect = linalg.frobenius_norm(j + j.T)
    if defect > _SKEW_TOL * max(1.0, linalg.frobenius_norm(j)):
        raise ValueError(f"input is not skew-symmetric (defect {defect:.3e})")
    error = linalg.spectral_norm(linalg.expm(j) - taylor_exp(j, k))
    bound = linalg.spectral_norm(j) ** k / math.factorial(k)
    return ExpBoundCheck(error=error, bound=bound, ok=error <= bound + _FP_SLACK)


@dataclass
class ExpBoundSweepReport:
    trials: int
    taylor_passes: dict[int, int]
    worst_slack: float
    counterexample: dict | None = None

    @property
    def ok(self) -> bool:
        return all(v == self.trials for v in self.taylor_passes.values())


def verify_expbound(trials: int, seed: int = 0, max_n: int = 32,
                    ks=(1, 2, 3)) -> ExpBoundSweepReport:
    """k-term Taylor bound sweep over random skew matrices of varied norm."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    taylor_passes = {k: 0 for k in ks}
    worst_slack = math.inf
    counterexample = None
    for _ in range(trials):
        n = int(rng.integers(2, max_n + 1))
        raw = rng.normal(0.0, 1.0, size=(n, n))
        j = (raw - raw.T) * 10.0 ** rng.uniform(-2.0, 0.3)
        for k in ks:
            check = verify_exp_bound(j, k)
            taylor_passes[k] += check.ok
            worst_slack = min(worst_slack, check.bound - check.error)
            if not check.ok and counterexample is None:
                counterexample = {"n": n, "k": k, "error": check.error, "bound": check.bound}
    return ExpBoundSweepReport(trials, taylor_passes, worst_slack, counterexample)


@dataclass
class Theorem2Report:
    trials: int
    epsilon: float
    passes_skew_norm: int
    passes_identity_distance: int
    passes_first_order: int
    taylor_passes: dict[int, int]
    worst_identity_distance: float
    worst_taylor_slack: float
    counterexample: dict | None = None

    @property
    def ok(self) -> bool:
        return (
            self.passes_skew_norm == self.trials
            and self.passes_identity_distance == self.trials
            and self.passes_first_order == self.trials
            and all(v == self.trials for v in self.taylor_passes.values())
        )


def verify_theorem2(trials: int, epsilon: float = 0.01, seed: int = 0,
                    max_n: int = 32, max_rp: int = 4) -> Theorem2Report:
    """Random-factor sweep of the rotation-strength guarantees.

    Per draw of (D_p, C_p): (a) ||S||_F <= 2||D_p||_F||C_p||_F, (b) with
    s_p from the epsilon rule, ||exp(s_p S) - I||_2 <= epsilon, and (c)
    ||exp(J) - (I + J)||_2 <= ||J||_2^2 / 2 for J = s_p S. Separately, the
    k-term Taylor bound is checked for k in {1, 2, 3} on fresh skew draws.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rng = np.random.default_rng(seed)
    config = AdapterConfig(Method.SORA, rank_r=1, sp_policy=SpPolicy.epsilon(epsilon))
    pass_a = pass_b = pass_c = 0
    worst_identity = 0.0
    worst_taylor_slack = math.inf
    taylor_passes = {1: 0, 2: 0, 3: 0}
    counterexample = None
    for _ in range(trials):
        n = int(rng.integers(2, max_n + 1))
        rp = int(rng.integers(1, min(max_rp, n) + 1))
        scale = 10.0 ** rng.uniform(-1.0, 1.0)
        dp = rng.normal(0.0, scale, size=(n, rp))
        cp = rng.normal(0.0, scale, size=(n, rp))
        skew = sora_skew(dp, cp)
        s_p = resolve_sp(config, dp, cp)
        j = s_p * skew

        norm_ok = linalg.frobenius_norm(skew) <= (
            2.0 * np.linalg.norm(dp) * np.linalg.norm(cp) + _FP_SLACK
        )
        exp_j = linalg.expm(j)
        identity_dist = linalg.spectral_norm(exp_j - np.eye(n))
        ident_ok = identity_dist <= epsilon + _FP_SLACK
        first_order_err = linalg.spectral_norm(exp_j - (np.eye(n) + j))
        first_ok = first_order_err <= linalg.spectral_norm(j) ** 2 / 2.0 + _FP_SLACK

        pass_a += norm_ok
        pass_b += ident_ok
        pass_c += first_ok
        worst_identity = max(worst_identity, identity_dist)
        if not (norm_ok and ident_ok and first_ok) and counterexample is None:
            counterexample = {"n": n, "rp": rp, "s_p": s_p,
                              "identity_distance": identity_dist}

        # Independent skew draw for the k-term bound.
        raw = rng.normal(0.0, 1.0, size=(n, n))
        j_free = (raw - raw.T) * 10.0 ** rng.uniform(-2.0, 0.3)
        for k in (1, 2, 3):
            check = verify_exp_bound(j_free, k)
            taylor_passes[k] += check.ok
            worst_taylor_slack = min(worst_taylor_slack, check.bound - check.error)
            if not check.ok and counterexample is None:
                counterexample = {"n": n, "k": k, "error": check.error, "bound": check.bound}
    return Theorem2Report(
        trials=trials,
        epsilon=epsilon,
        passes_skew_norm=pass_a,
        passes_identity_distance=pass_b,
        passes_first_order=pass_c,
        taylor_passes=taylor_passes,
        worst_identity_distance=worst_identity,
        worst_taylor_slack=worst_taylor_slack,
        counterexample=counterexample,
    )
