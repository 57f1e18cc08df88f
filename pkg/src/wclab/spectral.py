"""Spectral diagnostics of weight updates.

Stable rank ||dW||_F^2 / ||dW||_2^2, the Shannon entropy of the squared
normalized singular-value spectrum, per-layer reports, and the Weyl-bound
margin check for conditioned updates. Entropy is reported in nats; any
fixed log base preserves all orderings.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DegenerateUpdateError

ZERO_UPDATE_FLOOR = 1e-14
_PROB_FLOOR = 1e-300  # below this, p*log(p) is taken as its limit, 0


def _check_nonzero(dw: np.ndarray) -> float:
    fro = linalg.frobenius_norm(dw)
    if fro <= ZERO_UPDATE_FLOOR:
        raise DegenerateUpdateError(
            f"update has Frobenius norm {fro:.3e}; spectral metrics are undefined"
        )
    return fro


def stable_rank(dw: np.ndarray) -> float:
    """||dW||_F^2 / ||dW||_2^2, in [1, min(m, n)]."""
    fro = _check_nonzero(dw)
    spec = linalg.spectral_norm(dw)
    return (fro / spec) ** 2


def entropy_of_spectrum(sigma, base: float | None = None) -> float:
    """Shannon entropy of p_i = sigma_i^2 / sum_j sigma_j^2.

    Operates on a raw value sequence so the step-spectrum verifier can use
    it without building matrices. base=None means natural log (nats).
    """
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0 or np.any(s < 0):
        raise ValueError("spectrum must be a non-empty sequence of non-negative reals")
    energy = float(np.sum(s * s))
    if energy <= 0.0:
        raise DegenerateUpdateError("all-zero spectrum has no entropy")
    p = (s * s) / energy
    p = p[p >= _PROB_FLOOR]
    h = float(-np.sum(p * np.log(p)))
    if base is not None:
        h /= math.log(base)
    return h


def svd_entropy(dw: np.ndarray) -> float:
    """SVD entropy of a non-zero update, in nats."""
    _check_nonzero(dw)
    return entropy_of_spectrum(linalg.singular_values(dw))


def normalized_spectrum(dw: np.ndarray) -> np.ndarray:
    """sigma_i / sigma_1: non-increasing, starts at 1, scale invariant."""
    _check_nonzero(dw)
    s = linalg.singular_values(dw)
    return s / s[0]


@dataclass(frozen=True)
class SpectralReport:
    """Per-layer spectral metrics; metric fields are None when degenerate."""

    layer_name: str
    num_singular_values: int
    degenerate: bool = False
    stable_rank: float | None = None
    svd_entropy_nats: float | None = None
    sigma_max: float | None = None
    normalized_spectrum: np.ndarray | None = None


def layer_report(name: str, dw: np.ndarray) -> SpectralReport:
    """SpectralReport for one layer; zero updates are flagged, not faked."""
    num_sv = min(dw.shape)
    if linalg.frobenius_norm(dw) <= ZERO_UPDATE_FLOOR:
        return SpectralReport(layer_name=name, num_singular_values=num_sv, degenerate=True)
    s = linalg.singular_values(dw)
    return SpectralReport(
        layer_name=name,
        num_singular_values=num_sv,
        stable_rank=stable_rank(dw),
        svd_entropy_nats=entropy_of_spectrum(s),
        sigma_max=float(s[0]),
        normalized_spectrum=s / s[0],
    )


@dataclass(frozen=True)
class AggregateReport:
    num_layers: int
    num_degenerate: int
    stable_rank_mean: float | None
    stable_rank_median: float | None
    stable_rank_min: float | None
    stable_rank_max: float | None
    entropy_mean: float | None
    entropy_median: float | None
    entropy_min: float | None
    entropy_max: float | None


def aggregate_reports(reports) -> AggregateReport:
    """Unweighted per-metric summary across non-degenerate layers."""
    reports = list(reports)
    ranks = [r.stable_rank for r in reports if not r.degenerate]
    ents = [r.svd_entropy_nats for r in reports if not r.degenerate]

    def _stats(values):
        if not values:
            return (None, None, None, None)
        return (
            statistics.fmean(values),
            statistics.median(values),
            min(values),
            max(values),
        )

    sr = _stats(ranks)
    en = _stats(ents)
    return AggregateReport(
        num_layers=len(reports),
        num_degenerate=sum(1 for r in reports if r.degenerate),
        stable_rank_mean=sr[0],
        stable_rank_median=sr[1],
        stable_rank_min=sr[2],
        stable_rank_max=sr[3],
        entropy_mean=en[0],
        entropy_median=en[1],
        entropy_min=en[2],
        entropy_max=en[3],
    )


def weyl_margin(w_pre, d_vec, b, a, s: float, r: int) -> np.ndarray:
    """Slack in sigma_i(dW) <= sigma_1(W_pre(D-I)) + sigma_i(s*B*A*D) for i > r.

    dW is the conditioned update W_pre(D-I) + s*B*A*D. Returns
    bound_i - sigma_i(dW) for each i > r (1-based); every entry must be
    >= -1e-9 because the bound is an unconditional singular-value inequality.
    """
    d_vec = np.asarray(d_vec, dtype=np.float64).ravel()
    x = linalg.diag_right_mul(w_pre, d_vec - 1.0)
    y = linalg.diag_right_mul(s * (b @ a), d_vec)
    dw = x + y
    sigma_dw = linalg.singular_values(dw)
    sigma_y = linalg.singular_values(y)
    sigma1_x = float(linalg.singular_values(x)[0])
    tail = slice(r, len(sigma_dw))
    return sigma1_x + sigma_y[tail] - sigma_dw[tail]


@dataclass
class WeylReport:
    trials: int
    passes: int
    min_margin: float
    tolerance: float
    counterexample: dict | None = None

    @property
    def ok(self) -> bool:
        return self.passes == self.trials


def verify_weyl_bound(
    trials: int,
    seed: int = 0,
    max_m: int = 64,
    max_n: int = 64,
    max_r: int = 8,
    tolerance: float = -1e-9,
) -> WeylReport:
    """Margin sweep over random DoRA-style instances."""
    rng = np.random.default_rng(seed)
    passes = 0
    worst = math.inf
    counterexample = None
    for _ in range(trials):
        m = int(rng.integers(4, max_m + 1))
        n = int(rng.integers(4, max_n + 1))
        r = int(rng.integers(1, min(max_r, m - 1, n - 1) + 1))
        w_pre = rng.normal(0.0, 1.0, size=(m, n))
        d_vec = rng.uniform(0.5, 1.5, size=n)
        b = rng.normal(0.0, 1.0, size=(m, r))
        a = rng.normal(0.0, 1.0, size=(r, n))
        s = float(rng.uniform(0.1, 2.0))
        margins = weyl_margin(w_pre, d_vec, b, a, s, r)
        low = float(margins.min()) if margins.size else 0.0
        if low >= tolerance:
            passes += 1
        elif counterexample is None:
            counterexample = {"m": m, "n": n, "r": r, "min_margin": low}
        worst = min(worst, low)
    return WeylReport(trials, passes, worst if trials else 0.0, tolerance, counterexample)
