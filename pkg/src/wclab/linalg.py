"""Dense float64 matrix kernels.

Matrices are 2-D C-contiguous ``numpy.ndarray`` of float64 throughout the
package. Products, transposes, norms and the SVD delegate to numpy/LAPACK;
the spectral norm uses power iteration with an SVD fallback, and ``expm``
is a Taylor scaling-and-squaring oracle accurate to machine precision so it
can serve as ground truth for the rotation-bound verifiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .errors import NumericalError, ShapeError

# Power iteration parameters (spectral_norm).
_POWER_TOL = 1e-12
_POWER_MAX_ITERS = 1000


def as_matrix(a) -> np.ndarray:
    """Validate and convert to a C-contiguous float64 2-D array.

    Raises ShapeError for non-2-D input and ValueError for non-finite
    entries; this is the single validation choke point for matrices built
    from unvalidated sources.
    """
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("matrix contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, "fro"))


def column_norms(a: np.ndarray) -> np.ndarray:
    """Euclidean norm of each column (length a.shape[1])."""
    return np.sqrt(kernels.column_sq_norms(np.ascontiguousarray(a, dtype=np.float64)))


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value via power iteration on A^T A.

    Deterministic: the start vector is the normalized all-ones vector, with
    a seeded random restart if the iterate lands in the null space. Falls
    back to the SVD if the Rayleigh estimate has not settled to relative
    tolerance 1e-12 within 1000 iterations.
    """
    fro = frobenius_norm(a)
    if fro == 0.0:
        return 0.0
    n = a.shape[1]
    v = np.full(n, 1.0 / math.sqrt(n))
    lam_prev = -1.0
    rng = None
    for _ in range(_POWER_MAX_ITERS):
        w = a.T @ (a @ v)
        wn = float(np.linalg.norm(w))
        if wn == 0.0 or not math.isfinite(wn):
            # Stagnated (start vector in the null space): deterministic restart.
            if rng is None:
                rng = np.random.default_rng(0)
            v = rng.standard_normal(n)
            v /= np.linalg.norm(v)
            lam_prev = -1.0
            continue
        if abs(wn - lam_prev) <= _POWER_TOL * wn:
            return math.sqrt(wn)
        lam_prev = wn
        v = w / wn
    return float(svd(a, compute_vectors=False).singular_values[0])


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: a = left @ diag(singular_values) @ right.T.

    singular_values is non-increasing with length min(rows, cols); vectors
    are None when not requested. Values are never truncated here -- rank
    decisions belong to consumers with an explicit threshold.
    """

    singular_values: np.ndarray
    left: np.ndarray | None = None
    right: np.ndarray | None = None


def svd(a: np.ndarray, compute_vectors: bool = True) -> SvdResult:
    try:
        if compute_vectors:
            u, s, vh = np.linalg.svd(a, full_matrices=False)
            return SvdResult(s, u, np.ascontiguousarray(vh.T))
        return SvdResult(np.linalg.svd(a, compute_uv=False))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for shape {a.shape}") from exc


def singular_values(a: np.ndarray) -> np.ndarray:
    return svd(a, compute_vectors=False).singular_values


def expm(j: np.ndarray) -> np.ndarray:
    """Matrix exponential by Taylor series with scaling and squaring.

    The series is summed until terms fall below 2^-60 of the running sum,
    so truncation error stays well under 1e-14 of the result norm and the
    output can be treated as ground truth by the bound verifiers. For
    skew-symmetric input the result is orthogonal to ~1e-14.
    """
    if j.ndim != 2 or j.shape[0] != j.shape[1]:
        raise ShapeError(f"expm needs a square matrix, got {j.shape}")
    n = j.shape[0]
    norm = frobenius_norm(j)
    if norm == 0.0:
        return np.eye(n)
    # Scale so the series argument has norm <= 0.5.
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5))))
    a = j / (2.0**squarings)
    total = np.eye(n)
    term = np.eye(n)
    for k in range(1, 64):
        term = (term @ a) / k
        total = total + term
        if frobenius_norm(term) <= 2.0**-60 * frobenius_norm(total):
            break
    for _ in range(squarings):
        total = total @ total
    return total


def diag_right_mul(w: np.ndarray, d: np.ndarray) -> np.ndarray:
    """w times Diag(d): column j of the result is d[j] * column j of w."""
    d = np.ascontiguousarray(d, dtype=np.float64).ravel()
    if d.shape[0] != w.shape[1]:
        raise ShapeError(
            f"diagonal of length {d.shape[0]} cannot right-multiply {w.shape}"
        )
    return kernels.scale_columns(np.ascontiguousarray(w, dtype=np.float64), d)


def random_matrix(rows: int, cols: int, dist=("gaussian", 0.0, 1.0), seed=0) -> np.ndarray:
    """Deterministic random matrix.

    dist is ("uniform", lo, hi) with lo < hi (half-open interval) or
    ("gaussian", mu, sigma) with sigma > 0. seed may be anything accepted
    by numpy.random.default_rng, including an existing Generator.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got ({rows}, {cols})")
    name, p1, p2 = dist
    rng = np.random.default_rng(seed)
    if name == "uniform":
        if not p1 < p2:
            raise ValueError(f"uniform bounds must satisfy lo < hi, got ({p1}, {p2})")
        return rng.uniform(p1, p2, size=(rows, cols))
    if name == "gaussian":
        if not p2 > 0:
            raise ValueError(f"gaussian sigma must be positive, got {p2}")
        return rng.normal(p1, p2, size=(rows, cols))
    raise ValueError(f"unknown distribution {name!r}")
