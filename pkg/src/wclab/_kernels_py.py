"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures, same math; each function costs one or more full-matrix
numpy passes where the compiled versions fuse into a single pass.
"""

import numpy as np

BACKEND = "python"


def add_scaled(x, y, s):
    """x + s*y, elementwise."""
    return x + s * y


def scale_columns(w, d):
    """Column j of the result is d[j] times column j of w."""
    return w * d


def column_sq_norms(w):
    """Per-column sum of squares (length w.shape[1])."""
    return np.einsum("ij,ij->j", w, w)


def skew_lowrank(dp, cp):
    """dp @ cp.T - cp @ dp.T; antisymmetric up to exact negation."""
    return dp @ cp.T - cp @ dp.T


def rotation_combine(w, u, v, dp, cp, s_p):
    """w + s_p*(u @ cp.T - v @ dp.T) with u = w @ dp, v = w @ cp precomputed.

    The rank-2*r_p update is taken as one stacked product so only a single
    full-size temporary is created.
    """
    return w + np.hstack((u * s_p, v * (-s_p))) @ np.hstack((cp, dp)).T


def prediag_combine(w_pre, ba, d, s):
    """w_pre scaled per column by d, plus s*ba."""
    return w_pre * d + s * ba
