"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
used otherwise, or when ``WCLAB_PURE_PYTHON`` is set in the environment.
Both expose the same functions with identical semantics.
"""

import os

from . import _kernels_py


def _load():
    if os.environ.get("WCLAB_PURE_PYTHON"):
        return _kernels_py
    try:
        from . import _kernels
    except ImportError:
        return _kernels_py
    return _kernels


kernels = _load()
BACKEND = kernels.BACKEND


def have_extension() -> bool:
    """True when the compiled kernel module can be imported at all."""
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name: str):
    """Return a kernel module by name ("ext" or "python").

    Used by the backend benchmark, which needs both side by side.
    """
    if name == "python":
        return _kernels_py
    if name == "ext":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
