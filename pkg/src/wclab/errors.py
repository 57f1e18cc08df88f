"""Exception types shared across the package."""


class WclabError(Exception):
    """Base class for all package errors."""


class ShapeError(WclabError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(WclabError, ValueError):
    """An adapter configuration is invalid for the layer it is applied to."""


class MethodStateError(WclabError, ValueError):
    """An adapter state is missing, or has wrongly shaped, tensors for its method."""


class DegenerateColumnError(WclabError, ArithmeticError):
    """A column of W_pre + s*B*A has a norm too small to normalize."""

    def __init__(self, column: int, norm: float, threshold: float = 1e-12):
        self.column = column
        self.norm = norm
        super().__init__(
            f"column {column} has norm {norm:.3e}, below the {threshold:.0e} threshold"
        )


class DegenerateUpdateError(WclabError, ArithmeticError):
    """Spectral metrics were requested for a (numerically) zero weight update."""


class DivergenceError(WclabError, ArithmeticError):
    """A training run produced a non-finite loss."""

    def __init__(self, step: int, seed=None):
        self.step = step
        self.seed = seed
        where = f"step {step}" if seed is None else f"step {step} (seed {seed})"
        super().__init__(f"training diverged at {where}")


class NumericalError(WclabError, ArithmeticError):
    """An iterative numerical routine failed to converge."""


class EqualityPrecheckError(WclabError):
    """Two benchmark paths disagreed on the benchmark inputs; timing aborted."""


class MatrixFileError(WclabError):
    """Base class for matrix-container file errors."""


class BadMagicError(MatrixFileError):
    """File does not start with the MTX1 magic bytes."""


class TruncatedFileError(MatrixFileError):
    """File ends before the declared payload is complete."""


class SizeMismatchError(MatrixFileError):
    """File length or header dimensions are inconsistent."""


class NonFinitePayloadError(MatrixFileError):
    """Payload contains NaN or infinite entries."""


class ManifestError(WclabError):
    """A manifest failed to load or validate."""
