"""Weight-conditioning adapter laboratory.

Explicit matrix-algebra implementations of the low-rank adapter family
(LoRA, DoRA in both forms, Pre-Diag, SORA, and the Pre/Post-Ortho ablation
variants), spectral diagnostics of weight updates, numerical verifiers for
the entropy-ordering and rotation-bound guarantees, and timing benchmarks.
Hot merge kernels run in a compiled extension when available, with a
numpy fallback selected at import (see wclab.backend).
"""

__version__ = "0.1.0"

from .adapters import (  # noqa: F401
    AdapterConfig,
    AdapterState,
    Method,
    SpPolicy,
    delta_weight,
    init_adapter,
    merged_weight,
    param_count,
)
from .backend import BACKEND, have_extension  # noqa: F401
from .linalg import expm, random_matrix, svd  # noqa: F401
from .spectral import layer_report, stable_rank, svd_entropy  # noqa: F401
from .train import TaskSpec, TrainConfig, run_experiment  # noqa: F401
