"""Attention-enhanced graph convolutional classifier for lung-nodule CT patches."""

import os as _os

# Honor the worker-parallelism cap before numpy loads its math kernels.
_threads = _os.environ.get("NODULE_GCN_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    FormatError,
    NoduleGcnError,
    StageError,
    UsageError,
    ValidationError,
)
from .tensor import Tensor, backward, finite_diff_grad, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_grad",
    "no_grad",
    "NoduleGcnError",
    "DimensionError",
    "ValidationError",
    "ConfigError",
    "FormatError",
    "UsageError",
    "StageError",
    "__version__",
]
