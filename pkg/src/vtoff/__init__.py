"""Desk-scale virtual try-off: recover a flat garment image from a photo of
a clothed person, using dual diffusion transformers with flow matching and
key/value feature injection."""

import os

# Cap BLAS parallelism before numpy loads its backend; this must run at
# package import time to take effect.
_threads = os.environ.get("VTOFF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    DatasetError,
    NumericsError,
    ShapeError,
    ValidationError,
    VtoffError,
)
from .rng import RngState  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "RngState",
    "VtoffError", "ShapeError", "NumericsError", "ConfigError",
    "ValidationError", "CheckpointError", "DatasetError",
    "VirtualTryOff",
]


def __getattr__(name):
    # sklearn import is slow; load the estimator facade on first use.
    if name == "VirtualTryOff":
        from .estimator import VirtualTryOff
        return VirtualTryOff
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
