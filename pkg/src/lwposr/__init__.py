"""Lightweight two-stream pose regression stack: tensors with reverse-mode
autodiff, depthwise-separable convolution and transformer-encoder layers,
an analytical parameter/MAC cost model, synthetic pose data, and training."""

from . import _runtime  # noqa: F401  (malloc/BLAS setup, import side effect)
from .tensor import (
    AutodiffError,
    LwposrError,
    NumericError,
    ParamTensor,
    ShapeError,
    Tensor,
    count_macs,
    no_grad,
)

__all__ = [
    "AutodiffError",
    "LwposrError",
    "NumericError",
    "ParamTensor",
    "ShapeError",
    "Tensor",
    "count_macs",
    "no_grad",
]
