from . import ops
from .core import (
    DimensionError,
    GraphError,
    RecordEntry,
    Tensor,
    as_tensor,
    computation_record,
    debug_finite,
    grad_enabled,
    no_grad,
)
from .io import load_tensor, save_tensor
from .ops import bilinear_upsample, conv2d, fft2d, ifft2d, spectral_filter

__all__ = [
    "DimensionError",
    "GraphError",
    "RecordEntry",
    "Tensor",
    "as_tensor",
    "bilinear_upsample",
    "computation_record",
    "conv2d",
    "debug_finite",
    "fft2d",
    "grad_enabled",
    "ifft2d",
    "load_tensor",
    "no_grad",
    "ops",
    "save_tensor",
    "spectral_filter",
]
