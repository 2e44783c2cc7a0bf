from . import autodiff as ad
from .autodiff import NonFiniteError, TraceError, Var, backward, const, param, zero_grad
from .gradcheck import finite_diff_check, relative_error, sample_coords
from .kernels import ShapeError, bilinear_gather, bilinear_sample, conv2d, softmax_attention
from .rng import Rng

__all__ = [
    "ad", "Var", "param", "const", "backward", "zero_grad", "NonFiniteError", "TraceError",
    "finite_diff_check", "relative_error", "sample_coords",
    "ShapeError", "conv2d", "bilinear_gather", "bilinear_sample", "softmax_attention", "Rng",
]
