from .core import (
    Tensor,
    bilinear_sample,
    circ_conv1d,
    concat_rows,
    conv2d,
    crop2d,
    mean_all,
    no_grad,
    pixcorr,
    relu,
    row_scale,
    sigmoid,
    smooth_l1,
    sum_all,
    tanh,
    upsample2x,
)
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "Tensor",
    "bilinear_sample",
    "circ_conv1d",
    "concat_rows",
    "conv2d",
    "crop2d",
    "mean_all",
    "no_grad",
    "pixcorr",
    "relu",
    "row_scale",
    "sigmoid",
    "smooth_l1",
    "sum_all",
    "tanh",
    "upsample2x",
]
