from .tensor import Tensor, no_grad, grad_enabled
from .ops import (
    batch_norm,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    linear,
    max_pool2d,
    mse,
    permute,
    upsample_nearest,
)
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    LeakyReLU,
    Linear,
    MaxPool2d,
    Module,
    Permute,
    Sequential,
    UpsampleNearest,
    kaiming_uniform,
)
from .optim import Adam, EarlyStopper, cosine_lr, early_stop
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "no_grad", "grad_enabled",
    "conv2d", "conv_transpose2d", "max_pool2d", "leaky_relu", "batch_norm",
    "upsample_nearest", "linear", "permute", "mse",
    "Module", "Conv2d", "ConvTranspose2d", "MaxPool2d", "LeakyReLU",
    "BatchNorm2d", "UpsampleNearest", "Linear", "Permute", "Flatten",
    "Sequential", "kaiming_uniform",
    "Adam", "cosine_lr", "early_stop", "EarlyStopper",
    "save_checkpoint", "load_checkpoint",
]
