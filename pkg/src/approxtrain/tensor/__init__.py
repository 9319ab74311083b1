from .autograd import DTYPE, Function, NonFiniteError, Tensor, no_grad, track_saved
from .functional import conv2d_exact, im2col, linear_exact, maxpool2x2, relu
from .optim import SGD, sgd_step
from .serialize import CheckpointFormatError, load_tensors, save_tensors

__all__ = [
    "DTYPE",
    "Function",
    "NonFiniteError",
    "Tensor",
    "no_grad",
    "track_saved",
    "conv2d_exact",
    "im2col",
    "linear_exact",
    "maxpool2x2",
    "relu",
    "SGD",
    "sgd_step",
    "CheckpointFormatError",
    "load_tensors",
    "save_tensors",
]
