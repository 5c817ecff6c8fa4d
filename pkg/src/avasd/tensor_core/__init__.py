"""Dense tensor primitives: layer forward/backward pairs, PRNG, SGD, grad check."""

from .gradcheck import grad_check, numeric_grad
from .optim import sgd_step
from .tensor import (
    BENCH_DTYPE,
    TRAIN_DTYPE,
    Parameter,
    Prng,
    as_tensor,
    check_shape,
    glorot_uniform,
    he_uniform,
)
from . import ops

__all__ = [
    "BENCH_DTYPE",
    "TRAIN_DTYPE",
    "Parameter",
    "Prng",
    "as_tensor",
    "check_shape",
    "glorot_uniform",
    "he_uniform",
    "grad_check",
    "numeric_grad",
    "ops",
    "sgd_step",
]
