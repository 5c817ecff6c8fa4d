"""Tensor storage, trainable parameters and the seeded PRNG.

Tensors are plain C-contiguous numpy arrays: shape + flat row-major data,
float64 for training/oracle work and float32 for inference benchmarking.
The dtype is fixed when the array is created; ops never silently upcast.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

TRAIN_DTYPE = np.float64
BENCH_DTYPE = np.float32


def as_tensor(data, dtype=TRAIN_DTYPE) -> np.ndarray:
    """Materialize `data` as a C-contiguous array of the requested dtype."""
    return np.ascontiguousarray(data, dtype=dtype)


def check_shape(arr: np.ndarray, expected: tuple, what: str) -> None:
    """Raise ShapeError naming the first dimension that disagrees.

    `expected` may contain None for free dimensions.
    """
    if arr.ndim != len(expected):
        raise ShapeError(f"{what}: expected rank {len(expected)}, got rank {arr.ndim} (shape {arr.shape})")
    for axis, (got, want) in enumerate(zip(arr.shape, expected)):
        if want is not None and got != want:
            raise ShapeError(f"{what}: dimension {axis} is {got}, expected {want} (shape {arr.shape})")


@dataclass
class Parameter:
    """A named trainable tensor with its gradient and momentum buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    velocity: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.velocity.shape != self.value.shape:
            raise ShapeError(f"parameter {self.name}: value/grad/velocity shapes differ")

    @property
    def size(self) -> int:
        return self.value.size


class Prng:
    """Seedable pseudo-random stream.

    Backed by numpy's PCG64 bit generator (128-bit state, fixed published
    algorithm), so equal seeds yield bit-identical draw sequences. Child
    streams derived with `child(tag)` are independent and reproducible.
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, tag: int) -> "Prng":
        """Independent stream fully determined by (this seed, tag)."""
        return Prng(np.random.SeedSequence(entropy=self._seq.entropy, spawn_key=(int(tag),)))

    def uniform(self, low=0.0, high=1.0, size=None, dtype=TRAIN_DTYPE):
        return np.asarray(self._gen.uniform(low, high, size=size)).astype(dtype, copy=False)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=TRAIN_DTYPE):
        return np.asarray(loc + scale * self._gen.standard_normal(size=size)).astype(dtype, copy=False)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def he_uniform(shape: tuple, fan_in: int, prng: Prng, dtype=TRAIN_DTYPE) -> np.ndarray:
    """He (Kaiming) uniform init, the default for conv/dense feeding ReLU."""
    limit = np.sqrt(6.0 / fan_in)
    return prng.uniform(-limit, limit, size=shape, dtype=dtype)


def glorot_uniform(shape: tuple, fan_in: int, fan_out: int, prng: Prng, dtype=TRAIN_DTYPE) -> np.ndarray:
    """Glorot uniform init, used for the GRU gate matrices."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return prng.uniform(-limit, limit, size=shape, dtype=dtype)
