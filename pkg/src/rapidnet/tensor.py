"""Dense tensor helpers and deterministic random number generation.

Feature maps are plain numpy arrays in (batch, channels, height, width)
layout, contiguous row-major, f32 for model execution and f64 for gradient
checking.  Operations here never mutate their inputs.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .errors import ShapeError

Scalar = Union[int, float]

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


def resolve_dtype(dtype) -> np.dtype:
    """Map 'f32'/'f64' (or a numpy float dtype) to a numpy dtype."""
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}, expected 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise ValueError(f"unsupported dtype {dt}, expected float32 or float64")
    return dt


def dtype_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


class Rng:
    """Deterministic random stream.

    Backed by numpy's PCG64 bit generator: the same seed yields the same
    sample stream on every run and platform (numpy guarantees stream
    stability for a fixed bit generator).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return randn(shape, self, mean=mean, std=std, dtype=dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        check_shape(shape)
        return self._gen.uniform(low, high, size=tuple(shape)).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def check_shape(shape: Sequence[int]) -> tuple:
    """Validate a dimension list (all dims >= 1) and return it as a tuple."""
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0 or any(d < 1 for d in dims):
        raise ShapeError(f"invalid shape {tuple(shape)}: all dimensions must be >= 1")
    return dims


def tensor_new(shape: Sequence[int], fill: Scalar = 0.0, dtype=np.float32) -> np.ndarray:
    """Allocate a tensor of the given shape with every element set to `fill`."""
    dims = check_shape(shape)
    return np.full(dims, fill, dtype=resolve_dtype(dtype))


def randn(shape: Sequence[int], rng: Rng, mean: float = 0.0, std: float = 1.0,
          dtype=np.float32) -> np.ndarray:
    """Draw i.i.d. normal samples; deterministic given the rng state."""
    dims = check_shape(shape)
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    out = rng._gen.standard_normal(dims, dtype=np.float64)
    out = out * std + mean
    return out.astype(resolve_dtype(dtype))


def _check_operands(a: np.ndarray, b) -> None:
    if isinstance(b, np.ndarray) and a.shape != b.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b) -> np.ndarray:
    """Elementwise a + b; b may be a tensor of equal shape or a scalar."""
    _check_operands(a, b)
    return a + b


def mul(a: np.ndarray, b) -> np.ndarray:
    """Elementwise a * b; b may be a tensor of equal shape or a scalar."""
    _check_operands(a, b)
    return a * b


def scale(a: np.ndarray, s: Scalar) -> np.ndarray:
    """Multiply every element of a by the scalar s."""
    return a * a.dtype.type(s)


_ELEMENTWISE = {"add": add, "mul": mul, "scale": scale}


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Dispatch an elementwise op by name ('add', 'mul', 'scale')."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)
