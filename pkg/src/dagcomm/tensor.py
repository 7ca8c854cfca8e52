"""Dense float64 tensors and the handful of in-place ops the runtime needs."""

from __future__ import annotations

from typing import Iterable, Union

import numpy as np

ShapeLike = Union[int, Iterable[int]]


def as_shape(shape: ShapeLike) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ValueError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ValueError(f"every extent must be >= 1, got {dims}")
    return dims


class Tensor:
    """A float64 array with a fixed shape.

    ``data`` is owned by the tensor; callers share tensors between threads
    only through engine tags, never by aliasing the buffer.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        as_shape(arr.shape)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data.ravel()[:6].tolist()}{'...' if self.size > 6 else ''})"


def zeros(shape: ShapeLike) -> Tensor:
    return Tensor(np.zeros(as_shape(shape)))


def ones(shape: ShapeLike) -> Tensor:
    return Tensor(np.ones(as_shape(shape)))


def random_uniform(shape: ShapeLike, seed: int) -> Tensor:
    """Values in [-1, 1); a pure function of ``(shape, seed)``."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1.0, 1.0, size=as_shape(shape)))


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add_inplace(dst: Tensor, src: Tensor) -> Tensor:
    _check_same_shape(dst, src)
    dst.data += src.data
    return dst


def scale_inplace(t: Tensor, alpha: float) -> Tensor:
    if not np.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    t.data *= alpha
    return t


def copy(src: Tensor, dst: Tensor) -> None:
    _check_same_shape(src, dst)
    np.copyto(dst.data, src.data)


def approx_eq(a: Tensor, b: Tensor, tol: float) -> bool:
    _check_same_shape(a, b)
    return bool(np.max(np.abs(a.data - b.data)) <= tol)
