"""Convolution and max-pooling kernels with their exact adjoints.

Every energy gradient of the Hopfield network is assembled from five
primitives defined here: a 3x3 / padding 1 / stride 1 cross-correlation,
its adjoints in the input and in the kernel, a disjoint 2x2 max-pooling and
its adjoint (a scatter to the recorded winners).

All kernels accept either a single tensor ``(C, H, W)`` or a batch
``(B, C, H, W)``. Inputs stored in 16-bit are promoted to 32-bit for the
arithmetic and the result is cast back to the storage precision.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import PoolIndexError, ShapeError

__all__ = [
    "Precision",
    "PoolIndexMap",
    "compute_dtype",
    "conv2d",
    "conv2d_input_adjoint",
    "conv2d_kernel_adjoint",
    "maxpool2",
    "maxpool2_adjoint",
    "maxpool2_gather",
]


class Precision(str, enum.Enum):
    """Storage precision of tensors."""

    F64 = "f64"
    F32 = "f32"
    F16 = "f16"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype({"f64": np.float64, "f32": np.float32, "f16": np.float16}[self.value])

    @property
    def accumulate_dtype(self) -> np.dtype:
        return compute_dtype(self.dtype)

    @classmethod
    def from_dtype(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        for p in cls:
            if p.dtype == dtype:
                return p
        raise ValueError(f"unsupported dtype {dtype}")


def compute_dtype(dtype) -> np.dtype:
    """Accumulation dtype for a storage dtype (16-bit accumulates in 32-bit)."""
    dtype = np.dtype(dtype)
    if dtype == np.float16:
        return np.dtype(np.float32)
    return dtype


def _batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must have shape (C, H, W) or (B, C, H, W), got {x.shape}")


def _storage(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(*arrays)


def _check_kernel(kernel: np.ndarray) -> None:
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"kernel must have shape (C_out, C_in, 3, 3), got {kernel.shape}")


def _windows(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, C, H, W, 3, 3) view over the zero-padded input
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv2d(input: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Cross-correlate ``input`` with a 3x3 ``kernel`` (zero padding 1, stride 1).

    Parameters
    ----------
    input : ndarray of shape (C_in, H, W) or (B, C_in, H, W)
    kernel : ndarray of shape (C_out, C_in, 3, 3)

    Returns
    -------
    ndarray of shape (C_out, H, W) or (B, C_out, H, W)
    """
    _check_kernel(kernel)
    x, squeeze = _batched(input, "input")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    out_dtype = _storage(x, kernel)
    acc = compute_dtype(out_dtype)
    win = _windows(x.astype(acc, copy=False))
    out = np.tensordot(win, kernel.astype(acc, copy=False), axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(out_dtype, copy=False)
    return out[0] if squeeze else out


def conv2d_input_adjoint(upstream: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d` in its input argument.

    Equivalent to a same-padded correlation with the spatially flipped,
    channel-transposed kernel.
    """
    _check_kernel(kernel)
    u, squeeze = _batched(upstream, "upstream")
    if u.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"upstream has {u.shape[1]} channels but kernel produces {kernel.shape[0]}"
        )
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out = conv2d(u, flipped)
    return out[0] if squeeze else out


def conv2d_kernel_adjoint(upstream: np.ndarray, input: np.ndarray,
                          out_dtype=None) -> np.ndarray:
    """Adjoint of :func:`conv2d` in its kernel argument, summed over the batch.

    Returns an array of shape ``(C_out, C_in, 3, 3)`` in ``out_dtype``
    (the storage dtype of the operands by default).
    """
    u, _ = _batched(upstream, "upstream")
    x, _ = _batched(input, "input")
    if u.shape[0] != x.shape[0] or u.shape[2:] != x.shape[2:]:
        raise ShapeError(f"upstream {u.shape} and input {x.shape} are inconsistent")
    storage = _storage(u, x)
    acc = compute_dtype(storage)
    out_dtype = storage if out_dtype is None else out_dtype
    win = _windows(x.astype(acc, copy=False))
    grad = np.tensordot(u.astype(acc, copy=False), win, axes=([0, 2, 3], [0, 2, 3]))
    return grad.astype(out_dtype, copy=False)


@dataclass(frozen=True)
class PoolIndexMap:
    """Winners of a 2x2 max-pooling.

    ``window`` holds, per pooled output entry, the position of the winner
    inside its own window in row-major order (0 = top-left, 3 = bottom-right).
    ``input_shape`` is the shape of the pre-pool tensor.
    """

    window: np.ndarray
    input_shape: tuple

    @property
    def flat(self) -> np.ndarray:
        """Flat row-major index of each winner into the pre-pool tensor."""
        shape = self.input_shape
        w = self.window
        lead = w.shape[:-2]
        ho, wo = w.shape[-2:]
        rows = 2 * np.arange(ho)[:, None] + w // 2
        cols = 2 * np.arange(wo)[None, :] + w % 2
        plane = rows * shape[-1] + cols
        offsets = np.arange(int(np.prod(lead, dtype=np.int64))).reshape(lead) * (shape[-2] * shape[-1])
        return plane + offsets[..., None, None]

    def validate(self, pooled_shape: tuple) -> None:
        if self.window.shape != tuple(pooled_shape):
            raise PoolIndexError(
                f"index map shape {self.window.shape} does not match upstream {pooled_shape}"
            )
        if self.window.size and (self.window.min() < 0 or self.window.max() > 3):
            raise PoolIndexError("pool index lies outside its 2x2 window")


def _to_windows(x: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    v = x.reshape(*lead, h // 2, 2, w // 2, 2)
    v = np.moveaxis(v, -3, -2)  # (..., H/2, W/2, 2, 2)
    return v.reshape(*lead, h // 2, w // 2, 4)


def _from_windows(v: np.ndarray) -> np.ndarray:
    *lead, ho, wo, _ = v.shape
    v = v.reshape(*lead, ho, wo, 2, 2)
    v = np.moveaxis(v, -2, -3)  # (..., H/2, 2, W/2, 2)
    return v.reshape(*lead, 2 * ho, 2 * wo)


def maxpool2(input: np.ndarray) -> tuple[np.ndarray, PoolIndexMap]:
    """Disjoint 2x2 max-pooling.

    Ties are resolved in favour of the smallest flat index.

    Returns
    -------
    values : ndarray with both spatial extents halved
    indices : PoolIndexMap recording each winner
    """
    if input.ndim < 2:
        raise ShapeError(f"maxpool2 needs spatial axes, got shape {input.shape}")
    h, w = input.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {(h, w)}")
    win = _to_windows(input)
    arg = np.argmax(win, axis=-1)  # first maximum wins
    values = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return values, PoolIndexMap(arg.astype(np.int8), tuple(input.shape))


def maxpool2_gather(input: np.ndarray, indices: PoolIndexMap) -> np.ndarray:
    """Pool ``input`` using frozen winners instead of recomputing the maximum."""
    if tuple(input.shape) != tuple(indices.input_shape):
        raise PoolIndexError(
            f"input shape {input.shape} does not match index map {indices.input_shape}"
        )
    win = _to_windows(input)
    return np.take_along_axis(win, indices.window[..., None].astype(np.intp), axis=-1)[..., 0]


def maxpool2_adjoint(upstream: np.ndarray, indices: PoolIndexMap) -> np.ndarray:
    """Scatter ``upstream`` to the recorded winners; zeros elsewhere."""
    indices.validate(upstream.shape)
    out = np.zeros(upstream.shape + (4,), dtype=upstream.dtype)
    np.put_along_axis(out, indices.window[..., None].astype(np.intp), upstream[..., None], axis=-1)
    return _from_windows(out)
