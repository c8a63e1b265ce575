"""Dense float64 array substrate for the non-local block.

Tensors are C-contiguous numpy arrays: rank 3 (channels, height,
width) for feature maps, rank 2 for matrices with positions as rows.
Every operation validates shapes and raises DimensionError with both
shapes named, so callers never see numpy's broadcasting surprises.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError


def as_tensor(data, rank=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally pinning rank."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if rank is not None and a.ndim != rank:
        raise DimensionError(f"expected rank {rank}, got shape {a.shape}")
    if a.ndim not in (1, 2, 3):
        raise DimensionError(f"rank {a.ndim} unsupported (shape {a.shape})")
    if any(d < 1 for d in a.shape):
        raise DimensionError(f"all dimensions must be >= 1, got {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, rank=2)
    b = as_tensor(b, rank=2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    m = as_tensor(m, rank=2)
    if not np.isfinite(m).all():
        raise NumericError("softmax_rows: non-finite input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def conv1x1(x, weight, bias) -> np.ndarray:
    """Per-position linear map: out[:, h, w] = weight @ x[:, h, w] + bias."""
    x = as_tensor(x, rank=3)
    weight = as_tensor(weight, rank=2)
    bias = as_tensor(bias, rank=1)
    c, h, w = x.shape
    if weight.shape[1] != c:
        raise DimensionError(f"conv1x1 weight {weight.shape} does not accept {c} channels")
    if bias.shape[0] != weight.shape[0]:
        raise DimensionError(f"conv1x1 bias {bias.shape} vs weight {weight.shape}")
    out = np.tensordot(weight, x, axes=([1], [0])) + bias[:, None, None]
    return np.ascontiguousarray(out)


def flatten_spatial(x) -> np.ndarray:
    """(C,H,W) -> (N=H*W, C); row i is the channel vector at (i//W, i%W)."""
    x = as_tensor(x, rank=3)
    c, h, w = x.shape
    return np.ascontiguousarray(x.reshape(c, h * w).T)


def unflatten_spatial(m, h: int, w: int) -> np.ndarray:
    """(N=H*W, C) -> (C,H,W); exact inverse of flatten_spatial."""
    m = as_tensor(m, rank=2)
    n, c = m.shape
    if n != h * w:
        raise DimensionError(f"unflatten: {n} rows cannot fill {h}x{w} positions")
    return np.ascontiguousarray(m.T.reshape(c, h, w))
