"""Dense single-device tensor ops.

A tensor here is a C-contiguous numpy ndarray in float32 or float64. These
ops are the single-rank reference semantics: every sharded op in this package
is required to reproduce them (up to summation-order noise), and the dispatch
fallback gathers shards and calls straight into this module.

Reductions that feed statistics (softmax, layer_norm, attention) accumulate
in float64 regardless of element dtype and cast back at the end. That choice
is load-bearing: the sharded versions assemble the same float64 statistics
from partial sums, so the two paths agree to summation-order rounding.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateInputError,
    DimensionError,
    ShapeError,
    UnsupportedConfigError,
)

DTYPES = (np.float32, np.float64)

ELEMENTWISE_OPS = ("add", "mul", "scale")


def byte_width(dtype) -> int:
    """Bytes per element for a supported dtype."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UnsupportedConfigError(f"unsupported dtype {dt}; use float32 or float64")
    return dt.itemsize


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce to a C-contiguous float32/float64 ndarray."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


def _check_2d(name: str, a: np.ndarray) -> None:
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[m,k] @ [k,n] -> [m,n]."""
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dims disagree: a is {a.shape}, b is {b.shape}"
        )
    return a @ b


def add(a, b):
    return _binary("add", a, b, np.add)


def mul(a, b):
    return _binary("mul", a, b, np.multiply)


def scale(a, s):
    if isinstance(s, np.ndarray) and s.ndim != 0:
        raise DimensionError(f"scale expects a scalar, got array of shape {s.shape}")
    return a * float(s)


def _binary(name, a, b, ufunc):
    # No silent broadcasting: shapes match exactly, or b is a scalar.
    if isinstance(b, np.ndarray) and b.ndim != 0:
        if a.shape != b.shape:
            raise DimensionError(
                f"{name} operand shapes disagree: {a.shape} vs {b.shape}"
            )
        return ufunc(a, b)
    return ufunc(a, float(b))


def elementwise(op: str, a, b):
    """Apply one of add/mul/scale by name."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    raise UnsupportedConfigError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """z = x @ W^T + b, with x [batch, n_in], W [n_out, n_in], b [n_out]."""
    _check_2d("x", x)
    _check_2d("weight", weight)
    if bias.ndim != 1:
        raise DimensionError(f"bias must be 1-D, got shape {bias.shape}")
    n_out, n_in = weight.shape
    if x.shape[1] != n_in:
        raise DimensionError(
            f"linear input width {x.shape[1]} does not match weight n_in {n_in}"
        )
    if bias.shape[0] != n_out:
        raise DimensionError(
            f"bias length {bias.shape[0]} does not match weight n_out {n_out}"
        )
    return x @ weight.T + bias


def linear_backward(x, weight, d_out):
    """Gradients of z = x @ W^T + b given upstream d_out [batch, n_out].

    Returns (d_x, d_weight, d_bias):
      d_x = d_out @ W
      d_weight = d_out^T @ x
      d_bias = sum over batch of d_out
    """
    _check_2d("x", x)
    _check_2d("weight", weight)
    _check_2d("d_out", d_out)
    n_out, n_in = weight.shape
    if x.shape[1] != n_in or d_out.shape[1] != n_out or d_out.shape[0] != x.shape[0]:
        raise DimensionError(
            f"linear_backward shapes disagree: x {x.shape}, weight {weight.shape}, "
            f"d_out {d_out.shape}"
        )
    d_x = d_out @ weight
    d_weight = d_out.T @ x
    d_bias = d_out.sum(axis=0)
    return d_x, d_weight, d_bias


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a 1-D conv along one spatial dim."""
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv output extent {out} < 1 for input {extent}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _conv_params(n_spatial, kernel_shape, stride, padding):
    strides = (stride,) * n_spatial if isinstance(stride, int) else tuple(stride)
    paddings = (padding,) * n_spatial if isinstance(padding, int) else tuple(padding)
    if len(strides) != n_spatial or len(paddings) != n_spatial:
        raise DimensionError(
            f"stride/padding must have one entry per spatial dim ({n_spatial})"
        )
    for k in kernel_shape:
        if k % 2 != 1:
            raise UnsupportedConfigError(
                f"conv kernels must be odd, got kernel shape {tuple(kernel_shape)}"
            )
    for s in strides:
        if s < 1:
            raise UnsupportedConfigError(f"conv stride must be >= 1, got {s}")
    for p in paddings:
        if p < 0:
            raise UnsupportedConfigError(f"conv padding must be >= 0, got {p}")
    return strides, paddings


def conv(x: np.ndarray, weight: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Cross-correlation over 1 or 2 spatial dims, zero padding, dilation 1.

    x: [c_in, *spatial] or [batch, c_in, *spatial]
    weight: [c_out, c_in, *kernel], every kernel extent odd
    stride/padding: int or per-spatial-dim tuple
    """
    n_spatial = weight.ndim - 2
    if n_spatial not in (1, 2):
        raise UnsupportedConfigError(
            f"conv supports 1 or 2 spatial dims, weight shape {weight.shape} implies {n_spatial}"
        )
    batched = x.ndim == n_spatial + 2
    if not batched and x.ndim != n_spatial + 1:
        raise DimensionError(
            f"conv input shape {x.shape} incompatible with weight {weight.shape}"
        )
    xb = x if batched else x[None]
    c_out, c_in = weight.shape[:2]
    if xb.shape[1] != c_in:
        raise DimensionError(
            f"conv input channels {xb.shape[1]} != weight c_in {c_in}"
        )
    kernel = weight.shape[2:]
    strides, paddings = _conv_params(n_spatial, kernel, stride, padding)
    for g, k, s, p in zip(xb.shape[2:], kernel, strides, paddings):
        conv_output_extent(g, k, s, p)  # raises if any output extent < 1

    pad_spec = [(0, 0), (0, 0)] + [(p, p) for p in paddings]
    xp = np.pad(xb, pad_spec)
    spatial_axes = tuple(range(2, 2 + n_spatial))
    win = sliding_window_view(xp, kernel, axis=spatial_axes)
    # win: [batch, c_in, *out_full, *kernel]; subsample the out dims by stride.
    sub = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in strides)
    win = win[sub]
    if n_spatial == 1:
        out = np.einsum("bcok,dck->bdo", win, weight)
    else:
        out = np.einsum("bcpqkl,dckl->bdpq", win, weight)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return out if batched else out[0]


def _check_axis(x: np.ndarray, dim: int) -> int:
    if not -x.ndim <= dim < x.ndim:
        raise DimensionError(f"axis {dim} out of range for shape {x.shape}")
    return dim % x.ndim


def softmax(x: np.ndarray, dim: int) -> np.ndarray:
    """Max-shifted softmax along dim; finite for any finite input."""
    dim = _check_axis(x, dim)
    if x.shape[dim] == 0:
        raise DegenerateInputError(
            f"softmax over zero-extent axis {dim} of shape {x.shape}"
        )
    x64 = x.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=dim, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=dim, keepdims=True)
    return out.astype(x.dtype, copy=False)


def layer_norm(x: np.ndarray, dim: int, eps: float = 1e-5) -> np.ndarray:
    """Normalize along dim to zero mean, unit variance (population).

    Variance comes from float64 moments (E[x^2] - mean^2) rather than a
    two-pass formula: the sharded version assembles exactly these moments
    from all-reduced partial sums, so both paths share one formula.
    """
    dim = _check_axis(x, dim)
    n = x.shape[dim]
    if n == 0:
        raise DegenerateInputError(
            f"layer_norm over zero-extent axis {dim} of shape {x.shape}"
        )
    x64 = x.astype(np.float64, copy=False)
    mean = x64.mean(axis=dim, keepdims=True)
    var = (x64 * x64).mean(axis=dim, keepdims=True) - mean * mean
    var = np.maximum(var, 0.0)  # moments formula can go -0.0 on constant rows
    out = (x64 - mean) / np.sqrt(var + eps)
    return out.astype(x.dtype, copy=False)


def sdpa_dense(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with q [s_q, d], k [s_k, d], v [s_k, d]."""
    _check_2d("q", q)
    _check_2d("k", k)
    _check_2d("v", v)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"q/k head dims disagree: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k/v lengths disagree: {k.shape} vs {v.shape}")
    if k.shape[0] == 0:
        raise DegenerateInputError("attention over an empty key set")
    scores = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
    p = softmax(scores, dim=1)
    return (p @ v).astype(q.dtype, copy=False)
