"""Differentiable primitives.

Layout is ``[batch, channel, W, H, D]`` for volumetric ops.  Convolutions
run channels-last internally (one matmul per kernel offset), which is much
faster in numpy than a single im2col contraction.

Broadcasting is deliberately narrow: operands must share a shape, or one of
them is a scalar, or a bias whose shape equals the other operand's trailing
axes (a per-feature bias, or a position table added to every batch item).
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# -- binary elementwise ------------------------------------------------------

def _coerce(a, b) -> tuple[Tensor | None, Tensor | None, np.ndarray, np.ndarray]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and tb is None:
        raise TypeError("at least one operand must be a Tensor")
    dtype = (ta if ta is not None else tb).dtype
    da = ta.data if ta is not None else np.asarray(a, dtype=dtype)
    db = tb.data if tb is not None else np.asarray(b, dtype=dtype)
    if da.shape != db.shape and da.ndim and db.ndim:
        ok = (db.ndim < da.ndim and da.shape[da.ndim - db.ndim:] == db.shape) or (
            da.ndim < db.ndim and db.shape[db.ndim - da.ndim:] == da.shape)
        if not ok:
            raise ShapeError(f"shapes {da.shape} and {db.shape} are not compatible "
                             "(only equal shapes, scalars and last-axis bias broadcast)")
    return ta, tb, da, db


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


def add(a, b) -> Tensor:
    ta, tb, da, db = _coerce(a, b)
    out = da + db

    def backward(g):
        return (_reduce_to(g, da.shape) if ta is not None else None,
                _reduce_to(g, db.shape) if tb is not None else None)

    return Tensor._make(out, [t for t in (ta, tb) if t is not None], _pick(ta, tb, backward))


def sub(a, b) -> Tensor:
    ta, tb, da, db = _coerce(a, b)
    out = da - db

    def backward(g):
        return (_reduce_to(g, da.shape) if ta is not None else None,
                _reduce_to(-g, db.shape) if tb is not None else None)

    return Tensor._make(out, [t for t in (ta, tb) if t is not None], _pick(ta, tb, backward))


def mul(a, b) -> Tensor:
    ta, tb, da, db = _coerce(a, b)
    out = da * db

    def backward(g):
        return (_reduce_to(g * db, da.shape) if ta is not None else None,
                _reduce_to(g * da, db.shape) if tb is not None else None)

    return Tensor._make(out, [t for t in (ta, tb) if t is not None], _pick(ta, tb, backward))


def div(a, b) -> Tensor:
    ta, tb, da, db = _coerce(a, b)
    out = da / db

    def backward(g):
        return (_reduce_to(g / db, da.shape) if ta is not None else None,
                _reduce_to(-g * da / (db * db), db.shape) if tb is not None else None)

    return Tensor._make(out, [t for t in (ta, tb) if t is not None], _pick(ta, tb, backward))


def _pick(ta, tb, backward):
    # drop the gradient slot of a non-tensor operand so it lines up with parents
    if ta is not None and tb is not None:
        return backward
    if ta is not None:
        return lambda g: (backward(g)[0],)
    return lambda g: (backward(g)[1],)


# -- unary elementwise -------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, [x], lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    inner = _GELU_C * (d + _GELU_A * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return Tensor._make(out.astype(d.dtype, copy=False), [x], backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, [x], lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), [x], lambda g: (g / d,))


def pointwise(x: Tensor, kind: str, other: Tensor | None = None) -> Tensor:
    """Dispatch for the three elementwise kinds the network uses."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "add":
        if other is None or (isinstance(other, Tensor) and other.shape != x.shape):
            raise ShapeError("add requires an operand of identical shape")
        return add(x, other)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, [x], backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return Tensor._make(out, [x], lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return Tensor._make(out, [x], lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        rest = t.shape[:axis] + t.shape[axis + 1:]
        if rest != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: shape {t.shape} does not match {tensors[0].shape} "
                             f"off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, list(tensors), backward)


# -- dense algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; ``b`` may be 2-D (shared) or have ``a``'s leading dims."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape[-1]} vs {b.shape[-2]})")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ ({a.shape[:-2]} vs {b.shape[:-2]})")
    da, db = a.data, b.data
    out = da @ db

    def backward(g):
        ga = g @ np.swapaxes(db, -1, -2)
        if db.ndim == 2:
            gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(da, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, [a, b], backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias`` with weight [F, G]."""
    f, gdim = weight.shape
    if x.shape[-1] != f:
        raise ShapeError(f"linear: input trailing extent {x.shape[-1]} != weight rows {f}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, f)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (gdim,))

    def backward(g):
        g2 = g.reshape(-1, gdim)
        gx = (g2 @ weight.data.T).reshape(lead + (f,))
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = [x, weight] + ([bias] if bias is not None else [])
    return Tensor._make(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, [x], backward)


# -- normalisation -----------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    m = d.shape[-1]
    if gain.shape != (m,) or shift.shape != (m,):
        raise ShapeError(f"layer_norm: gain/shift must have shape ({m},)")
    mu = d.mean(axis=-1, keepdims=True)
    var = d.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, m)
        return gx, (lead * xhat.reshape(-1, m)).sum(axis=0), lead.sum(axis=0)

    return Tensor._make(out.astype(d.dtype, copy=False), [x, gain, shift], backward)


class BatchNormState:
    """Running statistics for one batch-norm layer (mutated in training mode)."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, running_mean: np.ndarray, running_var: np.ndarray):
        self.running_mean = running_mean
        self.running_var = running_var

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm3d(x: Tensor, gain: Tensor, shift: Tensor, state: BatchNormState,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    d = x.data
    c = d.shape[1]
    axes = (0,) + tuple(range(2, d.ndim))
    bshape = (1, c) + (1,) * (d.ndim - 2)
    n = d.size // c
    if training:
        if n <= 1:
            raise ValueError("batch_norm3d: cannot normalise a single value per channel "
                             "in training mode")
        mu = d.mean(axis=axes)
        var = d.var(axis=axes)
        # running variance tracks the unbiased estimate
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mu.astype(state.running_mean.dtype)
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * (var * n / (n - 1)).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(d.dtype)
        var = state.running_var.astype(d.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = (d - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gain.data.reshape(bshape) + shift.data.reshape(bshape)

    def backward(g):
        dxhat = g * gain.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (
                dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out, [x, gain, shift], backward)


# -- convolution -------------------------------------------------------------

def _window(n_out: int, offset: int, stride: int) -> slice:
    return slice(offset, offset + stride * (n_out - 1) + 1, stride)


def _gather(big: np.ndarray, wt: np.ndarray, stride: int, out_sp) -> np.ndarray:
    """Channels-last correlation: big [B,X,Y,Z,C], wt [k,k,k,C,O] -> [B,X',Y',Z',O]."""
    k = wt.shape[0]
    out = np.zeros((big.shape[0],) + tuple(out_sp) + (wt.shape[-1],), dtype=big.dtype)
    for i in range(k):
        si = _window(out_sp[0], i, stride)
        for j in range(k):
            sj = _window(out_sp[1], j, stride)
            for l in range(k):
                out += big[:, si, sj, _window(out_sp[2], l, stride)] @ wt[i, j, l]
    return out


def _scatter(small: np.ndarray, wt: np.ndarray, stride: int, big_sp) -> np.ndarray:
    """Adjoint of :func:`_gather`: small [B,X',Y',Z',O] -> [B,X,Y,Z,C]."""
    k = wt.shape[0]
    out_sp = small.shape[1:4]
    big = np.zeros((small.shape[0],) + tuple(big_sp) + (wt.shape[-2],), dtype=small.dtype)
    for i in range(k):
        si = _window(out_sp[0], i, stride)
        for j in range(k):
            sj = _window(out_sp[1], j, stride)
            for l in range(k):
                big[:, si, sj, _window(out_sp[2], l, stride)] += small @ wt[i, j, l].T
    return big


def _weight_grad(big: np.ndarray, small: np.ndarray, k: int, stride: int) -> np.ndarray:
    """d/dW of the gather; big [B,X,Y,Z,C], small [B,X',Y',Z',O] -> [O,C,k,k,k]."""
    out_sp = small.shape[1:4]
    o, c = small.shape[-1], big.shape[-1]
    s2 = small.reshape(-1, o)
    gw = np.empty((o, c, k, k, k), dtype=small.dtype)
    for i in range(k):
        si = _window(out_sp[0], i, stride)
        for j in range(k):
            sj = _window(out_sp[1], j, stride)
            for l in range(k):
                b2 = big[:, si, sj, _window(out_sp[2], l, stride)].reshape(-1, c)
                gw[:, :, i, j, l] = s2.T @ b2
    return gw


def _check_volume(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected [B,C,W,H,D] input, got {x.ndim}-d shape {x.shape}")


def _check_kernel(weight: Tensor, what: str) -> int:
    if weight.ndim != 5 or not (weight.shape[2] == weight.shape[3] == weight.shape[4]):
        raise ShapeError(f"{what}: weight must be [*, *, k, k, k], got {weight.shape}")
    return weight.shape[2]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with a cubic kernel; weight is [Cout, Cin, k, k, k]."""
    _check_volume(x, "conv3d")
    k = _check_kernel(weight, "conv3d")
    if stride < 1:
        raise ValueError("conv3d: stride must be >= 1")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input channel dimension is {x.shape[1]} but weight "
                         f"expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
    names = "WHD"
    for ax in range(3):
        if x.shape[2 + ax] + 2 * padding < k:
            raise ShapeError(f"conv3d: spatial dimension {names[ax]} ({x.shape[2 + ax]}) "
                             f"with padding {padding} is smaller than kernel {k}")
    p = padding
    big = np.moveaxis(x.data, 1, -1)
    if p:
        big = np.pad(big, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    big = np.ascontiguousarray(big)
    big_sp = big.shape[1:4]
    out_sp = tuple((n - k) // stride + 1 for n in big_sp)
    wt = np.ascontiguousarray(np.transpose(weight.data, (2, 3, 4, 1, 0)))
    out = _gather(big, wt, stride, out_sp)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(g):
        small = np.ascontiguousarray(np.moveaxis(g, 1, -1))
        gbig = _scatter(small, wt, stride, big_sp)
        if p:
            gbig = gbig[:, p:-p, p:-p, p:-p]
        gx = np.ascontiguousarray(np.moveaxis(gbig, -1, 1))
        gw = _weight_grad(big, small, k, stride)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = [x, weight] + ([bias] if bias is not None else [])
    return Tensor._make(out, parents, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Transposed convolution; weight is [Cin, Cout, k, k, k] (the adjoint of conv3d's)."""
    _check_volume(x, "conv_transpose3d")
    k = _check_kernel(weight, "conv_transpose3d")
    if stride < 1:
        raise ValueError("conv_transpose3d: stride must be >= 1")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose3d: input channel dimension is {x.shape[1]} but "
                         f"weight expects {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose3d: bias shape {bias.shape} != ({weight.shape[1]},)")
    small = np.ascontiguousarray(np.moveaxis(x.data, 1, -1))
    in_sp = small.shape[1:4]
    out_sp = tuple((n - 1) * stride + k for n in in_sp)
    wt = np.ascontiguousarray(np.transpose(weight.data, (2, 3, 4, 1, 0)))
    out = _scatter(small, wt, stride, out_sp)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(g):
        big = np.ascontiguousarray(np.moveaxis(g, 1, -1))
        gx = np.ascontiguousarray(np.moveaxis(_gather(big, wt, stride, in_sp), -1, 1))
        gw = _weight_grad(big, small, k, stride)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = [x, weight] + ([bias] if bias is not None else [])
    return Tensor._make(out, parents, backward)


def maxpool3d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the lowest linear index."""
    _check_volume(x, "maxpool3d")
    b, c, w, h, d = x.shape
    for name, n in zip("WHD", (w, h, d)):
        if n % k:
            raise ShapeError(f"maxpool3d: extent {name}={n} is not divisible by {k}")
    blocks = x.data.reshape(b, c, w // k, k, h // k, k, d // k, k)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, w // k, h // k, d // k, k ** 3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, w // k, h // k, d // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return Tensor._make(np.ascontiguousarray(out), [x], backward)
