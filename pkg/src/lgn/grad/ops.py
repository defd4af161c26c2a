"""Differentiable operations over :class:`~lgn.grad.tensor.Tensor`.

Each op computes its value with numpy and records an adjoint closure on the
active tape. Binary elementwise ops take identical shapes, or an explicit
``over=`` tuple naming the axes of ``x`` that a lower-rank ``y`` is broadcast
along (e.g. a per-channel vector ``[B, C]`` over the spatial axes ``(2, 3)`` of
a ``[B, C, H, W]`` map). No other broadcasting is performed.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from . import kernels
from .tensor import Tensor, record


def _norm_axes(over, ndim: int) -> tuple:
    axes = (over,) if isinstance(over, int) else tuple(over)
    out = tuple(sorted(a % ndim for a in axes))
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated broadcast axes {over}")
    return out


def _broadcast_view(x: Tensor, y: Tensor, over, name: str):
    """Return (y data reshaped for numpy broadcasting, normalized axes)."""
    if over is None:
        if x.shape != y.shape:
            raise DimensionError(f"{name}: shapes {x.shape} and {y.shape} differ and no broadcast declared")
        return y.data, None
    axes = _norm_axes(over, x.ndim)
    kept = tuple(s for i, s in enumerate(x.shape) if i not in axes)
    if y.shape != kept:
        raise DimensionError(f"{name}: {y.shape} cannot broadcast over axes {axes} of {x.shape}")
    view = list(x.shape)
    for a in axes:
        view[a] = 1
    return y.data.reshape(view), axes


def _reduce(g: np.ndarray, axes, shape) -> np.ndarray:
    if axes is None:
        return g
    return g.sum(axis=axes).reshape(shape)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def adjoint(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return record(A @ B, (a, b), adjoint, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` [M, in], ``weight`` [out, in], ``bias`` [out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    X, Wt = x.data, weight.data
    out = X @ Wt.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def adjoint(g):
        gx = g @ Wt if x.requires_grad else None
        gw = g.T @ X if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record(out, inputs, adjoint, "linear")


# ---------------------------------------------------------------- elementwise


def add(x: Tensor, y: Tensor, over=None) -> Tensor:
    Y, axes = _broadcast_view(x, y, over, "add")
    return record(x.data + Y, (x, y), lambda g: (g, _reduce(g, axes, y.shape)), "add")


def sub(x: Tensor, y: Tensor, over=None) -> Tensor:
    Y, axes = _broadcast_view(x, y, over, "sub")
    return record(x.data - Y, (x, y), lambda g: (g, -_reduce(g, axes, y.shape)), "sub")


def hadamard(x: Tensor, y: Tensor, over=None) -> Tensor:
    """Elementwise (Schur) product."""
    Y, axes = _broadcast_view(x, y, over, "hadamard")
    X = x.data

    def adjoint(g):
        gx = g * Y if x.requires_grad else None
        gy = _reduce(g * X, axes, y.shape) if y.requires_grad else None
        return gx, gy

    return record(X * Y, (x, y), adjoint, "hadamard")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    with np.errstate(under="ignore"):
        e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),), "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scale": scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------- structural


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record(np.array(x.data.sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}: {exc}") from None
    return record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else from ``b``."""
    if a.shape != b.shape:
        raise DimensionError(f"where: {a.shape} vs {b.shape}")
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)

    def adjoint(g):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)

    return record(np.where(cond, a.data, b.data), (a, b), adjoint, "where")


def mask(x: Tensor, valid: np.ndarray) -> Tensor:
    """Zero every position where ``valid`` (numpy-broadcast against ``x``) is False.

    Masked positions become +0.0 exactly.
    """
    valid = np.asarray(valid, dtype=bool)
    try:
        shape = np.broadcast_shapes(valid.shape, x.shape)
    except ValueError:
        shape = None
    if shape != x.shape:
        raise DimensionError(f"mask: {valid.shape} does not broadcast to {x.shape}")
    return record(np.where(valid, x.data, 0.0), (x,), lambda g: (np.where(valid, g, 0.0),), "mask")


def embedding(ids: np.ndarray, table: Tensor, pad_id: int | None = 0) -> Tensor:
    """Row lookup ``table[ids]``. The pad row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: id out of range for table with {table.shape[0]} rows")
    rows = table.shape

    def adjoint(g):
        gt = np.zeros(rows)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, rows[1]))
        if pad_id is not None:
            gt[pad_id] = 0.0
        return (gt,)

    return record(table.data[ids], (table,), adjoint, "embedding")


# ---------------------------------------------------------------- normalization


def l2_normalize(x: Tensor, axis=-1, eps: float = 1e-12) -> Tensor:
    """Divide each group along ``axis`` by ``max(||group||_2, eps)``."""
    if not eps > 0:
        raise ConfigError(f"l2_normalize needs eps > 0, got {eps}")
    axes = _norm_axes(axis, x.ndim)
    X = x.data
    norm = np.sqrt(np.sum(X * X, axis=axes, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    y = X / denom

    def adjoint(g):
        proj = np.sum(g * y, axis=axes, keepdims=True)
        return (np.where(small, g / eps, (g - y * proj) / denom),)

    return record(y, (x,), adjoint, "l2_normalize")


# ---------------------------------------------------------------- convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    channels_last: bool = False,
    out_mask: np.ndarray | None = None,
) -> Tensor:
    """Same-padded 2-D cross-correlation.

    ``x`` is [C_in, H, W] or [B, C_in, H, W] ([H, W, C_in] or [B, H, W, C_in]
    with ``channels_last``); ``weight`` is [C_out, C_in, k, k] with odd ``k``
    either way; ``bias`` is [C_out].

    ``out_mask`` (channels-last only) is a boolean [H, W] grid: outputs are
    computed only where it is True and are exactly 0 elsewhere.
    """
    X = x.data
    squeeze = X.ndim == 3
    if squeeze:
        X = X[None]
    if X.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernels {weight.shape}")
    if channels_last:
        b, h, w, c = X.shape
    else:
        b, c, h, w = X.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels {weight.shape} expect {ci}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if h < 1 or w < 1:
        raise DimensionError(f"conv2d: empty spatial extent {h}x{w}")
    if out_mask is not None:
        if not channels_last:
            raise ConfigError("conv2d: out_mask needs channels_last=True")
        out_mask = np.asarray(out_mask, dtype=bool)
        if out_mask.shape != (h, w):
            raise DimensionError(f"conv2d: out_mask {out_mask.shape} does not match spatial extent {(h, w)}")
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if channels_last:
        return _conv2d_nhwc(x, X, weight, bias, inputs, squeeze, k, out_mask)

    wmat = weight.data.reshape(o, c * k * k)
    if k == 1:
        cols = X.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        cols = kernels.im2col(X, k).reshape(-1, c * k * k)
    flat = cols @ wmat.T
    if bias is not None:
        flat += bias.data
    out = np.ascontiguousarray(flat.reshape(b, h, w, o).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def adjoint(g):
        G = (g[None] if squeeze else g).transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if x.requires_grad:
            gcols = G @ wmat
            if k == 1:
                gx = np.ascontiguousarray(gcols.reshape(b, h, w, c).transpose(0, 3, 1, 2))
            else:
                gx = kernels.col2im(gcols.reshape(b, h, w, c * k * k), c, k)
            if squeeze:
                gx = gx[0]
        gw = (G.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, G.sum(axis=0)

    return record(out, inputs, adjoint, "conv2d")


def _conv2d_nhwc(x, X, weight, bias, inputs, squeeze, k, out_mask):
    b, h, w, c = X.shape
    o = weight.shape[0]
    full = out_mask is None or out_mask.all()
    pos = kernels.grid_positions(h, w, None if full else out_mask)
    npos = len(pos)
    # patch order (i, j, c) to match im2col_nhwc
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    if k == 1:
        cols = X.reshape(-1, c) if full else X[:, pos[:, 0], pos[:, 1]].reshape(-1, c)
    else:
        cols = kernels.im2col_nhwc(X, k, pos).reshape(-1, k * k * c)
    flat = cols @ wmat.T
    if bias is not None:
        flat += bias.data
    if full:
        out = flat.reshape(b, h, w, o)
    else:
        out = np.zeros((b, h, w, o))
        out[:, pos[:, 0], pos[:, 1]] = flat.reshape(b, npos, o)
    if squeeze:
        out = out[0]

    def adjoint(g):
        g4 = g[None] if squeeze else g
        G = g4.reshape(-1, o) if full else g4[:, pos[:, 0], pos[:, 1]].reshape(-1, o)
        gx = None
        if x.requires_grad:
            gcols = G @ wmat
            if k > 1:
                gx = kernels.col2im_nhwc(gcols.reshape(b, npos, -1), pos, h, w, c, k)
            elif full:
                gx = gcols.reshape(b, h, w, c)
            else:
                gx = np.zeros((b, h, w, c))
                gx[:, pos[:, 0], pos[:, 1]] = gcols.reshape(b, npos, c)
            if squeeze:
                gx = gx[0]
        gw = None
        if weight.requires_grad:
            gw = (G.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, G.sum(axis=0)

    return record(out, inputs, adjoint, "conv2d")


# ---------------------------------------------------------------- regularization


def dropout(x: Tensor, drop_probability: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so evaluation is the identity."""
    p = float(drop_probability)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= p
    factor = 1.0 / (1.0 - p)
    return record(np.where(keep, x.data * factor, 0.0), (x,), lambda g: (np.where(keep, g * factor, 0.0),), "dropout")
