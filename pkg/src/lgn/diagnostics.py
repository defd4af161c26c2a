"""Finite-difference checks: every core op, and the full training loss on a tiny model."""

from __future__ import annotations

import numpy as np

from .grad import Tensor, grad_check, ops
from .model import LGNModel, ModelConfig
from .moments import MomentSpan, iou_field, valid_mask
from .text import Vocabulary, pad_batch
from .training import LabelConfig, label_field, masked_bce

TINY = dict(N=4, d_v=6, d_w=4, d_h=8, d_s=5, n_early=2, n_conv=2, n_late=2, max_query_len=3)


def tiny_problem(seed: int, **overrides):
    """A two-query batch at toy widths: (model, cells, ids, lengths, labels)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**{**TINY, "seed": seed, **overrides})
    vocab = Vocabulary.build([["red", "ball", "rolls"], ["blue", "cup", "falls"]])
    model = LGNModel(cfg, vocab)
    n = cfg.N
    cells = np.where(valid_mask(n), 1.0, 0.0) * rng.normal(size=(2, cfg.d_v, n, n))
    ids, lengths = pad_batch([model.encode_query(["red", "ball", "rolls"]), model.encode_query(["blue", "cup", "falls"])])
    spans = [MomentSpan(0.0, 2.0), MomentSpan(1.0, 4.0)]
    labels = np.stack([label_field(iou_field(n, s, 4.0), valid_mask(n), LabelConfig()) for s in spans])
    return model, cells, ids, lengths, labels


def loss_fn(model: LGNModel, cells, ids, lengths, labels, dropout_seed: int | None = None):
    """Scalar loss as a function of every parameter, for :func:`grad_check`.

    With ``dropout_seed`` the forward runs in training mode with a generator
    reseeded on every call, so repeated evaluations agree.
    """
    valid = valid_mask(model.config.N)

    def f(*_params):
        training = dropout_seed is not None
        rng = np.random.default_rng(dropout_seed) if training else None
        p = model.forward_maps(cells, ids, lengths, training=training, rng=rng)
        return masked_bce(p, labels, valid)

    return f


def full_loss_gradcheck(seed: int, eps: float = 1e-5, dropout: bool = False, **overrides) -> float:
    """Max relative gradient error of the tiny model's loss over all parameters.

    Dropout is off by default: a cell whose channels are all dropped feeds a
    zero vector to the fusion normalization, which is not differentiable there.
    """
    model, cells, ids, lengths, labels = tiny_problem(seed, **overrides)
    f = loss_fn(model, cells, ids, lengths, labels, dropout_seed=seed if dropout else None)
    return grad_check(f, list(model.params.trainable()), eps=eps)


# ---------------------------------------------------------------- per-op checks


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def contract(y: Tensor, seed: int = 99) -> Tensor:
    """Scalar ``sum(y * R)`` with a fixed random cotangent R."""
    r = np.random.default_rng(seed).normal(size=y.shape)
    return ops.sum(ops.hadamard(y, _t(r)))


def op_cases(rng: np.random.Generator):
    """(name, f, inputs) for every differentiable op, shapes within 4x4x8x8."""
    n = rng.normal
    keep = np.triu(np.ones((6, 6), dtype=bool))
    yield "matmul", lambda a, b: contract(ops.matmul(a, b)), [_t(n(size=(3, 4))), _t(n(size=(4, 2)))]
    yield "linear", lambda x, w, b: contract(ops.linear(x, w, b)), [_t(n(size=(3, 4))), _t(n(size=(5, 4))), _t(n(size=5))]
    yield "add", lambda x, y: contract(ops.add(x, y)), [_t(n(size=(3, 4))), _t(n(size=(3, 4)))]
    yield "sub_over", lambda x, y: contract(ops.sub(x, y, over=(0, 2))), [_t(n(size=(2, 3, 4))), _t(n(size=3))]
    yield "hadamard", lambda x, y: contract(ops.hadamard(x, y)), [_t(n(size=(4, 4))), _t(n(size=(4, 4)))]
    yield "hadamard_over", lambda x, y: contract(ops.hadamard(x, y, over=(1, 2))), [_t(n(size=(2, 5, 5, 3))), _t(n(size=(2, 3)))]
    yield "scale", lambda x: contract(ops.scale(x, -2.5)), [_t(n(size=(3, 3)))]
    yield "sigmoid", lambda x: contract(ops.sigmoid(x)), [_t(n(size=(4, 4)) * 3)]
    yield "tanh", lambda x: contract(ops.tanh(x)), [_t(n(size=(4, 4)))]
    yield "relu", lambda x: contract(ops.relu(x)), [_t(n(size=(4, 4)))]
    yield "clamp", lambda x: contract(ops.clamp(x, -1.0, 1.0)), [_t(n(size=(4, 4)))]
    yield "mean", lambda x: ops.mean(ops.hadamard(x, x)), [_t(n(size=(4, 4)))]
    yield "reshape", lambda x: contract(ops.reshape(x, (2, 8))), [_t(n(size=(4, 4)))]
    yield "transpose", lambda x: contract(ops.transpose(x, (2, 0, 1))), [_t(n(size=(2, 3, 4)))]
    yield "concat", lambda x, y: contract(ops.concat([x, y], axis=0)), [_t(n(size=(2, 3))), _t(n(size=(1, 3)))]
    cond = n(size=(3, 3)) > 0
    yield "where", lambda a, b: contract(ops.where(cond, a, b)), [_t(n(size=(3, 3))), _t(n(size=(3, 3)))]
    yield "mask", lambda x: contract(ops.mask(x, keep)), [_t(n(size=(2, 6, 6)))]
    ids = np.array([[2, 3, 0], [1, 2, 2]])
    yield "embedding", lambda t: contract(ops.embedding(ids, t, pad_id=None)), [_t(n(size=(4, 3)))]
    yield "l2_joint", lambda x: contract(ops.l2_normalize(x, axis=-1)), [_t(n(size=(3, 4, 5)))]
    yield "l2_multi", lambda x: contract(ops.l2_normalize(x, axis=(1, 2))), [_t(n(size=(2, 4, 4, 3)))]
    yield "conv2d_3x3", lambda x, w, b: contract(ops.conv2d(x, w, b)), [
        _t(n(size=(2, 3, 5, 5))), _t(n(size=(4, 3, 3, 3))), _t(n(size=4))]
    yield "conv2d_1x1", lambda x, w, b: contract(ops.conv2d(x, w, b)), [
        _t(n(size=(3, 4, 4))), _t(n(size=(2, 3, 1, 1))), _t(n(size=2))]
    yield "conv2d_nhwc_masked", lambda x, w, b: contract(ops.conv2d(x, w, b, channels_last=True, out_mask=keep)), [
        _t(n(size=(2, 6, 6, 3))), _t(n(size=(4, 3, 3, 3))), _t(n(size=4))]
    yield "conv2d_nhwc_1x1_masked", lambda x, w, b: contract(ops.conv2d(x, w, b, channels_last=True, out_mask=keep)), [
        _t(n(size=(6, 6, 3))), _t(n(size=(4, 3, 1, 1))), _t(n(size=4))]
    yield "dropout", lambda x: contract(ops.dropout(x, 0.5, True, np.random.default_rng(7))), [_t(n(size=(4, 8)))]


def op_gradcheck(seed: int, eps: float = 1e-6) -> dict:
    """Max relative gradient error per op on inputs drawn from ``seed``."""
    return {name: grad_check(f, xs, eps=eps) for name, f, xs in op_cases(np.random.default_rng(seed))}
