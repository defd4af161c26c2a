"""Central finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DeterminismError, ShapeError
from .tensor import Tape, Tensor


def _value(f: Callable, xs: Sequence[Tensor]) -> float:
    out = f(*xs)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(f: Callable, x, eps: float = 1e-3, detail: bool = False, floor: float = 1e-6):
    """Compare the tape gradient of scalar ``f(*xs)`` with central differences.

    ``x`` is one tensor or a sequence of tensors; ``f`` receives them as
    positional arguments. Returns the max over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``, or with
    ``detail=True`` a dict that also carries both gradients. ``floor`` keeps
    coordinates below float64 finite-difference resolution from dominating.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)

    first = _value(f, xs)
    if _value(f, xs) != first:
        raise DeterminismError("function returned different values for identical inputs; seed its randomness")

    saved = [(t.requires_grad, t.grad) for t in xs]
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            out = f(*xs)
        if out._tape is tape:
            tape.backward(out)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g

    numeric = []
    for t in xs:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _value(f, xs)
            flat[i] = orig - eps
            fm = _value(f, xs)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
        numeric.append(num)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    if detail:
        return {"max_rel_error": worst, "analytic": analytic, "numeric": numeric}
    return worst
