"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, fresh_tape, no_grad

__all__ = ["finite_diff_gradcheck", "gradcheck_many"]


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
) -> float:
    """Compare the tape gradient of scalar-valued ``f`` at ``x`` against
    central differences, one coordinate at a time.

    Returns the maximum relative error, with the denominator floored at
    max(|analytic|, |numeric|, 1e-8) per coordinate. ``f`` must be a
    pure function of ``x.data``; ``x`` is restored before returning.
    """
    if not x.requires_grad:
        raise ValueError("gradcheck input must require a gradient")
    with fresh_tape():
        x.zero_grad()
        out = f(x)
        backward(out)
        analytic = (
            x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
        ).reshape(-1)
        x.zero_grad()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            above = f(x).item()
            flat[i] = saved - h
            below = f(x).item()
            flat[i] = saved
            numeric[i] = (above - below) / (2.0 * h)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale)) if flat.size else 0.0


def gradcheck_many(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative gradient error of ``f`` over several input tensors.

    ``f`` takes no arguments and closes over every tensor in
    ``tensors`` (model parameters, typically).
    """
    worst = 0.0
    for t in tensors:
        worst = max(worst, finite_diff_gradcheck(lambda _: f(), t, h=h))
    return worst
