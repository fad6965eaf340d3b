"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonScalarOutput
from .tensor import Tensor


def _scalar(y: Tensor) -> float:
    if y.size != 1:
        raise NonScalarOutput(f"gradient check needs a scalar output, got {y.shape}")
    return float(y.data.reshape(-1)[0])


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``f`` recomputes the scalar output from the current values of ``params``.
    Per coordinate the error is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for p in params:
        p.grad = None
    y = f()
    _scalar(y)
    y.backward()
    worst = 0.0
    for p in params:
        g_ad = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        g_ad = g_ad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = _scalar(f())
            flat[k] = orig - h
            down = _scalar(f())
            flat[k] = orig
            g_fd = (up - down) / (2.0 * h)
            err = abs(g_ad[k] - g_fd) / max(1.0, abs(g_ad[k]), abs(g_fd))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Single-input form: ``f(x)`` must return a scalar Tensor."""
    if not x.requires_grad:
        x.requires_grad = True
    return grad_check_params(lambda: f(x), [x], h)
