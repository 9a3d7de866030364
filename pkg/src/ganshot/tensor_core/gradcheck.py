"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], h: float = 1e-3) -> dict[int, float]:
    """Compare analytic gradients of scalar ``f(*inputs)`` against central differences.

    Everything is evaluated in float64. Returns ``{input index: max relative
    error}`` where the error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    Inputs with ``requires_grad=False`` are treated as frozen and left out.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    points = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=t.requires_grad) for t in inputs]

    loss = f(*points)
    analytic = backward(loss)

    def evaluate(values: list[np.ndarray]) -> float:
        return float(f(*[Tensor(v) for v in values]).data)

    base = [p.data.copy() for p in points]
    errors: dict[int, float] = {}
    for idx, point in enumerate(points):
        if not point.requires_grad:
            continue
        grad = analytic.get(point, np.zeros_like(point.data))
        worst = 0.0
        flat = base[idx].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + h
            up = evaluate(base)
            flat[k] = original - h
            down = evaluate(base)
            flat[k] = original
            numeric = (up - down) / (2 * h)
            err = abs(grad.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors[idx] = worst
    return errors
