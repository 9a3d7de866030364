"""Activations and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, _lift, make_node

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class ActivationConfig:
    negative_slope: float = 0.01
    # Tensors are immutable here, so inplace is accepted but never acted on.
    inplace: bool = False

    def __post_init__(self):
        if self.negative_slope < 0:
            raise ValueError(f"negative_slope must be >= 0, got {self.negative_slope}")


def leaky_relu(x: Tensor, cfg: ActivationConfig | float = ActivationConfig()) -> Tensor:
    """f(x) = max(0, x) + slope * min(0, x)."""
    slope = cfg.negative_slope if isinstance(cfg, ActivationConfig) else float(cfg)
    slope = x.dtype.type(slope)
    out = np.maximum(x.data, 0) + slope * np.minimum(x.data, 0)

    def back(g):
        return (np.where(x.data > 0, g, g * slope),)

    return make_node(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),))


def activation(x: Tensor, kind: str, negative_slope: float = 0.01) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, negative_slope)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), back)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber with unit transition: 0.5 x^2 if |x| < 1 else |x| - 0.5."""
    d = x.data
    small = np.abs(d) < 1
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).astype(d.dtype)
    return make_node(out, (x,), lambda g: (g * np.where(small, d, np.sign(d)),))


def bce_loss(o: Tensor, t, weights=None) -> Tensor:
    """Mean binary cross-entropy, optionally per-element weighted.

    ``o`` is clamped to [1e-7, 1 - 1e-7] before the log. The gradient is the
    derivative of the clamped expression passed straight through to ``o`` so
    saturated outputs still receive a learning signal.
    """
    t = _lift(t)
    if o.shape != t.shape:
        raise DimensionError(f"bce_loss: output shape {o.shape} != target shape {t.shape}")
    if t.data.size and (t.data.min() < 0 or t.data.max() > 1):
        raise ValueError("bce_loss: targets must lie in [0, 1]")
    if weights is None:
        w = np.ones_like(o.data)
    else:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=o.dtype)
        if w.size != o.size:
            raise DimensionError(f"bce_loss: weights size {w.size} != output size {o.size}")
        w = w.reshape(o.shape)
    n = o.size
    oc = np.clip(o.data, BCE_CLAMP, 1 - BCE_CLAMP)
    td = t.data.astype(o.dtype, copy=False)
    terms = td * np.log(oc) + (1 - td) * np.log(1 - oc)
    out = np.asarray(-(w * terms).sum() / n, dtype=o.dtype)

    def back(g):
        go = g * w * ((1 - td) / (1 - oc) - td / oc) / n if o.requires_grad else None
        gt = g * w * (np.log(1 - oc) - np.log(oc)) / n if t.requires_grad else None
        return go, gt

    return make_node(out, (o, t), back)
