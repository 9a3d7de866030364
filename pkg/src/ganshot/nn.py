"""Declarative sequential networks, parameter sets and the Adam optimizer."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import ContractError, DimensionError, Tensor

LAYER_KINDS = ("conv", "conv_transpose", "batchnorm", "activation", "maxpool", "flatten", "dense")
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class SpecError(ValueError):
    """A ModelSpec whose layer shapes do not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = True
    fn: str = ""
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")

    def describe(self) -> str:
        if self.kind in ("conv", "conv_transpose"):
            return f"{self.kind}(out={self.out_channels}, k={self.kernel}, s={self.stride}, p={self.pad})"
        if self.kind == "activation":
            return f"activation({self.fn})"
        if self.kind == "maxpool":
            return f"maxpool(k={self.kernel}, s={self.stride})"
        if self.kind == "dense":
            return f"dense(out={self.out_channels})"
        return self.kind


def conv(out_channels: int, kernel: int, stride: int = 1, pad: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv", out_channels, kernel, stride, pad, bias)


def conv_transpose(out_channels: int, kernel: int, stride: int = 1, pad: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv_transpose", out_channels, kernel, stride, pad, bias)


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def act(fn: str, negative_slope: float = 0.01) -> LayerSpec:
    return LayerSpec("activation", fn=fn, negative_slope=negative_slope)


def maxpool(kernel: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=kernel if stride is None else stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(out_features: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", out_channels=out_features, bias=bias)


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layers applied to inputs of per-sample shape ``input_shape``."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        propagate_shapes(self)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return propagate_shapes(self)[-1]


def _layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("conv", "conv_transpose", "batchnorm", "maxpool") and len(shape) != 3:
        raise SpecError(f"expects a (C, H, W) input, got {shape}")
    if kind == "conv":
        c, h, w = shape
        if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1:
            raise SpecError("needs positive out_channels, kernel and stride")
        if h + 2 * layer.pad < layer.kernel or w + 2 * layer.pad < layer.kernel:
            raise SpecError(f"kernel {layer.kernel} does not fit input {shape} with pad {layer.pad}")
        return (layer.out_channels,
                tc.conv_output_size(h, layer.kernel, layer.stride, layer.pad),
                tc.conv_output_size(w, layer.kernel, layer.stride, layer.pad))
    if kind == "conv_transpose":
        c, h, w = shape
        oh = tc.deconv_output_size(h, layer.kernel, layer.stride, layer.pad)
        ow = tc.deconv_output_size(w, layer.kernel, layer.stride, layer.pad)
        if oh <= 0 or ow <= 0 or layer.out_channels < 1:
            raise SpecError(f"non-positive output from input {shape}")
        return (layer.out_channels, oh, ow)
    if kind in ("batchnorm", "activation"):
        if kind == "activation" and layer.fn not in ("sigmoid", "tanh", "leaky_relu", "relu"):
            raise SpecError(f"unknown activation {layer.fn!r}")
        return shape
    if kind == "maxpool":
        c, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise SpecError(f"pool kernel {layer.kernel} larger than input {shape}")
        return (c, (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise SpecError(f"expects a flat input, got {shape}")
        return (layer.out_channels,)
    raise SpecError(f"unknown layer kind {kind!r}")


def propagate_shapes(spec: ModelSpec, input_shape: Sequence[int] | None = None) -> list[tuple[int, ...]]:
    """Per-sample shapes: the input shape followed by each layer's output shape."""
    shape = tuple(spec.input_shape if input_shape is None else input_shape)
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        try:
            shape = _layer_output_shape(layer, shape)
        except SpecError as exc:
            raise SpecError(f"layer {i} ({layer.describe()}): {exc}") from None
        shapes.append(shape)
    return shapes


# -- parameters -----------------------------------------------------------

def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ParamSet:
    """Named tensors for one model, with a per-entry frozen flag.

    Running statistics are buffers: never differentiated, never touched by the
    optimizer, and only updated by train-mode forward passes on unfrozen sets.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self.tensors: dict[str, Tensor] = {}
        self.frozen: dict[str, bool] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = not is_buffer(name)
        t.name = name
        self.tensors[name] = t
        self.frozen[name] = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if not is_buffer(n) and not self.frozen[n]]

    @property
    def is_frozen(self) -> bool:
        return all(self.frozen.values()) if self.frozen else False

    def set_frozen(self, frozen: bool, names: Sequence[str] | None = None) -> None:
        for name in self.tensors if names is None else names:
            self.frozen[name] = frozen
            if not is_buffer(name):
                self.tensors[name].requires_grad = not frozen

    @contextmanager
    def frozen_scope(self):
        """Freeze every entry for the duration of the block, then restore the flags."""
        previous = dict(self.frozen)
        self.set_frozen(True)
        try:
            yield self
        finally:
            for name, flag in previous.items():
                self.set_frozen(flag, [name])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        return cls({name: Tensor(np.array(a, dtype=np.float32)) for name, a in arrays.items()})


def init_params(spec: ModelSpec, seed: int | np.random.Generator, prefix: str = "") -> ParamSet:
    """Weights ~ Normal(0, 0.02), biases 0, batchnorm scale 1 / shift 0."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = propagate_shapes(spec)
    params = ParamSet()

    def normal(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

    def zeros(n):
        return Tensor(np.zeros(n, dtype=np.float32))

    for i, (layer, in_shape) in enumerate(zip(spec.layers, shapes)):
        key = f"{prefix}{i}"
        if layer.kind == "conv":
            params.add(f"{key}.weight", normal((layer.out_channels, in_shape[0], layer.kernel, layer.kernel)))
        elif layer.kind == "conv_transpose":
            params.add(f"{key}.weight", normal((in_shape[0], layer.out_channels, layer.kernel, layer.kernel)))
        elif layer.kind == "dense":
            params.add(f"{key}.weight", normal((in_shape[0], layer.out_channels)))
        elif layer.kind == "batchnorm":
            c = in_shape[0]
            params.add(f"{key}.weight", Tensor(np.ones(c, dtype=np.float32)))
            params.add(f"{key}.bias", zeros(c))
            params.add(f"{key}.running_mean", zeros(c))
            params.add(f"{key}.running_var", Tensor(np.ones(c, dtype=np.float32)))
            continue
        else:
            continue
        if layer.bias:
            params.add(f"{key}.bias", zeros(layer.out_channels))
    return params


def forward(spec: ModelSpec, params: ParamSet, x: Tensor, mode: str = "train", prefix: str = "",
            return_all: bool = False):
    """Run ``x`` through the layers of ``spec``.

    In train mode batchnorm uses batch statistics and, unless ``params`` is
    frozen, writes refreshed running statistics back into ``params``.
    With ``return_all`` the per-layer outputs are returned as a list.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match model input (N, {spec.input_shape})")
    outputs = []
    for i, layer in enumerate(spec.layers):
        key = f"{prefix}{i}"
        bias = params[f"{key}.bias"] if layer.bias and f"{key}.bias" in params else None
        if layer.kind == "conv":
            x = tc.conv2d(x, params[f"{key}.weight"], bias, stride=layer.stride, pad=layer.pad)
        elif layer.kind == "conv_transpose":
            x = tc.conv_transpose2d(x, params[f"{key}.weight"], bias, stride=layer.stride, pad=layer.pad)
        elif layer.kind == "dense":
            x = tc.matmul(x, params[f"{key}.weight"])
            if bias is not None:
                x = x + bias
        elif layer.kind == "batchnorm":
            mean_name, var_name = f"{key}.running_mean", f"{key}.running_var"
            x, new_mean, new_var = tc.batchnorm2d(
                x, params[f"{key}.weight"], params[f"{key}.bias"],
                params[mean_name].data, params[var_name].data, training=(mode == "train"),
            )
            if mode == "train" and not params.frozen[mean_name]:
                params[mean_name].data = new_mean
                params[var_name].data = new_var
        elif layer.kind == "activation":
            x = tc.activation(x, layer.fn, layer.negative_slope)
        elif layer.kind == "maxpool":
            x = tc.maxpool2d(x, layer.kernel, layer.stride)
        elif layer.kind == "flatten":
            x = tc.flatten(x)
        outputs.append(x)
    return outputs if return_all else x


# -- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: dict[Tensor, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update of every unfrozen, non-buffer entry.

    Parameter tensors get fresh arrays rather than in-place writes, so earlier
    snapshots taken by reference stay valid.
    """
    names = params.trainable()
    missing = [n for n in names if params[n] not in grads]
    if missing:
        raise ContractError(f"no gradient for unfrozen parameters: {', '.join(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in names:
        p = params[name]
        g = grads[p].astype(np.float32, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(np.float32)
        v = (b2 * v + (1 - b2) * g * g).astype(np.float32)
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)
    return state
