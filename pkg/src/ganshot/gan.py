"""Adversarial networks: the noise-to-image DCGAN and the low-res to high-res enhancer.

Images handed to this module are in [0, 1]. Internally the discriminator sees
them mapped to [-1, 1], the generator's Tanh range; generator output is mapped
back with (v + 1) / 2 before any reconstruction loss or image write.

Two generator modes share one training loop:

* ``noise``: input is a (noise_dim, 1, 1) noise vector, expanded by stride-2
  transposed convolutions to a full image.
* ``conditional``: input is the nearest-upsampled low-res image (in [-1, 1])
  stacked with one noise channel, mapped by a fully convolutional body to the
  enhanced image at the same size. The loss adds ``recon_weight`` times a BCE
  reconstruction term against the high-res target.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data_io, nn
from . import tensor_core as tc
from .data_io import CheckpointError, EnhancerPair
from .tensor_core import DimensionError, Tensor
from .tensor_core.functional import BCE_CLAMP

log = logging.getLogger(__name__)

__all__ = [
    "GanConfig", "GanLossReport", "EnhancerPair", "Network", "Gan", "ProbeResult",
    "build_dcgan", "build_enhancer", "build_gan", "init_gan", "gan_value",
    "discriminator_step", "generator_step", "train_gan", "enhance",
    "extract_features", "linear_probe", "save_gan", "load_gan", "write_loss_csv",
]

MODES = ("noise", "conditional")
NOISE_KINDS = ("uniform", "gaussian")


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 100
    image_size: int = 32
    channels: int = 3
    base_feature_maps: int = 64
    epochs: int = 25
    batch_size: int = 72
    upscale_factor: int = 4
    mode: str = "noise"
    recon_weight: float = 10.0
    noise: str = "uniform"
    negative_slope: float = 0.01
    enhancer_layers: int = 2
    lr: float = 2e-4
    beta1: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise must be one of {NOISE_KINDS}, got {self.noise!r}")
        if self.upscale_factor not in (2, 4):
            raise ValueError(f"upscale_factor must be 2 or 4, got {self.upscale_factor}")
        for name in ("noise_dim", "channels", "base_feature_maps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.enhancer_layers < 0:
            raise ValueError("enhancer_layers must be >= 0")
        if self.negative_slope < 0:
            raise ValueError("negative_slope must be non-negative")

    @property
    def depth(self) -> int:
        """Number of stride-2 blocks between 4x4 and ``image_size``."""
        d = math.log2(self.image_size / 4) if self.image_size >= 8 else -1
        if d < 1 or d != int(d):
            raise nn.SpecError(
                f"image_size {self.image_size} must be 4 * 2^k with k >= 1 (8, 16, 32, 64, ...)")
        return int(d)

    @property
    def low_res_size(self) -> int:
        return self.image_size // self.upscale_factor

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class GanLossReport:
    d_loss: float
    g_loss: float
    value_v: float
    d_real_mean: float
    d_fake_mean: float
    adv_loss: float = math.nan    # adversarial part of g_loss
    recon_loss: float = math.nan  # unweighted reconstruction BCE (conditional mode)


LOSS_COLUMNS = ["epoch", "d_loss", "g_loss", "value_v", "d_real_mean", "d_fake_mean"]


# -- architecture -------------------------------------------------------------------

def _discriminator(cfg: GanConfig) -> nn.ModelSpec:
    b, slope = cfg.base_feature_maps, cfg.negative_slope
    layers = []
    for i in range(cfg.depth):
        layers.append(nn.conv(b * 2 ** i, 4, 2, 1, bias=i == 0))
        if i > 0:
            layers.append(nn.batchnorm())
        layers.append(nn.act("leaky_relu", slope))
    layers += [nn.conv(1, 4, 1, 0), nn.flatten(), nn.act("sigmoid")]
    return nn.ModelSpec((cfg.channels, cfg.image_size, cfg.image_size), tuple(layers))


def build_dcgan(cfg: GanConfig) -> tuple[nn.ModelSpec, nn.ModelSpec]:
    """Noise-mode generator and discriminator.

    Generator: (noise_dim, 1, 1) -> 4x4 -> ... -> image_size, channel count
    halving at each stride-2 transposed conv; Tanh output. Discriminator
    mirrors it with stride-2 convs and ends in a single sigmoid unit.
    """
    d, b, slope = cfg.depth, cfg.base_feature_maps, cfg.negative_slope
    top = b * 2 ** (d - 1)
    layers = [nn.conv_transpose(top, 4, 1, 0, bias=False), nn.batchnorm(), nn.act("leaky_relu", slope)]
    for i in range(d - 1):
        layers += [nn.conv_transpose(top // 2 ** (i + 1), 4, 2, 1, bias=False), nn.batchnorm(),
                   nn.act("leaky_relu", slope)]
    layers += [nn.conv_transpose(cfg.channels, 4, 2, 1), nn.act("tanh")]
    gen = nn.ModelSpec((cfg.noise_dim, 1, 1), tuple(layers))
    return gen, _discriminator(cfg)


def build_enhancer(cfg: GanConfig) -> tuple[nn.ModelSpec, nn.ModelSpec]:
    """Conditional-mode generator and discriminator.

    The generator is fully convolutional: stride-2 convs bring the upsampled
    input back down to low-res size (where all of its information lives),
    ``enhancer_layers`` 3x3 convs mix it there, and stride-2 transposed convs
    return to full size with a Tanh output.
    """
    if cfg.image_size % cfg.upscale_factor:
        raise nn.SpecError(f"image_size {cfg.image_size} not divisible by upscale_factor {cfg.upscale_factor}")
    b, slope = cfg.base_feature_maps, cfg.negative_slope
    steps = int(math.log2(cfg.upscale_factor))
    layers = [nn.conv(b, 4, 2, 1), nn.act("leaky_relu", slope)]
    for i in range(1, steps):
        layers += [nn.conv(b * 2 ** i, 4, 2, 1, bias=False), nn.batchnorm(), nn.act("leaky_relu", slope)]
    width = b * 2 ** (steps - 1)
    for _ in range(cfg.enhancer_layers):
        layers += [nn.conv(width, 3, 1, 1, bias=False), nn.batchnorm(), nn.act("leaky_relu", slope)]
    for i in reversed(range(steps - 1)):
        layers += [nn.conv_transpose(b * 2 ** i, 4, 2, 1, bias=False), nn.batchnorm(),
                   nn.act("leaky_relu", slope)]
    layers += [nn.conv_transpose(cfg.channels, 4, 2, 1), nn.act("tanh")]
    gen = nn.ModelSpec((cfg.channels + 1, cfg.image_size, cfg.image_size), tuple(layers))
    return gen, _discriminator(cfg)


def build_gan(cfg: GanConfig) -> tuple[nn.ModelSpec, nn.ModelSpec]:
    return build_enhancer(cfg) if cfg.mode == "conditional" else build_dcgan(cfg)


@dataclass
class Network:
    spec: nn.ModelSpec
    params: nn.ParamSet

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return nn.forward(self.spec, self.params, x, mode=mode)


@dataclass
class Gan:
    cfg: GanConfig
    generator: Network
    discriminator: Network
    g_opt: nn.AdamState
    d_opt: nn.AdamState
    epochs_trained: int = 0


def init_gan(cfg: GanConfig, seed: int | np.random.Generator) -> Gan:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g_spec, d_spec = build_gan(cfg)
    return Gan(
        cfg,
        Network(g_spec, nn.init_params(g_spec, rng)),
        Network(d_spec, nn.init_params(d_spec, rng)),
        nn.AdamState(lr=cfg.lr, beta1=cfg.beta1),
        nn.AdamState(lr=cfg.lr, beta1=cfg.beta1),
    )


# -- inputs ---------------------------------------------------------------------------

def to_signed(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def to_unit(values: np.ndarray) -> np.ndarray:
    return ((np.asarray(values, dtype=np.float32) + 1.0) / 2.0).astype(np.float32)


def sample_noise(cfg: GanConfig, rng: np.random.Generator, shape) -> np.ndarray:
    if cfg.noise == "uniform":
        return rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
    return rng.standard_normal(size=shape).astype(np.float32)


def generator_input(cfg: GanConfig, rng: np.random.Generator, n: int,
                    low_res: np.ndarray | None = None) -> np.ndarray:
    """Noise vectors, or upsampled low-res images (in [-1, 1]) plus one noise channel."""
    if cfg.mode == "noise":
        return sample_noise(cfg, rng, (n, cfg.noise_dim, 1, 1))
    if low_res is None:
        raise ValueError("conditional generator input needs low-res images")
    low_res = np.asarray(low_res, dtype=np.float32)
    expected = (cfg.channels, cfg.low_res_size, cfg.low_res_size)
    if low_res.shape[1:] != expected:
        raise DimensionError(f"low-res batch must be (N, {expected}), got {low_res.shape}")
    f = cfg.upscale_factor
    up = to_signed(low_res.repeat(f, axis=2).repeat(f, axis=3))
    return np.concatenate([up, sample_noise(cfg, rng, (len(up), 1, cfg.image_size, cfg.image_size))], axis=1)


# -- losses and steps -------------------------------------------------------------------

def gan_value(d_real, d_fake) -> float:
    """mean(log D(x)) + mean(log(1 - D(G(z)))), with inputs clamped away from 0 and 1."""
    r = np.clip(np.asarray(getattr(d_real, "data", d_real), dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    f = np.clip(np.asarray(getattr(d_fake, "data", d_fake), dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    return float(np.mean(np.log(r)) + np.mean(np.log1p(-f)))


def discriminator_step(real: np.ndarray, gen_input: np.ndarray, generator: Network,
                       discriminator: Network, opt: nn.AdamState) -> dict:
    """One update of the discriminator: bce(D(real), 1) + bce(D(G(input)), 0).

    ``real`` is in [0, 1]. The generator is frozen for the step, so neither its
    weights nor its batchnorm statistics change.
    """
    with generator.params.frozen_scope():
        fake = generator(Tensor(gen_input), mode="train")
    d_real = discriminator(Tensor(to_signed(real)), mode="train")
    d_fake = discriminator(Tensor(fake.data), mode="train")
    loss = tc.bce_loss(d_real, np.ones(d_real.shape, np.float32)) + \
        tc.bce_loss(d_fake, np.zeros(d_fake.shape, np.float32))
    nn.adam_step(discriminator.params, tc.backward(loss), opt)
    return {
        "d_loss": float(loss.data),
        "d_real_mean": float(d_real.data.mean()),
        "d_fake_mean": float(d_fake.data.mean()),
        "value_v": gan_value(d_real, d_fake),
    }


def generator_step(gen_input: np.ndarray, generator: Network, discriminator: Network,
                   opt: nn.AdamState, target: np.ndarray | None = None,
                   recon_weight: float = 10.0) -> dict:
    """One update of the generator toward D(G(input)) = 1.

    With ``target`` (high-res images in [0, 1]) the loss gains
    ``recon_weight * bce((G(input) + 1) / 2, target)``. The discriminator is
    frozen for the step.
    """
    fake = generator(Tensor(gen_input), mode="train")
    with discriminator.params.frozen_scope():
        d_fake = discriminator(fake, mode="train")
    adv = tc.bce_loss(d_fake, np.ones(d_fake.shape, np.float32))
    loss = adv
    recon = math.nan
    if target is not None:
        target = np.asarray(target, dtype=np.float32)
        if target.shape != fake.shape:
            raise DimensionError(f"reconstruction target {target.shape} vs generator output {fake.shape}")
        rec = tc.bce_loss((fake + 1.0) * 0.5, target)
        recon = float(rec.data)
        loss = adv + rec * recon_weight
    nn.adam_step(generator.params, tc.backward(loss), opt)
    return {"g_loss": float(loss.data), "adv_loss": float(adv.data), "recon_loss": recon}


# -- training ---------------------------------------------------------------------------

def _as_training_arrays(dataset, cfg: GanConfig) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(dataset, np.ndarray):
        high = dataset.astype(np.float32, copy=False)
        low = None
        if cfg.mode == "conditional" and len(high):
            low = np.stack([data_io.downsample(im, cfg.upscale_factor) for im in high])
    else:
        pairs = list(dataset)
        if pairs and not isinstance(pairs[0], EnhancerPair):
            raise TypeError("dataset must be an image array or a sequence of EnhancerPair")
        high = np.stack([p.high_res for p in pairs]).astype(np.float32) if pairs else np.zeros((0,))
        low = np.stack([p.low_res for p in pairs]).astype(np.float32) if pairs else None
    if len(high) == 0:
        raise ValueError("cannot train a GAN on an empty dataset")
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if high.shape[1:] != expected:
        raise DimensionError(f"training images must be (N, {expected}), got {high.shape}")
    return high, low


def train_gan(dataset, cfg: GanConfig, seed: int, loss_csv: str | os.PathLike | None = None,
              gan: Gan | None = None) -> tuple[Gan, list[GanLossReport]]:
    """Alternate one discriminator step and one generator step per batch.

    ``dataset`` is an (N, C, H, W) array in [0, 1] (low-res inputs for the
    conditional mode are box-filter downsampled from it) or a sequence of
    EnhancerPair. Batches are full ``cfg.batch_size`` batches; a trailing
    remainder is dropped, unless the whole set is smaller than one batch.
    """
    high, low = _as_training_arrays(dataset, cfg)
    rng = np.random.default_rng(seed)
    gan = init_gan(cfg, rng) if gan is None else gan
    g, d = gan.generator, gan.discriminator
    n = len(high)
    bs = min(cfg.batch_size, n)
    reports = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        rows = []
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            lr_batch = low[idx] if low is not None else None
            frag = discriminator_step(high[idx], generator_input(cfg, rng, bs, lr_batch), g, d, gan.d_opt)
            target = high[idx] if cfg.mode == "conditional" else None
            frag.update(generator_step(generator_input(cfg, rng, bs, lr_batch), g, d, gan.g_opt,
                                       target, cfg.recon_weight))
            rows.append(frag)
        report = GanLossReport(**{k: float(np.mean([r[k] for r in rows])) for k in rows[0]})
        reports.append(report)
        gan.epochs_trained += 1
        log.info("gan epoch %d d_loss %.4f g_loss %.4f D(real) %.3f D(fake) %.3f", epoch + 1,
                 report.d_loss, report.g_loss, report.d_real_mean, report.d_fake_mean)
    if loss_csv is not None:
        write_loss_csv(loss_csv, reports)
    return gan, reports


def write_loss_csv(path: str | os.PathLike, reports: Sequence[GanLossReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for epoch, r in enumerate(reports, start=1):
            writer.writerow([epoch] + [repr(getattr(r, k)) for k in LOSS_COLUMNS[1:]])


# -- checkpoints ------------------------------------------------------------------------

def save_gan(path: str | os.PathLike, gan: Gan) -> None:
    tensors = {f"g.{k}": v for k, v in gan.generator.params.arrays().items()}
    tensors.update({f"d.{k}": v for k, v in gan.discriminator.params.arrays().items()})
    data_io.save_checkpoint(path, tensors, {"kind": "gan", "config": gan.cfg.to_dict(),
                                            "epochs_trained": gan.epochs_trained})


def load_gan(path: str | os.PathLike) -> Gan:
    meta = data_io.load_meta(path)
    if meta.get("kind") != "gan":
        raise CheckpointError(f"{path}: not a GAN checkpoint (kind={meta.get('kind')!r})")
    try:
        cfg = GanConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad GAN config in metadata: {exc}") from exc
    arrays = data_io.load_checkpoint(path)
    gan = init_gan(cfg, 0)
    for prefix, net in (("g.", gan.generator), ("d.", gan.discriminator)):
        got = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        want = net.params.arrays()
        if set(got) != set(want):
            raise CheckpointError(f"{path}: parameter names do not match the {cfg.mode} architecture")
        for name, arr in got.items():
            if arr.shape != want[name].shape:
                raise CheckpointError(f"{path}: {prefix}{name} has shape {arr.shape}, expected {want[name].shape}")
        net.params = nn.ParamSet.from_arrays(got)
    gan.epochs_trained = int(meta.get("epochs_trained", 0))
    return gan


# -- inference --------------------------------------------------------------------------

def enhance(gan: Gan, low_res: np.ndarray, seed: int = 0, batch_size: int = 256,
            allow_untrained: bool = False) -> np.ndarray:
    """Map low-res images (N, C, h, w) in [0, 1] to (N, C, h*f, w*f) in [0, 1]."""
    if gan.cfg.mode != "conditional":
        raise CheckpointError("enhance needs a generator trained in conditional mode")
    if gan.epochs_trained == 0 and not allow_untrained:
        raise CheckpointError("enhance called with an untrained generator")
    low_res = np.asarray(low_res, dtype=np.float32)
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, len(low_res), batch_size):
        chunk = low_res[start:start + batch_size]
        x = generator_input(gan.cfg, rng, len(chunk), chunk)
        out.append(to_unit(gan.generator(Tensor(x), mode="eval").data))
    if not out:
        return np.zeros((0, gan.cfg.channels, gan.cfg.image_size, gan.cfg.image_size), np.float32)
    return np.clip(np.concatenate(out), 0.0, 1.0)


def _feature_layer_indices(spec: nn.ModelSpec) -> list[int]:
    """Index of the activation closing each stride-2 conv block."""
    out = []
    convs = [i for i, layer in enumerate(spec.layers) if layer.kind == "conv"]
    for i in convs[:-1]:
        j = i + 1
        while spec.layers[j].kind != "activation":
            j += 1
        out.append(j)
    return out


def extract_features(discriminator: Network, images: np.ndarray) -> np.ndarray:
    """Max-pool every discriminator conv block to 4x4, flatten and concatenate.

    Accepts one (C, 32, 32) image or a batch; the feature length is
    16 * (sum of block channel counts).
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch.ndim != 4 or batch.shape[2:] != (32, 32):
        raise DimensionError(f"extract_features expects 32x32 images, got {images.shape}")
    outs = nn.forward(discriminator.spec, discriminator.params, Tensor(to_signed(batch)), mode="eval",
                      return_all=True)
    feats = []
    for idx in _feature_layer_indices(discriminator.spec):
        a = outs[idx]
        pooled = tc.maxpool2d(a, a.shape[2] // 4) if a.shape[2] > 4 else a
        feats.append(pooled.data.reshape(len(batch), -1))
    f = np.concatenate(feats, axis=1)
    return f[0] if single else f


@dataclass
class ProbeResult:
    weights: np.ndarray   # (F, K) on standardized features
    bias: np.ndarray      # (K,)
    classes: np.ndarray   # (K,) label per column
    mean: np.ndarray
    scale: np.ndarray
    accuracy: float       # held-out

    def predict(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return self.classes[np.argmax(z @ self.weights + self.bias, axis=1)]


def linear_probe(features: np.ndarray, labels: np.ndarray, l2: float = 1.0,
                 test_features: np.ndarray | None = None, test_labels: np.ndarray | None = None,
                 holdout: float = 0.25, seed: int = 0) -> ProbeResult:
    """One-vs-rest ridge regression onto +-1 targets, solved in closed form.

    Features are standardized with training-set statistics. Without an
    explicit test set a random ``holdout`` fraction is held out.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (N, F) with one label per row")
    if l2 <= 0:
        raise ValueError("l2 must be positive")
    if test_features is None:
        order = np.random.default_rng(seed).permutation(len(x))
        cut = len(x) - max(1, int(round(holdout * len(x))))
        x, y, tx, ty = x[order[:cut]], y[order[:cut]], x[order[cut:]], y[order[cut:]]
    else:
        tx, ty = np.asarray(test_features, dtype=np.float64), np.asarray(test_labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    targets = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    t_mean = targets.mean(axis=0)
    tc_ = targets - t_mean
    n, f = z.shape
    if f <= n:
        w = np.linalg.solve(z.T @ z + l2 * np.eye(f), z.T @ tc_)
    else:
        w = z.T @ np.linalg.solve(z @ z.T + l2 * np.eye(n), tc_)
    result = ProbeResult(w, t_mean, classes, mean, scale, math.nan)
    result.accuracy = float(np.mean(result.predict(tx) == ty))
    return result
