"""A reduced single-shot multibox detector.

The network is a small conv backbone followed by three stride-2 feature
layers. Each feature layer feeds a 3x3 prediction conv that emits, for every
cell and every default box, ``num_classes + 1`` class logits (index 0 is
background) and 4 box offsets.

Default boxes are ordered layer-major, then row-major over cells, then by
box index within the cell. Predictions are flattened in the same order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data_io, nn
from . import tensor_core as tc
from .boxes import BoundingBox, Detection, center_to_corners, iou_matrix
from .tensor_core import DimensionError, Tensor

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.2, 0.4, 0.7)
DEFAULT_RATIOS = (1.0, 2.0, 0.5)
NEGATIVE_RATIO = 3


@dataclass(frozen=True)
class FeatureMapShape:
    m: int
    n: int
    p: int

    def __post_init__(self):
        if min(self.m, self.n, self.p) <= 0:
            raise ValueError(f"feature map dims must be positive, got {self}")


@dataclass
class DefaultBoxSet:
    boxes: np.ndarray                   # (D, 4) center form
    layout: list[tuple[int, int, int]]  # (m, n, k) per feature layer

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, i: int) -> BoundingBox:
        return BoundingBox(*(float(v) for v in self.boxes[i]))


def generate_default_boxes(shapes: Sequence[FeatureMapShape], scales: Sequence[float],
                           ratios: Sequence[float], extra_square: bool = False) -> DefaultBoxSet:
    """Tile prior boxes over each feature map.

    For layer l with scale s, cell (i, j) is centered at ((j + .5)/n, (i + .5)/m)
    and ratio r gives w = s*sqrt(r), h = s/sqrt(r). ``extra_square`` appends one
    square box of scale sqrt(s_l * s_{l+1}) per cell (s_{L+1} = 1). Boxes are
    clipped to the unit square.
    """
    if len(scales) != len(shapes):
        raise ValueError(f"{len(scales)} scales for {len(shapes)} feature layers")
    if not ratios:
        raise ValueError("at least one aspect ratio is required")
    out = []
    layout = []
    for li, (shape, s) in enumerate(zip(shapes, scales)):
        sizes = [(s * np.sqrt(r), s / np.sqrt(r)) for r in ratios]
        if extra_square:
            nxt = scales[li + 1] if li + 1 < len(scales) else 1.0
            sq = np.sqrt(s * nxt)
            sizes.append((sq, sq))
        for i in range(shape.m):
            for j in range(shape.n):
                cx, cy = (j + 0.5) / shape.n, (i + 0.5) / shape.m
                for w, h in sizes:
                    out.append((cx, cy, w, h))
        layout.append((shape.m, shape.n, len(sizes)))
    boxes = np.array(out, dtype=np.float64).reshape(-1, 4)
    corners = np.clip(center_to_corners(boxes), 0.0, 1.0)
    boxes = np.concatenate([(corners[:, :2] + corners[:, 2:]) / 2, corners[:, 2:] - corners[:, :2]], axis=1)
    return DefaultBoxSet(boxes, layout)


# -- offset coding --------------------------------------------------------------

def encode_boxes(gt: np.ndarray, defaults: np.ndarray) -> np.ndarray:
    """Vectorized offset encoding of center-form (..., 4) arrays."""
    gt = np.asarray(gt, dtype=np.float64)
    d = np.asarray(defaults, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    return np.concatenate([
        (gt[..., :2] - d[..., :2]) / d[..., 2:],
        np.log(gt[..., 2:] / d[..., 2:]),
    ], axis=-1)


def decode_boxes(offsets: np.ndarray, defaults: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64)
    d = np.asarray(defaults, dtype=np.float64)
    return np.concatenate([
        offsets[..., :2] * d[..., 2:] + d[..., :2],
        np.exp(offsets[..., 2:]) * d[..., 2:],
    ], axis=-1)


def encode_offsets(gt: BoundingBox, d: BoundingBox) -> tuple[float, float, float, float]:
    if d.w <= 0 or d.h <= 0:
        raise ValueError("default box must have positive size")
    return tuple(float(v) for v in encode_boxes(gt.as_array(), d.as_array()))


def decode_offsets(offsets: Sequence[float], d: BoundingBox) -> BoundingBox:
    return BoundingBox(*(float(v) for v in decode_boxes(np.asarray(offsets), d.as_array())))


# -- matching -------------------------------------------------------------------

@dataclass
class Assignment:
    labels: np.ndarray     # (D,) 0 = background, c + 1 for class c
    gt_index: np.ndarray   # (D,) matched ground-truth index, -1 for background
    targets: np.ndarray    # (D, 4) encoded offsets, zero for background

    @property
    def num_matched(self) -> int:
        return int((self.labels > 0).sum())


def match_boxes(gts: Sequence[tuple[BoundingBox, int]], defaults: DefaultBoxSet,
                iou_threshold: float = 0.5) -> Assignment:
    """Assign defaults to ground truths.

    First a greedy bipartite pass: repeatedly take the highest-IoU
    (gt, default) pair among unassigned gts and defaults (ties: lowest gt,
    then lowest default). Then every remaining default whose best IoU reaches
    the threshold is matched to that best gt (ties: lowest gt index).
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    d = len(defaults)
    labels = np.zeros(d, dtype=np.int64)
    gt_index = np.full(d, -1, dtype=np.int64)
    targets = np.zeros((d, 4), dtype=np.float64)
    if not gts:
        return Assignment(labels, gt_index, targets)
    gt_boxes = np.array([b.as_array() for b, _ in gts])
    classes = np.array([c for _, c in gts])
    ious = iou_matrix(gt_boxes, defaults.boxes)

    best_gt = ious.argmax(axis=0)
    best_iou = ious.max(axis=0)
    gt_index = np.where(best_iou >= iou_threshold, best_gt, -1)

    work = ious.copy()
    for _ in range(min(len(gts), d)):
        g, k = np.unravel_index(int(np.argmax(work)), work.shape)
        gt_index[k] = g
        work[g, :] = -1.0
        work[:, k] = -1.0

    matched = gt_index >= 0
    labels[matched] = classes[gt_index[matched]] + 1
    targets[matched] = encode_boxes(gt_boxes[gt_index[matched]], defaults.boxes[matched])
    return Assignment(labels, gt_index, targets)


# -- loss -----------------------------------------------------------------------

def multibox_loss(class_logits: Tensor, box_offsets: Tensor, assignments: Sequence[Assignment],
                  negative_ratio: int = NEGATIVE_RATIO, return_parts: bool = False):
    """Softmax cross-entropy on positives plus mined negatives, smooth-L1 on positives.

    Both terms are divided by the number of matched defaults in the batch.
    Negatives are the highest-loss background defaults, ``negative_ratio``
    per positive in each image.
    """
    n, d, _ = class_logits.shape
    labels = np.stack([a.labels for a in assignments])
    targets = np.stack([a.targets for a in assignments]).astype(class_logits.dtype)
    pos = labels > 0
    num_pos = int(pos.sum())
    if num_pos == 0:
        zero = (tc.tsum(class_logits) + tc.tsum(box_offsets)) * 0.0
        return (zero, 0.0, 0.0) if return_parts else zero

    logp = tc.log_softmax(class_logits, axis=-1)
    # background loss per default, for mining
    bg_loss = np.where(pos, -np.inf, -logp.data[..., 0])
    selected = pos.copy()
    for i in range(n):
        k = min(negative_ratio * int(pos[i].sum()), int((~pos[i]).sum()))
        if k:
            order = np.argsort(-bg_loss[i], kind="stable")[:k]
            selected[i, order] = True
    onehot = np.zeros(class_logits.shape, dtype=class_logits.dtype)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    onehot *= selected[..., None]
    conf = -tc.tsum(logp * Tensor(onehot))
    loc = tc.tsum(tc.smooth_l1(box_offsets - Tensor(targets)) * Tensor(pos[..., None].astype(targets.dtype)))
    loss = (conf + loc) * (1.0 / num_pos)
    if return_parts:
        return loss, float(conf.data) / num_pos, float(loc.data) / num_pos
    return loss


# -- network --------------------------------------------------------------------

@dataclass(frozen=True)
class SsdSpec:
    num_classes: int
    image_size: int
    stages: tuple[nn.ModelSpec, ...]  # stage l ends at feature layer l
    heads: tuple[nn.ModelSpec, ...]   # one 3x3 prediction conv per feature layer
    boxes_per_cell: int

    @property
    def feature_shapes(self) -> list[FeatureMapShape]:
        return [FeatureMapShape(s.output_shape[1], s.output_shape[2], s.output_shape[0]) for s in self.stages]

    @property
    def channels_per_box(self) -> int:
        return self.num_classes + 1 + 4


def _block(out_channels: int, stride: int) -> list[nn.LayerSpec]:
    return [nn.conv(out_channels, 3, stride, 1, bias=False), nn.batchnorm(), nn.act("leaky_relu", 0.1)]


def build_ssd(num_classes: int, image_size: int = 32, width: int = 32,
              scales: Sequence[float] = DEFAULT_SCALES,
              ratios: Sequence[float] = DEFAULT_RATIOS) -> tuple[SsdSpec, DefaultBoxSet]:
    """Backbone down to image/2 (32 px) or image/4 (64 px), then 3 stride-2 feature layers."""
    if image_size not in (32, 64):
        raise nn.SpecError(f"unsupported detector image size {image_size} (expected 32 or 64)")
    if num_classes < 1:
        raise nn.SpecError("num_classes must be >= 1")
    k = len(ratios) + 1
    backbone = _block(width // 2, 1) + _block(width, 2)
    if image_size == 64:
        backbone += _block(width, 2)
    backbone += _block(width, 1)
    feature_layers = [backbone + _block(2 * width, 2), _block(2 * width, 2), _block(2 * width, 2)]
    stages = []
    shape = (3, image_size, image_size)
    for layers in feature_layers:
        spec = nn.ModelSpec(shape, tuple(layers))
        stages.append(spec)
        shape = spec.output_shape
    heads = tuple(
        nn.ModelSpec(s.output_shape, (nn.conv(k * (num_classes + 5), 3, 1, 1),)) for s in stages
    )
    ssd = SsdSpec(num_classes, image_size, tuple(stages), heads, k)
    defaults = generate_default_boxes(ssd.feature_shapes, scales, ratios, extra_square=True)
    return ssd, defaults


def init_ssd(spec: SsdSpec, seed: int) -> nn.ParamSet:
    rng = np.random.default_rng(seed)
    params = nn.ParamSet()
    for i, stage in enumerate(spec.stages):
        for name, t in nn.init_params(stage, rng, prefix=f"s{i}.").items():
            params.add(name, t)
    for i, head in enumerate(spec.heads):
        for name, t in nn.init_params(head, rng, prefix=f"h{i}.").items():
            params.add(name, t)
    return params


def ssd_forward(spec: SsdSpec, params: nn.ParamSet, images: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
    """Returns (class logits [N, D, C+1], box offsets [N, D, 4])."""
    expected = (3, spec.image_size, spec.image_size)
    if tuple(images.shape[1:]) != expected:
        raise DimensionError(f"detector expects images of shape (N, {expected}), got {images.shape}")
    x = images
    per_layer = []
    n = images.shape[0]
    for i, (stage, head) in enumerate(zip(spec.stages, spec.heads)):
        x = nn.forward(stage, params, x, mode=mode, prefix=f"s{i}.")
        p = nn.forward(head, params, x, mode=mode, prefix=f"h{i}.")
        _, _, m, w = p.shape
        p = p.reshape(n, spec.boxes_per_cell, spec.channels_per_box, m, w).transpose(0, 3, 4, 1, 2)
        per_layer.append(p.reshape(n, m * w * spec.boxes_per_cell, spec.channels_per_box))
    pred = tc.concat(per_layer, axis=1)
    c1 = spec.num_classes + 1
    return pred[:, :, :c1], pred[:, :, c1:]


# -- training and inference ----------------------------------------------------------

@dataclass
class DetectorTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    iou_threshold: float = 0.5
    flip: bool = True


def flip_gts(gts: Sequence[tuple[BoundingBox, int]]) -> list[tuple[BoundingBox, int]]:
    return [(BoundingBox(1.0 - b.cx, b.cy, b.w, b.h), c) for b, c in gts]


def train_detector(spec: SsdSpec, defaults: DefaultBoxSet, images: np.ndarray,
                   gts: Sequence[Sequence[tuple[BoundingBox, int]]], seed: int,
                   cfg: DetectorTrainConfig = DetectorTrainConfig(),
                   params: nn.ParamSet | None = None) -> tuple[nn.ParamSet, list[float]]:
    """Adam on the multibox loss; returns parameters and per-epoch mean loss.

    When ``params`` is given it is trained in place (fine-tuning).
    """
    if len(images) == 0:
        raise ValueError("cannot train a detector on an empty dataset")
    rng = np.random.default_rng(seed)
    params = init_ssd(spec, seed) if params is None else params
    state = nn.AdamState(lr=cfg.lr, beta1=0.9, beta2=0.999)
    assigned = [match_boxes(g, defaults, cfg.iou_threshold) for g in gts]
    flipped = [match_boxes(flip_gts(g), defaults, cfg.iou_threshold) for g in gts] if cfg.flip else None
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = images[idx]
            batch_assign = [assigned[i] for i in idx]
            if cfg.flip:
                flips = rng.random(len(idx)) < 0.5
                batch = np.where(flips[:, None, None, None], batch[..., ::-1], batch)
                batch_assign = [flipped[i] if f else assigned[i] for i, f in zip(idx, flips)]
            logits, offsets = ssd_forward(spec, params, Tensor(np.ascontiguousarray(batch)), mode="train")
            loss = multibox_loss(logits, offsets, batch_assign)
            nn.adam_step(params, tc.backward(loss), state)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        log.info("detector epoch %d loss %.4f", epoch + 1, history[-1])
    return params, history


def predict(spec: SsdSpec, params: nn.ParamSet, defaults: DefaultBoxSet, images: np.ndarray,
            batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities [N, D, C+1] and decoded, clipped center-form boxes [N, D, 4]."""
    probs, boxes = [], []
    for start in range(0, len(images), batch_size):
        batch = Tensor(np.ascontiguousarray(images[start:start + batch_size], dtype=np.float32))
        logits, offsets = ssd_forward(spec, params, batch, mode="eval")
        probs.append(tc.softmax(logits, axis=-1).data)
        dec = decode_boxes(offsets.data, defaults.boxes[None])
        corners = np.clip(center_to_corners(dec), 0.0, 1.0)
        boxes.append(np.concatenate([(corners[..., :2] + corners[..., 2:]) / 2,
                                     corners[..., 2:] - corners[..., :2]], axis=-1))
    return np.concatenate(probs), np.concatenate(boxes)


def detect(spec: SsdSpec, params: nn.ParamSet, defaults: DefaultBoxSet, image: np.ndarray,
           min_score: float = 0.0) -> list[Detection]:
    """All per-default, per-class detections for one (3, H, W) image, before NMS."""
    image = np.asarray(image)
    if image.shape != (3, spec.image_size, spec.image_size):
        raise DimensionError(f"detector expects a (3, {spec.image_size}, {spec.image_size}) image, got {image.shape}")
    probs, boxes = predict(spec, params, defaults, image[None])
    return detections_from_arrays(probs[0], boxes[0], min_score)


def detections_from_arrays(probs: np.ndarray, boxes: np.ndarray, min_score: float = 0.0) -> list[Detection]:
    out = []
    for k in range(len(boxes)):
        box = None
        for c in range(1, probs.shape[1]):
            score = float(probs[k, c])
            if score < min_score:
                continue
            if box is None:
                box = BoundingBox(*(float(v) for v in boxes[k]))
            out.append(Detection(box, c - 1, score))
    return out


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Detector:
    spec: SsdSpec
    params: nn.ParamSet
    defaults: DefaultBoxSet
    width: int
    input_kind: str = "high_res"  # what the detector was trained on

    @classmethod
    def build(cls, num_classes: int, image_size: int, width: int, seed: int,
              input_kind: str = "high_res") -> "Detector":
        spec, defaults = build_ssd(num_classes, image_size, width)
        return cls(spec, init_ssd(spec, seed), defaults, width, input_kind)


def save_detector(path, det: Detector) -> None:
    data_io.save_checkpoint(path, det.params.arrays(), {
        "kind": "detector", "num_classes": det.spec.num_classes, "image_size": det.spec.image_size,
        "width": det.width, "input_kind": det.input_kind,
    })


def load_detector(path) -> Detector:
    meta = data_io.load_meta(path)
    if meta.get("kind") != "detector":
        raise data_io.CheckpointError(f"{path}: not a detector checkpoint (kind={meta.get('kind')!r})")
    try:
        det = Detector.build(int(meta["num_classes"]), int(meta["image_size"]), int(meta["width"]), 0,
                             str(meta.get("input_kind", "high_res")))
    except (KeyError, ValueError, nn.SpecError) as exc:
        raise data_io.CheckpointError(f"{path}: bad detector metadata: {exc}") from exc
    arrays = data_io.load_checkpoint(path)
    want = det.params.arrays()
    if set(arrays) != set(want) or any(arrays[k].shape != want[k].shape for k in want):
        raise data_io.CheckpointError(f"{path}: parameters do not match the recorded detector architecture")
    det.params = nn.ParamSet.from_arrays(arrays)
    return det
