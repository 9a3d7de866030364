"""Detection post-processing and measurement: IoU, NMS, precision/recall/F1."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, Detection, iou_matrix

GtList = Sequence[tuple[BoundingBox, int]]


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.5
    nms_threshold: float = 0.2
    iou_match_threshold: float = 0.5
    # detections below this score are dropped before NMS; only affects the low end of the PR curve
    score_floor: float = 0.01
    # ground truths whose larger side is at most this many detector-input pixels count as tiny
    tiny_max_px: float = 8.0

    def __post_init__(self):
        for name in ("score_threshold", "nms_threshold", "iou_match_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def _sorted_order(dets: Sequence[Detection]) -> np.ndarray:
    """Descending score, then lower class id, then input order."""
    if not dets:
        return np.zeros(0, dtype=np.int64)
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    return np.lexsort((np.arange(len(dets)), classes, -scores))


def nms(dets: Sequence[Detection], overlap_threshold: float = 0.2) -> list[Detection]:
    """Greedy class-wise non-maximum suppression.

    Walk detections by descending score; keep one unless a kept detection of
    the same class overlaps it with IoU >= ``overlap_threshold``.
    """
    if not 0 < overlap_threshold < 1:
        raise ValueError("overlap_threshold must lie in (0, 1)")
    order = _sorted_order(dets)
    if order.size == 0:
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    classes = np.array([d.class_id for d in dets])
    keep = np.zeros(len(dets), dtype=bool)
    for cls in np.unique(classes):
        idx = order[classes[order] == cls]
        ious = iou_matrix(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep[idx[i]] = True
            alive[i + 1:] &= ious[i, i + 1:] < overlap_threshold
    return [dets[i] for i in order if keep[i]]


# -- matching and PR --------------------------------------------------------------

def match_detections(dets: Sequence[Detection], gts: GtList, iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy score-ordered matching within one image.

    Each detection, highest score first, claims the unclaimed same-class gt
    with the largest IoU, provided it reaches ``iou_threshold``. Returns
    (TP flag per detection in input order, matched flag per gt).
    """
    tp = np.zeros(len(dets), dtype=bool)
    claimed = np.zeros(len(gts), dtype=bool)
    if not dets or not gts:
        return tp, claimed
    ious = iou_matrix(np.array([d.box.as_array() for d in dets]), np.array([b.as_array() for b, _ in gts]))
    gt_cls = np.array([c for _, c in gts])
    for i in _sorted_order(dets):
        cand = np.where((gt_cls == dets[i].class_id) & ~claimed, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            tp[i] = True
            claimed[j] = True
    return tp, claimed


@dataclass
class PrCurve:
    points: list[tuple[float, float, float]]  # (score cutoff, precision, recall)
    f1_at_default: float
    precision_at_default: float = 0.0
    recall_at_default: float = 0.0
    counts_at_default: tuple[int, int, int] = (0, 0, 0)  # TP, FP, FN


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else math.nan
    if math.isnan(recall):
        f1 = math.nan
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def pr_curve(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[GtList],
             cfg: EvalConfig = EvalConfig()) -> PrCurve:
    """Precision/recall at every distinct score cutoff, plus F1 at ``cfg.score_threshold``.

    Detections are expected to be NMS-filtered already. With no ground truths
    at all, recall and F1 are NaN.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("need one detection list per ground-truth list")
    scores, flags = [], []
    total_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        tp, _ = match_detections(dets, gts, cfg.iou_match_threshold)
        scores.extend(d.score for d in dets)
        flags.extend(tp.tolist())
        total_gt += len(gts)
    scores_arr = np.array(scores, dtype=np.float64)
    flags_arr = np.array(flags, dtype=bool)
    order = np.argsort(-scores_arr, kind="stable")
    scores_arr, flags_arr = scores_arr[order], flags_arr[order]
    cum_tp = np.cumsum(flags_arr)
    cum_fp = np.cumsum(~flags_arr)

    points = []
    cutoffs = np.unique(scores_arr)[::-1]
    for c in cutoffs:
        k = int(np.searchsorted(-scores_arr, -c, side="right"))
        p, r, _ = _prf(int(cum_tp[k - 1]), int(cum_fp[k - 1]), total_gt - int(cum_tp[k - 1]))
        points.append((float(c), p, r))

    k = int(np.searchsorted(-scores_arr, -cfg.score_threshold, side="right"))
    tp = int(cum_tp[k - 1]) if k else 0
    fp = int(cum_fp[k - 1]) if k else 0
    p, r, f1 = _prf(tp, fp, total_gt - tp)
    return PrCurve(points, f1, p, r, (tp, fp, total_gt - tp))


def tiny_recall(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[GtList],
                image_size: int, cfg: EvalConfig = EvalConfig()) -> float:
    """Recall over ground truths whose larger side is <= ``cfg.tiny_max_px`` pixels."""
    hit = total = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        kept = [d for d in dets if d.score >= cfg.score_threshold]
        _, claimed = match_detections(kept, gts, cfg.iou_match_threshold)
        for (box, _), got in zip(gts, claimed):
            if max(box.w, box.h) * image_size <= cfg.tiny_max_px + 1e-9:
                total += 1
                hit += bool(got)
    return hit / total if total else math.nan


def postprocess(dets: Sequence[Detection], cfg: EvalConfig = EvalConfig()) -> list[Detection]:
    return nms([d for d in dets if d.score >= cfg.score_floor], cfg.nms_threshold)


# -- CSV -----------------------------------------------------------------------------

def write_pr_csv(path: str | os.PathLike, curve: PrCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cutoff", "precision", "recall"])
        for c, p, r in curve.points:
            writer.writerow([repr(c), repr(p), repr(r)])


DETECTION_COLUMNS = ["image_id", "class_id", "score", "cx", "cy", "w", "h"]


def write_detections_csv(path: str | os.PathLike, dets_per_image: Sequence[Sequence[Detection]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_COLUMNS)
        for image_id, dets in enumerate(dets_per_image):
            for d in dets:
                writer.writerow([image_id, d.class_id, repr(d.score), repr(d.box.cx), repr(d.box.cy),
                                 repr(d.box.w), repr(d.box.h)])


def read_detections_csv(path: str | os.PathLike, num_images: int | None = None) -> list[list[Detection]]:
    rows: dict[int, list[Detection]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTION_COLUMNS:
            raise ValueError(f"{path}: expected columns {DETECTION_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            box = BoundingBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]))
            rows.setdefault(int(row["image_id"]), []).append(
                Detection(box, int(row["class_id"]), float(row["score"])))
    n = num_images if num_images is not None else (max(rows) + 1 if rows else 0)
    return [rows.get(i, []) for i in range(n)]


# -- pipeline comparison -------------------------------------------------------------------

class ConfigurationError(ValueError):
    """Checkpoints and data that cannot be combined into a pipeline."""


@dataclass(frozen=True)
class CompareRow:
    dataset: str
    pipeline: str
    f1: float
    precision: float
    recall: float
    tiny_recall: float


@dataclass
class PipelineRun:
    detections: list[list[Detection]]
    curve: PrCurve
    inputs: np.ndarray  # detector input images


@dataclass
class CompareReport:
    rows: list[CompareRow]
    runs: dict[str, PipelineRun]


COMPARE_COLUMNS = ["dataset", "pipeline", "f1", "precision", "recall", "tiny_recall"]
BASELINE = "SSD-only"
CASCADE = "DCGAN+SSD"


def run_detector(detector, images: np.ndarray, cfg: EvalConfig = EvalConfig()) -> list[list[Detection]]:
    from . import detector as det_mod

    probs, boxes = det_mod.predict(detector.spec, detector.params, detector.defaults, images)
    return [postprocess(det_mod.detections_from_arrays(p, b, cfg.score_floor), cfg) for p, b in zip(probs, boxes)]


def evaluate_pipeline(detector, images: np.ndarray, gts_per_image: Sequence[GtList],
                      cfg: EvalConfig = EvalConfig()) -> PipelineRun:
    dets = run_detector(detector, images, cfg)
    return PipelineRun(dets, pr_curve(dets, gts_per_image, cfg), images)


def compare_pipelines(high_res: np.ndarray, gts_per_image: Sequence[GtList], ssd, ssd_hr, gan_model,
                      cfg: EvalConfig = EvalConfig(), dataset: str = "synthetic") -> CompareReport:
    """Score the naive pipeline against the enhancement cascade on the same test scenes.

    Both pipelines start from the low-res frames obtained by box-filter
    downsampling ``high_res`` by the GAN's upscale factor. The baseline runs
    ``ssd`` on a nearest-neighbour upsampling of them; the cascade runs
    ``ssd_hr`` on the GAN's enhancement.
    """
    from . import data_io
    from . import gan as gan_mod

    high_res = np.asarray(high_res, dtype=np.float32)
    if len(high_res) != len(gts_per_image):
        raise ConfigurationError("need one ground-truth list per test image")
    gcfg = gan_model.cfg
    size = high_res.shape[-1]
    for name, d in (("ssd", ssd), ("ssd_hr", ssd_hr)):
        if d.spec.image_size != size:
            raise ConfigurationError(f"{name} expects {d.spec.image_size}px input, test images are {size}px")
    if gcfg.image_size != size:
        raise ConfigurationError(f"GAN produces {gcfg.image_size}px images, test images are {size}px")
    if gcfg.mode != "conditional":
        raise ConfigurationError("the cascade needs a GAN trained in conditional mode")
    f = gcfg.upscale_factor
    low = np.stack([data_io.downsample(im, f) for im in high_res]) if len(high_res) else high_res[:, :, ::f, ::f]
    naive = np.stack([data_io.upsample(im, f) for im in low]) if len(low) else high_res
    enhanced = gan_mod.enhance(gan_model, low)

    runs = {
        BASELINE: evaluate_pipeline(ssd, naive, gts_per_image, cfg),
        CASCADE: evaluate_pipeline(ssd_hr, enhanced, gts_per_image, cfg),
    }
    rows = [
        CompareRow(dataset, name, run.curve.f1_at_default, run.curve.precision_at_default,
                   run.curve.recall_at_default, tiny_recall(run.detections, gts_per_image, size, cfg))
        for name, run in runs.items()
    ]
    return CompareReport(rows, runs)


def write_compare_csv(path: str | os.PathLike, rows: Sequence[CompareRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_COLUMNS)
        for r in rows:
            writer.writerow([r.dataset, r.pipeline, repr(r.f1), repr(r.precision), repr(r.recall),
                             repr(r.tiny_recall)])


# -- annotated images ------------------------------------------------------------------------

GT_COLOR = (0.0, 1.0, 0.0)
DET_COLOR = (1.0, 0.0, 0.0)


def _draw_box(canvas: np.ndarray, box: BoundingBox, color) -> None:
    _, h, w = canvas.shape
    x1, y1, x2, y2 = box.corners()
    c0 = int(np.clip(np.floor(x1 * w), 0, w - 1))
    c1 = int(np.clip(np.ceil(x2 * w) - 1, 0, w - 1))
    r0 = int(np.clip(np.floor(y1 * h), 0, h - 1))
    r1 = int(np.clip(np.ceil(y2 * h) - 1, 0, h - 1))
    col = np.asarray(color, dtype=canvas.dtype)[:, None]
    canvas[:, r0, c0:c1 + 1] = col
    canvas[:, r1, c0:c1 + 1] = col
    canvas[:, r0:r1 + 1, c0] = col
    canvas[:, r0:r1 + 1, c1] = col


def annotate(image: np.ndarray, gts: GtList, dets: Sequence[Detection], score_threshold: float = 0.5,
             scale: int = 4) -> np.ndarray:
    """Nearest-upscaled copy of ``image`` with gt boxes in green and detections in red."""
    canvas = np.asarray(image, dtype=np.float32).repeat(scale, axis=1).repeat(scale, axis=2).copy()
    for box, _ in gts:
        _draw_box(canvas, box, GT_COLOR)
    for d in dets:
        if d.score >= score_threshold:
            _draw_box(canvas, d.box, DET_COLOR)
    return canvas
