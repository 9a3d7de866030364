"""Command-line entry point: ``ganshot <command> [flags]``.

Configuration comes from three layers, later ones winning: built-in
defaults, a ``key=value`` file given with ``--config``, and flags
(``--set key=value`` reaches any key without a dedicated flag). Each run
writes ``<out>/logs/<command>.log``; its non-comment lines are the resolved
configuration, so the log can be passed back as ``--config``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on data or
checkpoint errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import data_io
from . import detector as det
from . import evalkit as ev
from . import gan
from .tensor_core import DimensionError

log = logging.getLogger("ganshot")

COMMANDS = ("gen-data", "train-gan", "train-detector", "enhance", "detect", "eval", "compare")


class UsageError(Exception):
    pass


def _positive(v):
    return v > 0


def _unit_open(v):
    return 0 < v < 1


def _one_of(*options):
    def check(v):
        return v in options
    check.options = options
    return check


# key -> (type, default, validator or None)
SCHEMA: dict[str, tuple[type, Any, Callable | None]] = {
    "seed": (int, 0, lambda v: v >= 0),
    "epochs": (int, 25, lambda v: v >= 0),
    "batch_size": (int, 72, _positive),
    "image_size": (int, 32, _one_of(32, 64)),
    "upscale_factor": (int, 4, _one_of(2, 4)),
    "score_threshold": (float, 0.5, _unit_open),
    "nms_threshold": (float, 0.2, _unit_open),
    "iou_match_threshold": (float, 0.5, _unit_open),
    "threads": (int, 1, _positive),
    "out": (str, "", None),
    "data": (str, "", None),
    "split": (str, "test", _one_of("train", "test")),
    "num_train": (int, 2000, _positive),
    "num_test": (int, 500, _positive),
    "min_object_px": (int, 3, lambda v: v >= 2),
    "max_object_px": (int, 16, _positive),
    "max_objects": (int, 3, _positive),
    "gan_mode": (str, "conditional", _one_of(*gan.MODES)),
    "base_feature_maps": (int, 64, _positive),
    "noise": (str, "uniform", _one_of(*gan.NOISE_KINDS)),
    "recon_weight": (float, 10.0, lambda v: v >= 0),
    "cifar": (str, "", None),
    "detector_input": (str, "low_res", _one_of("low_res", "high_res")),
    "detector_width": (int, 16, _positive),
    "detector_batch_size": (int, 32, _positive),
    "pipeline": (str, "gan+ssd", _one_of("ssd", "ssd_hr", "gan+ssd")),
    "gan": (str, "", None),
    "ssd": (str, "", None),
    "ssd_hr": (str, "", None),
    "detections": (str, "", None),
    "gts": (str, "", None),
    "low_res_dir": (str, "", None),
    "annotate": (int, 16, lambda v: v >= 0),
}

FLAG_KEYS = {
    "seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "image_size": "image_size",
    "upscale": "upscale_factor", "score_threshold": "score_threshold",
    "nms_threshold": "nms_threshold", "out": "out", "threads": "threads",
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out"])

    @property
    def data_dir(self) -> Path:
        return Path(self.values["data"]) if self.values["data"] else self.out_dir / "data"

    def path(self, key: str, default: Path) -> Path:
        return Path(self.values[key]) if self.values[key] else default

    def dump(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))


def _coerce(key: str, raw: str, source: str):
    if key not in SCHEMA:
        raise UsageError(f"{source}: unknown configuration key {key!r}")
    kind, _, check = SCHEMA[key]
    try:
        value = kind(raw)
    except ValueError:
        raise UsageError(f"{source}: {key} expects {kind.__name__}, got {raw!r}") from None
    if check is not None and not check(value):
        allowed = getattr(check, "options", None)
        hint = f" (allowed: {', '.join(map(str, allowed))})" if allowed else ""
        raise UsageError(f"{source}: invalid value for {key}: {raw!r}{hint}")
    return value


def parse_config_text(text: str, source: str = "config") -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(key, raw, f"{source}:{lineno}")
    return out


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        values.update(parse_config_text(text, args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw.strip(), "--set")
    for flag, key in FLAG_KEYS.items():
        raw = getattr(args, flag)
        if raw is not None:
            values[key] = _coerce(key, str(raw), f"--{flag.replace('_', '-')}")
    if not values["out"]:
        values["out"] = environ.get("GANSHOT_OUT") or "runs"
    if values["min_object_px"] > values["max_object_px"]:
        raise UsageError("min_object_px must not exceed max_object_px")
    return RunConfig(values)


# -- data helpers ---------------------------------------------------------------------------

def _scene_params(cfg: RunConfig) -> data_io.SceneParams:
    return data_io.SceneParams(image_size=cfg.image_size, count_range=(1, cfg.max_objects),
                               size_range=(cfg.min_object_px, cfg.max_object_px))


def _image_name(i: int) -> str:
    return f"img_{i:05d}.ppm"


def write_split(directory: Path, images: np.ndarray, gts) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        data_io.write_image(directory / _image_name(i), im)
    if gts is not None:
        data_io.write_gt_csv(directory / "gts.csv", gts)


def read_images(directory: Path) -> np.ndarray:
    files = sorted(directory.glob("img_*.ppm"))
    if not files:
        raise FileNotFoundError(f"no img_*.ppm images in {directory}")
    return np.stack([data_io.read_image(f) for f in files])


def read_split(cfg: RunConfig, split: str) -> tuple[np.ndarray, list]:
    directory = cfg.data_dir / split
    images = read_images(directory)
    gts = data_io.read_gt_csv(directory / "gts.csv", len(images))
    if images.shape[-1] != cfg.image_size:
        raise DimensionError(f"{directory}: images are {images.shape[-1]}px but image_size={cfg.image_size}")
    return images, gts


def _low_res(images: np.ndarray, factor: int) -> np.ndarray:
    return np.stack([data_io.downsample(im, factor) for im in images])


def _naive(images: np.ndarray, factor: int) -> np.ndarray:
    return np.stack([data_io.upsample(data_io.downsample(im, factor), factor) for im in images])


def _eval_config(cfg: RunConfig) -> ev.EvalConfig:
    return ev.EvalConfig(cfg.score_threshold, cfg.nms_threshold, cfg.iou_match_threshold)


def _gan_config(cfg: RunConfig) -> gan.GanConfig:
    return gan.GanConfig(image_size=cfg.image_size, epochs=cfg.epochs, batch_size=cfg.batch_size,
                         upscale_factor=cfg.upscale_factor, mode=cfg.gan_mode,
                         base_feature_maps=cfg.base_feature_maps, noise=cfg.noise,
                         recon_weight=cfg.recon_weight)


def _load_gan(cfg: RunConfig) -> gan.Gan:
    model = gan.load_gan(cfg.path("gan", cfg.out_dir / "gan.ckpt"))
    if model.cfg.image_size != cfg.image_size:
        raise DimensionError(f"GAN checkpoint is for {model.cfg.image_size}px images, image_size={cfg.image_size}")
    return model


def _load_detector(cfg: RunConfig, key: str) -> det.Detector:
    d = det.load_detector(cfg.path(key, cfg.out_dir / f"{key}.ckpt"))
    if d.spec.image_size != cfg.image_size:
        raise DimensionError(f"{key} checkpoint is for {d.spec.image_size}px input, image_size={cfg.image_size}")
    return d


# -- commands ----------------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> None:
    params = _scene_params(cfg)
    base = cfg.seed * 1_000_000
    for split, start, count in (("train", base, cfg.num_train), ("test", base + 500_000, cfg.num_test)):
        scenes = data_io.synth_scenes(range(start, start + count), params)
        write_split(cfg.data_dir / split, data_io.stack_images(scenes), [s.gts for s in scenes])
        log.info("wrote %d %s scenes to %s", count, split, cfg.data_dir / split)


def cmd_train_gan(cfg: RunConfig) -> None:
    if cfg.cifar:
        images = np.stack([r.pixels for r in data_io.read_cifar_batch(cfg.cifar)])
    else:
        images, _ = read_split(cfg, "train")
    model, reports = gan.train_gan(images, _gan_config(cfg), cfg.seed, loss_csv=cfg.out_dir / "gan_loss.csv")
    gan.save_gan(cfg.out_dir / "gan.ckpt", model)
    if reports:
        last = reports[-1]
        log.info("final epoch: d_loss=%.4f g_loss=%.4f D(real)=%.3f D(fake)=%.3f",
                 last.d_loss, last.g_loss, last.d_real_mean, last.d_fake_mean)


def cmd_train_detector(cfg: RunConfig) -> None:
    images, gts = read_split(cfg, "train")
    if cfg.detector_input == "low_res":
        images, name = _naive(images, cfg.upscale_factor), "ssd"
    else:
        name = "ssd_hr"
    model = det.Detector.build(len(data_io.SceneParams().classes), cfg.image_size, cfg.detector_width,
                               cfg.seed, cfg.detector_input)
    tcfg = det.DetectorTrainConfig(epochs=cfg.epochs, batch_size=cfg.detector_batch_size,
                                   iou_threshold=cfg.iou_match_threshold)
    model.params, history = det.train_detector(model.spec, model.defaults, images, gts, cfg.seed, tcfg,
                                               params=model.params)
    det.save_detector(cfg.out_dir / f"{name}.ckpt", model)
    with open(cfg.out_dir / f"{name}_loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(history, start=1))


def cmd_enhance(cfg: RunConfig) -> None:
    model = _load_gan(cfg)
    if cfg.low_res_dir:
        low = read_images(Path(cfg.low_res_dir))
    else:
        images, _ = read_split(cfg, cfg.split)
        low = _low_res(images, model.cfg.upscale_factor)
    write_split(cfg.out_dir / "enhanced", gan.enhance(model, low, seed=cfg.seed), None)
    log.info("enhanced %d images into %s", len(low), cfg.out_dir / "enhanced")


def _pipeline_inputs(cfg: RunConfig, images: np.ndarray) -> tuple[str, np.ndarray]:
    if cfg.pipeline == "ssd":
        return "ssd", _naive(images, cfg.upscale_factor)
    if cfg.pipeline == "ssd_hr":
        return "ssd_hr", images
    model = _load_gan(cfg)
    return "ssd_hr", gan.enhance(model, _low_res(images, model.cfg.upscale_factor), seed=cfg.seed)


def cmd_detect(cfg: RunConfig) -> None:
    images, _ = read_split(cfg, cfg.split)
    key, inputs = _pipeline_inputs(cfg, images)
    dets = ev.run_detector(_load_detector(cfg, key), inputs, _eval_config(cfg))
    ev.write_detections_csv(cfg.out_dir / "detections.csv", dets)
    log.info("wrote %d detections for %d images", sum(map(len, dets)), len(dets))


def cmd_eval(cfg: RunConfig) -> None:
    gts_path = cfg.path("gts", cfg.data_dir / cfg.split / "gts.csv")
    gts = data_io.read_gt_csv(gts_path)
    dets = ev.read_detections_csv(cfg.path("detections", cfg.out_dir / "detections.csv"))
    n = max(len(gts), len(dets))
    gts += [[] for _ in range(n - len(gts))]
    dets += [[] for _ in range(n - len(dets))]
    curve = ev.pr_curve(dets, gts, _eval_config(cfg))
    ev.write_pr_csv(cfg.out_dir / "pr.csv", curve)
    tp, fp, fn = curve.counts_at_default
    summary = (f"f1={curve.f1_at_default:.6f} precision={curve.precision_at_default:.6f} "
               f"recall={curve.recall_at_default:.6f} tp={tp} fp={fp} fn={fn}")
    (cfg.out_dir / "eval.txt").write_text(summary + "\n")
    print(summary)


def cmd_compare(cfg: RunConfig) -> None:
    images, gts = read_split(cfg, "test")
    report = ev.compare_pipelines(images, gts, _load_detector(cfg, "ssd"), _load_detector(cfg, "ssd_hr"),
                                  _load_gan(cfg), _eval_config(cfg))
    ev.write_compare_csv(cfg.out_dir / "compare.csv", report.rows)
    for name, run in report.runs.items():
        slug = name.lower().replace("+", "_").replace("-", "_")
        ev.write_pr_csv(cfg.out_dir / f"pr_{slug}.csv", run.curve)
        folder = cfg.out_dir / "annotated" / slug
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(min(cfg.annotate, len(images))):
            data_io.write_image(folder / _image_name(i),
                                ev.annotate(run.inputs[i], gts[i], run.detections[i], cfg.score_threshold))
    for r in report.rows:
        print(f"{r.pipeline}: f1={r.f1:.4f} precision={r.precision:.4f} recall={r.recall:.4f} "
              f"tiny_recall={r.tiny_recall:.4f}")


HANDLERS = {
    "gen-data": cmd_gen_data, "train-gan": cmd_train_gan, "train-detector": cmd_train_detector,
    "enhance": cmd_enhance, "detect": cmd_detect, "eval": cmd_eval, "compare": cmd_compare,
}


# -- plumbing ---------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--image-size", dest="image_size", type=int)
    common.add_argument("--upscale", type=int)
    common.add_argument("--score-threshold", dest="score_threshold", type=float)
    common.add_argument("--nms-threshold", dest="nms_threshold", type=float)
    common.add_argument("--out", help="output directory (default: $GANSHOT_OUT, else ./runs)")
    common.add_argument("--threads", type=int, help="BLAS threads (default 1, deterministic)")
    parser = _Parser(prog="ganshot", description="Low-resolution object detection with a GAN enhancer.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "render synthetic train/test scenes",
        "train-gan": "train the GAN (conditional enhancer by default)",
        "train-detector": "train a detector on naive low-res or high-res images",
        "enhance": "enhance low-res images with a trained GAN",
        "detect": "run a pipeline and write a detections CSV",
        "eval": "score a detections CSV against ground truth",
        "compare": "compare the naive and GAN-enhanced pipelines",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _setup_logging(cfg: RunConfig, command: str) -> logging.Handler:
    logs = cfg.out_dir / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    path = logs / f"{command}.log"
    path.write_text(f"# ganshot {command}\n" + cfg.dump())
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter("# %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("ganshot")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def run_command(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    handler = _setup_logging(cfg, args.command)
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setFormatter(logging.Formatter("%(message)s"))
    logging.getLogger("ganshot").addHandler(stderr)
    log.info("resolved configuration:\n%s", cfg.dump().rstrip())
    try:
        with threadpool_limits(limits=cfg.threads):
            HANDLERS[args.command](cfg)
        return 0
    except (UsageError, ev.ConfigurationError) as exc:
        log.error("configuration error: %s", exc)
        return 1
    except (data_io.FormatError, data_io.CheckpointError, DimensionError, FileNotFoundError,
            RuntimeError, ValueError, OSError) as exc:
        log.error("error: %s", exc)
        return 2
    finally:
        for h in (handler, stderr):
            logging.getLogger("ganshot").removeHandler(h)
            h.close()


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
