"""Data formats and generators.

* CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes per row)
* synthetic street-like scenes with tiny "pedestrians" and "vehicles"
* low/high resolution pairs for the enhancer
* binary PPM (P6) images
* the checkpoint format: text manifest, blank line, little-endian float32 payload
"""

from __future__ import annotations

import csv
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import BoundingBox

CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072
CIFAR_BATCH_RECORDS = 10000
CIFAR_BATCH_BYTES = CIFAR_RECORD_BYTES * CIFAR_BATCH_RECORDS

PEDESTRIAN, VEHICLE = 0, 1
CLASS_NAMES = {PEDESTRIAN: "pedestrian", VEHICLE: "vehicle"}


class FormatError(ValueError):
    """Malformed CIFAR bytes or image file."""


class CheckpointError(ValueError):
    """Corrupt, truncated or mismatched checkpoint."""


# -- CIFAR-10 ---------------------------------------------------------------

@dataclass
class CifarRecord:
    label: int
    pixels: np.ndarray  # float32 (3, 32, 32) in [0, 1]


def parse_cifar(data: bytes, records: int | None = None) -> list[CifarRecord]:
    """Parse CIFAR-10 binary rows.

    With ``records`` set, the byte length must be exactly ``records * 3073``
    (a full batch file is 10000 records, 30,730,000 bytes).
    """
    n = len(data)
    if records is not None and n != records * CIFAR_RECORD_BYTES:
        raise FormatError(
            f"expected exactly {records * CIFAR_RECORD_BYTES} bytes for {records} records, got {n}"
        )
    if n % CIFAR_RECORD_BYTES:
        expected = (n // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise FormatError(
            f"length {n} is not a multiple of {CIFAR_RECORD_BYTES}; "
            f"nearest valid lengths are {expected} and {expected + CIFAR_RECORD_BYTES}"
        )
    rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rows[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"record {int(bad[0])} has label {int(labels[bad[0]])} (must be < 10)")
    pixels = rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return [CifarRecord(int(lab), pix) for lab, pix in zip(labels, pixels)]


def write_cifar(records: Sequence[CifarRecord]) -> bytes:
    out = bytearray()
    for rec in records:
        if not 0 <= rec.label < 10:
            raise FormatError(f"label {rec.label} out of range")
        out.append(rec.label)
        out += np.rint(np.clip(rec.pixels, 0, 1) * 255).astype(np.uint8).reshape(-1).tobytes()
    return bytes(out)


def read_cifar_batch(path: str | os.PathLike) -> list[CifarRecord]:
    """Read one canonical CIFAR-10 batch file (exactly 30,730,000 bytes)."""
    return parse_cifar(Path(path).read_bytes(), records=CIFAR_BATCH_RECORDS)


# -- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class SceneParams:
    image_size: int = 32
    count_range: tuple[int, int] = (1, 3)
    # range of the object's larger dimension, in pixels
    size_range: tuple[int, int] = (4, 16)
    noise: float = 0.02
    classes: tuple[int, ...] = (PEDESTRIAN, VEHICLE)


@dataclass
class SyntheticScene:
    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    gts: list[tuple[BoundingBox, int]]
    seed: int


def _object_dims(rng: np.random.Generator, cls: int, size: int) -> tuple[int, int]:
    """(height, width) in pixels with the class aspect constraint met exactly."""
    if cls == PEDESTRIAN:
        # h / w in [2, 3]
        lo, hi = -(-size // 3), size // 2
        return size, int(rng.integers(lo, hi + 1))
    # w / h in [1.5, 2.5]
    lo, hi = int(np.ceil(size / 2.5)), int(np.floor(size / 1.5))
    return int(rng.integers(lo, hi + 1)), size


def _shape_mask(h: int, w: int, ellipse: bool) -> np.ndarray:
    if not ellipse:
        return np.ones((h, w), dtype=bool)
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    mask = yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0
    # keep the extreme rows/columns so the tight box is exactly h x w
    mask[0, (w - 1) // 2:w // 2 + 1] = True
    mask[-1, (w - 1) // 2:w // 2 + 1] = True
    mask[(h - 1) // 2:h // 2 + 1, 0] = True
    mask[(h - 1) // 2:h // 2 + 1, -1] = True
    return mask


def synth_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Render a smooth noisy background with filled high-contrast objects.

    Objects never overlap (one pixel of clearance). Ground-truth boxes are the
    exact pixel extents of each drawn object, normalized to [0, 1].
    """
    lo_size, hi_size = params.size_range
    if lo_size < 2:
        raise ValueError("object size range must start at >= 2 px")
    rng = np.random.default_rng(seed)
    s = params.image_size

    base = rng.uniform(0.1, 0.45, size=3)
    direction = rng.uniform(-0.15, 0.15, size=2)
    ramp = (np.linspace(-1, 1, s)[:, None] * direction[0] + np.linspace(-1, 1, s)[None, :] * direction[1])
    image = base[:, None, None] + ramp[None] + rng.normal(0.0, params.noise, size=(3, s, s))

    occupied = np.zeros((s, s), dtype=bool)
    gts: list[tuple[BoundingBox, int]] = []
    count = int(rng.integers(params.count_range[0], params.count_range[1] + 1))
    for _ in range(count):
        cls = int(rng.choice(params.classes))
        size = int(rng.integers(lo_size, min(hi_size, s) + 1))
        for attempt in range(100):
            h, w = _object_dims(rng, cls, size)
            if h <= s and w <= s:
                y0 = int(rng.integers(0, s - h + 1))
                x0 = int(rng.integers(0, s - w + 1))
                if not occupied[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1].any():
                    break
            if attempt % 10 == 9 and size > lo_size:
                size -= 1
        else:
            raise RuntimeError(f"scene {seed}: could not place object after 100 attempts")
        mask = _shape_mask(h, w, ellipse=bool(rng.integers(0, 2)))
        color = rng.uniform(0.75, 1.0, size=3)
        region = image[:, y0:y0 + h, x0:x0 + w]
        image[:, y0:y0 + h, x0:x0 + w] = np.where(mask[None], color[:, None, None], region)
        occupied[y0:y0 + h, x0:x0 + w] = True
        gts.append((BoundingBox((x0 + w / 2) / s, (y0 + h / 2) / s, w / s, h / s), cls))
    return SyntheticScene(np.clip(image, 0, 1).astype(np.float32), gts, seed)


def synth_scenes(seeds: Iterable[int], params: SceneParams = SceneParams()) -> list[SyntheticScene]:
    return [synth_scene(int(seed), params) for seed in seeds]


def stack_images(scenes: Sequence[SyntheticScene]) -> np.ndarray:
    return np.stack([sc.image for sc in scenes]).astype(np.float32)


# -- enhancement pairs --------------------------------------------------------

@dataclass
class EnhancerPair:
    low_res: np.ndarray   # (3, h, w) in [0, 1]
    high_res: np.ndarray  # (3, h * factor, w * factor) in [0, 1]


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsample of a (..., H, W) array by an integer factor."""
    *lead, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image size {h}x{w}")
    if factor == 1:
        return image.copy()
    return image.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1)).astype(image.dtype)


def upsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsample of a (..., H, W) array."""
    return image.repeat(factor, axis=-2).repeat(factor, axis=-1)


def make_pairs(scene: SyntheticScene, factor: int) -> tuple[EnhancerPair, list[tuple[BoundingBox, int]]]:
    pair = EnhancerPair(downsample(scene.image, factor), scene.image.copy())
    return pair, list(scene.gts)


# -- P6 images ----------------------------------------------------------------

def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    payload = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(data: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"truncated PPM header at byte {pos}")
        tokens.append((m.group(1), m.start(1)))
        pos = m.end(1)
    magic, at = tokens[0]
    if magic != b"P6":
        raise FormatError(f"bad magic {magic!r} at byte {at}, expected b'P6'")
    try:
        w, h, maxval = (int(tok) for tok, _ in tokens[1:])
    except ValueError:
        bad = next((tok, p) for tok, p in tokens[1:] if not tok.isdigit())
        raise FormatError(f"non-numeric header field {bad[0]!r} at byte {bad[1]}") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"unsupported header (w={w}, h={h}, maxval={maxval}) at byte {tokens[1][1]}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes from byte {pos}, have {len(data) - pos}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_image(path: str | os.PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# -- checkpoints --------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    lines = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr, dtype="<f4")
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name} {dims} {offset}\n")
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    return ("".join(lines) + "\n").encode("utf-8") + b"".join(chunks)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data.startswith(b"\n"):
        header, payload = b"", data[1:]
    else:
        end = data.find(b"\n\n")
        if end < 0:
            raise CheckpointError("manifest is not terminated by a blank line")
        header, payload = data[:end + 1], data[end + 2:]
    entries = []
    expected_offset = 0
    for lineno, line in enumerate(header.decode("utf-8").splitlines(), 1):
        parts = line.split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"manifest line {lineno} malformed: {line!r}")
        name, dims, off = parts
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        if int(off) != expected_offset:
            raise CheckpointError(f"manifest line {lineno}: offset {off} != expected {expected_offset}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        entries.append((name, shape, expected_offset, nbytes))
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CheckpointError(f"manifest describes {expected_offset} payload bytes, file has {len(payload)}")
    out = {}
    for name, shape, off, nbytes in entries:
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(shape)
    return out


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors (and optional JSON metadata in a ``.json`` sidecar)."""
    path = Path(path)
    _atomic_write(path, encode_checkpoint(tensors))
    if meta is not None:
        _atomic_write(path.with_suffix(path.suffix + ".json"),
                      (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def load_meta(path: str | os.PathLike) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise CheckpointError(f"checkpoint metadata {side} is missing")
    return json.loads(side.read_text())


# -- ground-truth sidecar ------------------------------------------------------

GT_COLUMNS = ["image_id", "class_id", "cx", "cy", "w", "h"]


def write_gt_csv(path: str | os.PathLike, gts_per_image: Sequence[Sequence[tuple[BoundingBox, int]]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GT_COLUMNS)
        for image_id, gts in enumerate(gts_per_image):
            for box, cls in gts:
                writer.writerow([image_id, cls, repr(box.cx), repr(box.cy), repr(box.w), repr(box.h)])


def read_gt_csv(path: str | os.PathLike, num_images: int | None = None) -> list[list[tuple[BoundingBox, int]]]:
    rows: dict[int, list[tuple[BoundingBox, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != GT_COLUMNS:
            raise FormatError(f"{path}: expected columns {GT_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            box = BoundingBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]))
            rows.setdefault(int(row["image_id"]), []).append((box, int(row["class_id"])))
    n = num_images if num_images is not None else (max(rows) + 1 if rows else 0)
    return [rows.get(i, []) for i in range(n)]
