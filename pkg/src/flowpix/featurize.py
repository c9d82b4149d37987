"""Min-max scaling, byte packing of 48-record windows into 16x16x3 images, and
bilinear resizing to backbone resolutions.

Image layout: for image ``k`` of a class stream, pixel ``(row r, column j,
channel c)`` holds feature ``j`` of record ``48k + 16c + r``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from flowpix.labels import ClassLabel

log = logging.getLogger(__name__)

SIDE = 16
CHANNELS = 3
RECORDS_PER_IMAGE = SIDE * CHANNELS
SUPPORTED_RESOLUTIONS = (16, 32, 71, 75)


class FeaturizeError(ValueError):
    pass


@dataclass
class NormalizationStats:
    names: list[str]
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if not (len(self.names) == self.minimum.size == self.maximum.size):
            raise FeaturizeError("names, minimum and maximum must have equal length")
        if np.any(self.minimum > self.maximum):
            raise FeaturizeError("minimum exceeds maximum for some feature")

    def to_json(self) -> str:
        doc = {
            "format": "flowpix-normalization",
            "version": 1,
            "features": {n: {"min": float(lo), "max": float(hi)}
                         for n, lo, hi in zip(self.names, self.minimum, self.maximum)},
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        try:
            doc = json.loads(text)
            if doc.get("format") != "flowpix-normalization" or doc.get("version") != 1:
                raise FeaturizeError("not a flowpix normalization file")
            feats = doc["features"]
            return cls(list(feats), [feats[n]["min"] for n in feats], [feats[n]["max"] for n in feats])
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise FeaturizeError(f"malformed normalization stats: {exc}") from exc


def _chunks(stream) -> Iterator[np.ndarray]:
    if isinstance(stream, np.ndarray):
        yield np.atleast_2d(stream)
        return
    for item in stream:
        if hasattr(item, "features"):
            yield np.atleast_2d(np.asarray(item.features, dtype=np.float64))
        else:
            yield np.atleast_2d(np.asarray(item, dtype=np.float64))


def fit_min_max(train_records, names: Sequence[str] | None = None) -> NormalizationStats:
    """Exact per-feature extrema over a record stream (array, FlowRecords or chunks)."""
    lo = hi = None
    for chunk in _chunks(train_records):
        if chunk.size == 0:
            continue
        cmin, cmax = chunk.min(axis=0), chunk.max(axis=0)
        lo = cmin if lo is None else np.minimum(lo, cmin)
        hi = cmax if hi is None else np.maximum(hi, cmax)
    if lo is None:
        raise FeaturizeError("cannot fit normalization on an empty stream")
    if names is None:
        names = [f"f{i}" for i in range(lo.size)]
    return NormalizationStats(list(names), lo, hi)


def normalize(features: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Min-max scale into [0, 1]; constant features map to 0, out-of-range values clamp."""
    x = np.asarray(features, dtype=np.float64)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - stats.minimum) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def scale_to_byte(normalized) -> np.ndarray:
    """round(255 * x) with ties to even. Inputs must already lie in [0, 1]."""
    x = np.asarray(normalized, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise FeaturizeError("scale_to_byte expects values in [0, 1]; clamp first")
    out = np.rint(255.0 * x).astype(np.uint8)
    return out if out.ndim else out[()]


@dataclass
class ImageTensor:
    pixels: np.ndarray
    label: ClassLabel
    first_seq_index: int


def pack_block(block: np.ndarray) -> np.ndarray:
    """(48, 16) byte records -> (16, 16, 3) image."""
    return block.reshape(CHANNELS, SIDE, SIDE).transpose(1, 2, 0)


def iter_images(chunks: Iterable[tuple[np.ndarray, np.ndarray]], label: ClassLabel) -> Iterator[ImageTensor]:
    """Stream images from ``(normalized features, seq_index)`` chunks of one class.

    Records are consumed in runs of 48; a trailing partial run is dropped.
    """
    pending_x = np.empty((0, SIDE), dtype=np.uint8)
    pending_s = np.empty(0, dtype=np.int64)
    emitted = 0
    total = 0
    for feats, seq in chunks:
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != SIDE:
            raise FeaturizeError(f"expected records with {SIDE} features, got shape {feats.shape}")
        total += len(feats)
        x = np.concatenate([pending_x, scale_to_byte(feats)])
        s = np.concatenate([pending_s, np.asarray(seq, dtype=np.int64)])
        full = len(x) // RECORDS_PER_IMAGE
        if full:
            blocks = x[:full * RECORDS_PER_IMAGE].reshape(full, CHANNELS, SIDE, SIDE).transpose(0, 2, 3, 1)
            firsts = s[:full * RECORDS_PER_IMAGE:RECORDS_PER_IMAGE]
            for img, first in zip(blocks, firsts):
                yield ImageTensor(np.ascontiguousarray(img), label, int(first))
            emitted += full
        pending_x = x[full * RECORDS_PER_IMAGE:]
        pending_s = s[full * RECORDS_PER_IMAGE:]
    if emitted == 0:
        log.warning("class %s: only %d records, fewer than %d needed for one image",
                    label.display, total, RECORDS_PER_IMAGE)


def build_images(normalized: np.ndarray, label: ClassLabel,
                 seq_index: np.ndarray | None = None) -> list[ImageTensor]:
    normalized = np.asarray(normalized, dtype=np.float64).reshape(-1, SIDE)
    if seq_index is None:
        seq_index = np.arange(len(normalized))
    return list(iter_images([(normalized, seq_index)], label))


def count_images(n_records: int) -> int:
    return n_records // RECORDS_PER_IMAGE


# -- bilinear resize ----------------------------------------------------------

def _axis_map(n_in: int, n_out: int):
    """Half-pixel-centre source coordinates: lower index, upper index, weight."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(image, target: int) -> np.ndarray:
    """Resize (…, H, W, C) byte images to ``target`` x ``target`` floats in [0, 1].

    Each output pixel is ``lerp(lerp(p00, p01, wx), lerp(p10, p11, wx), wy) / 255``
    with ``lerp(a, b, w) = a + w * (b - a)``.
    """
    if target not in SUPPORTED_RESOLUTIONS:
        raise FeaturizeError(f"unsupported resize target {target}; expected one of {SUPPORTED_RESOLUTIONS}")
    pixels = image.pixels if isinstance(image, ImageTensor) else image
    a = np.asarray(pixels, dtype=np.float64)
    h, w = a.shape[-3], a.shape[-2]
    y0, y1, wy = _axis_map(h, target)
    x0, x1, wx = _axis_map(w, target)
    wx = wx[:, None]
    top0, top1 = a[..., y0, :, :][..., x0, :], a[..., y0, :, :][..., x1, :]
    bot0, bot1 = a[..., y1, :, :][..., x0, :], a[..., y1, :, :][..., x1, :]
    top = top0 + wx * (top1 - top0)
    bottom = bot0 + wx * (bot1 - bot0)
    out = top + wy[:, None, None] * (bottom - top)
    return out / 255.0


# -- image store --------------------------------------------------------------

IMAGE_MAGIC = b"FPIM"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sHIHHH")


def image_file(directory: Path, label: ClassLabel) -> Path:
    return Path(directory) / f"{label.display.lower()}.img"


def index_file(directory: Path, label: ClassLabel) -> Path:
    return Path(directory) / f"{label.display.lower()}.idx"


class ImageSetWriter:
    """Append images of one class to ``<class>.img`` and their first seq index to ``<class>.idx``."""

    def __init__(self, directory: str | Path, label: ClassLabel):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.count = 0
        self._img = open(image_file(directory, label), "wb")
        self._idx = open(index_file(directory, label), "w", newline="\n")
        self._img.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, 0, SIDE, SIDE, CHANNELS))

    def write(self, image: ImageTensor) -> None:
        if image.pixels.shape != (SIDE, SIDE, CHANNELS) or image.pixels.dtype != np.uint8:
            raise FeaturizeError(f"image must be uint8 {SIDE}x{SIDE}x{CHANNELS}")
        self._img.write(image.pixels.tobytes())
        self._idx.write(f"{image.first_seq_index}\n")
        self.count += 1

    def close(self) -> None:
        self._img.seek(0)
        self._img.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, self.count, SIDE, SIDE, CHANNELS))
        self._img.close()
        self._idx.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_image_set(directory: str | Path, label: ClassLabel) -> tuple[np.ndarray, np.ndarray]:
    """Return (pixels (N, 16, 16, 3) uint8, first_seq_index (N,))."""
    path = image_file(Path(directory), label)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeaturizeError(f"{path}: truncated header")
    magic, version, count, h, w, c = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC or version != IMAGE_VERSION:
        raise FeaturizeError(f"{path}: not a flowpix image file (magic {magic!r}, version {version})")
    size = h * w * c
    body = raw[_HEADER.size:]
    if len(body) != count * size:
        raise FeaturizeError(f"{path}: expected {count} images, payload holds {len(body) / size:.2f}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, h, w, c)
    idx_text = index_file(Path(directory), label).read_text().split()
    seq = np.array([int(v) for v in idx_text], dtype=np.int64)
    if len(seq) != count:
        raise FeaturizeError(f"{path}: index lists {len(seq)} entries for {count} images")
    return pixels, seq


def read_image_store(directory: str | Path) -> dict[ClassLabel, tuple[np.ndarray, np.ndarray]]:
    return {label: read_image_set(directory, label) for label in ClassLabel}
