"""Class weighting, chronological splits, the training loop and model ranking."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from flowpix.evaluate import confusion_matrix, per_class_metrics
from flowpix.featurize import bilinear_resize
from flowpix.labels import NUM_CLASSES, ClassLabel
from flowpix.models import BackboneKind, ModelGraph, predict_proba_stream, save_model, window_label
from flowpix.nn import ops
from flowpix.nn.ops import LOG_FLOOR
from flowpix.nn.optim import make_optimizer
from flowpix.nn.tensor import backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- class weights ------------------------------------------------------------

@dataclass(frozen=True)
class ClassWeights:
    weights: dict[ClassLabel, float]
    counts: dict[ClassLabel, int]

    def __getitem__(self, label: ClassLabel) -> float:
        return self.weights[ClassLabel(label)]

    def exact(self, label: ClassLabel) -> Fraction:
        return Fraction(sum(self.counts.values()), self.counts[ClassLabel(label)])

    def as_array(self) -> np.ndarray:
        return np.array([self.weights[c] for c in ClassLabel])

    def to_dict(self) -> dict[str, float]:
        return {c.display: self.weights[c] for c in ClassLabel}


def compute_class_weights(image_counts: Mapping[ClassLabel, int]) -> ClassWeights:
    """Inverse-frequency weights: total / count for each class."""
    counts = {ClassLabel(k): int(v) for k, v in image_counts.items()}
    for label in ClassLabel:
        if counts.get(label, 0) <= 0:
            raise TrainingError(f"class {label.display} has no images; cannot weight it")
    total = sum(counts.values())
    return ClassWeights({c: total / n for c, n in counts.items()}, counts)


# -- splitting ----------------------------------------------------------------

ImageSet = dict  # ClassLabel -> (pixels (N,16,16,3) uint8, first_seq_index (N,))


def validation_size(n: int, fraction: float) -> int:
    """Chronological tail size: ceil(fraction * n), leaving at least one training image."""
    return min(n - 1, math.ceil(fraction * n))


def split_train_validation(images: Mapping[ClassLabel, tuple[np.ndarray, np.ndarray]],
                           fraction: float) -> tuple[ImageSet, ImageSet]:
    """Per class, the last ``ceil(fraction * n)`` images (in stream order) form validation."""
    if not 0 < fraction < 1:
        raise TrainingError(f"validation fraction must lie in (0, 1), got {fraction}")
    train, val = {}, {}
    for label, (pixels, seq) in images.items():
        n = len(pixels)
        if n < 2:
            raise TrainingError(f"class {ClassLabel(label).display} has {n} image(s); at least 2 are needed to split")
        k = n - validation_size(n, fraction)
        train[label] = (pixels[:k], seq[:k])
        val[label] = (pixels[k:], seq[k:])
    return train, val


# -- configuration and report -------------------------------------------------

SELECTION_METRICS = ("accuracy", "f1", "both")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 64
    validation_fraction: float = 0.2
    seed: int = 0
    selection_metric: str = "both"
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise TrainingError("validation_fraction must lie in (0, 1)")
        if self.selection_metric not in SELECTION_METRICS:
            raise TrainingError(f"selection_metric must be one of {SELECTION_METRICS}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    train_f1: float
    val_loss: float
    val_accuracy: float
    val_f1: float


@dataclass
class TrainReport:
    backbone: str
    epochs: list[EpochRecord]
    best_epoch: int
    selection_metric: str
    checkpoint: str | None
    class_weights: dict[str, float]
    best_confusion: list[list[int]] = field(default_factory=list)

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def to_dict(self) -> dict:
        b = self.best
        return {
            "format": "flowpix-train-report",
            "version": 1,
            "backbone": self.backbone,
            "selection_metric": self.selection_metric,
            "best_epoch": self.best_epoch,
            "best_train_accuracy": b.train_accuracy,
            "best_train_f1": b.train_f1,
            "best_val_accuracy": b.val_accuracy,
            "best_val_f1": b.val_f1,
            "best_val_confusion": self.best_confusion,
            "checkpoint": self.checkpoint,
            "class_weights": self.class_weights,
            "epochs": {k: [getattr(e, k) for e in self.epochs] for k in EpochRecord.__dataclass_fields__},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainReport":
        if doc.get("format") != "flowpix-train-report":
            raise TrainingError("not a flowpix train report")
        cols = doc["epochs"]
        n = len(cols["epoch"])
        epochs = [EpochRecord(**{k: cols[k][i] for k in EpochRecord.__dataclass_fields__}) for i in range(n)]
        return cls(doc["backbone"], epochs, doc["best_epoch"], doc["selection_metric"], doc["checkpoint"],
                   doc["class_weights"], doc.get("best_val_confusion", []))


# -- data preparation ---------------------------------------------------------

@dataclass
class Streams:
    """Resized images of several class streams, concatenated in class order."""

    images: np.ndarray
    labels: np.ndarray
    bounds: list[tuple[int, int]]

    @classmethod
    def from_set(cls, image_set: Mapping[ClassLabel, tuple[np.ndarray, np.ndarray]], resolution: int,
                 dtype=np.float64) -> "Streams":
        parts, labels, bounds, start = [], [], [], 0
        for label in ClassLabel:
            if label not in image_set:
                continue
            pixels = image_set[label][0]
            parts.append(bilinear_resize(pixels, resolution).astype(dtype))
            labels.append(np.full(len(pixels), int(label)))
            bounds.append((start, start + len(pixels)))
            start += len(pixels)
        return cls(np.concatenate(parts), np.concatenate(labels), bounds)

    def windows(self, length: int) -> np.ndarray:
        """All full sliding windows (stride 1) inside each class stream, as global indices."""
        out = []
        for lo, hi in self.bounds:
            if hi - lo < length:
                raise TrainingError(f"a class stream holds {hi - lo} training images, fewer than the window ({length})")
            starts = np.arange(lo, hi - length + 1)
            out.append(starts[:, None] + np.arange(length)[None, :])
        return np.concatenate(out)


def window_labels(windows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.array([window_label(labels[w]) for w in windows], dtype=np.intp)


def evaluate_streams(model: ModelGraph, streams: Streams, weights: np.ndarray):
    """Per-image stateless predictions over each class stream.

    Returns (predictions, weighted loss, probabilities).
    """
    probs = np.concatenate([predict_proba_stream(model, streams.images[lo:hi]) for lo, hi in streams.bounds])
    idx = np.arange(len(probs))
    p_true = np.maximum(probs[idx, streams.labels], LOG_FLOOR)
    loss = float(np.mean(-weights[streams.labels] * np.log(p_true)))
    return probs.argmax(axis=1), loss, probs


def _score(rec: EpochRecord, metric: str) -> float:
    if metric == "accuracy":
        return rec.val_accuracy
    if metric == "f1":
        return rec.val_f1
    return rec.val_accuracy + rec.val_f1


def train(model: ModelGraph, train_set, val_set, weights: ClassWeights, config: TrainConfig,
          checkpoint_dir: str | Path | None = None, progress=None) -> TrainReport:
    """Train for ``config.epochs`` epochs and keep the best validation epoch.

    Each mini-batch holds ``batch_size`` windows of ``model.config.window``
    consecutive images from one class stream; the backbone runs once per
    distinct image in the batch. Whenever the selection score improves, the
    model is checkpointed to ``checkpoint_dir/<backbone>``.
    """
    res = model.expected_resolution
    tr = Streams.from_set(train_set, res, model.dtype)
    va = Streams.from_set(val_set, res, model.dtype)
    w = weights.as_array()
    windows = tr.windows(model.config.window)
    win_labels = window_labels(windows, tr.labels)
    one_hot = np.eye(NUM_CLASSES)[win_labels]
    opt = make_optimizer(config.optimizer, model.params(), config.learning_rate)
    rng = np.random.default_rng(config.seed)
    kind = model.config.backbone.value
    records: list[EpochRecord] = []
    best_epoch, best_score, best_cm = 0, -math.inf, []
    ckpt_path = None

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(windows))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            sel = order[start:start + config.batch_size]
            batch = windows[sel]
            uniq, local = np.unique(batch, return_inverse=True)
            local = local.reshape(batch.shape)
            feats = model.features(tr.images[uniq])
            logits, _ = model.run_lstm(feats, local)
            probs = ops.softmax(logits)
            loss = ops.weighted_cross_entropy(probs, one_hot[sel], w[win_labels[sel]])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss, model.params())
            opt.step()
            losses.append(value)

        train_pred, _, _ = evaluate_streams(model, tr, w)
        val_pred, val_loss, _ = evaluate_streams(model, va, w)
        tm = per_class_metrics(confusion_matrix(train_pred, tr.labels))
        vcm = confusion_matrix(val_pred, va.labels)
        vm = per_class_metrics(vcm)
        rec = EpochRecord(epoch, float(np.mean(losses)), tm.accuracy, tm.weighted_f1,
                          val_loss, vm.accuracy, vm.weighted_f1)
        records.append(rec)
        score = _score(rec, config.selection_metric)
        if score > best_score:
            best_epoch, best_score, best_cm = epoch, score, vcm.to_list()
            if checkpoint_dir is not None:
                _, ckpt_path = save_model(model, checkpoint_dir, kind)
        log.info("%s epoch %d: loss %.4f train acc %.4f val acc %.4f val f1 %.4f",
                 kind, epoch, rec.train_loss, rec.train_accuracy, rec.val_accuracy, rec.val_f1)
        if progress is not None:
            progress(rec)

    return TrainReport(kind, records, best_epoch, config.selection_metric,
                       str(ckpt_path) if ckpt_path is not None else None, weights.to_dict(), best_cm)


# -- model comparison ---------------------------------------------------------

COMPARISON_HEADER = ("model", "train_acc", "train_f1", "val_acc", "val_f1")


def compare_models(reports: Mapping[str, TrainReport] | Sequence[TrainReport]) -> list[TrainReport]:
    """Rank by validation accuracy, then validation F1, then declaration order."""
    items = list(reports.values()) if isinstance(reports, Mapping) else list(reports)
    order = sorted(range(len(items)), key=lambda i: (-items[i].best.val_accuracy, -items[i].best.val_f1, i))
    return [items[i] for i in order]


def comparison_csv(ranked: Sequence[TrainReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_HEADER)
    for r in ranked:
        b = r.best
        name = BackboneKind(r.backbone).display if r.backbone in BackboneKind._value2member_map_ else r.backbone
        writer.writerow([name, repr(b.train_accuracy), repr(b.train_f1), repr(b.val_accuracy), repr(b.val_f1)])
    return buf.getvalue()
