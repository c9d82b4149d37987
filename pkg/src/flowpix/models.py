"""Micro CNN backbones with an LSTM(64) head and a 3-way softmax.

Each backbone maps one image to a D-vector by global average pooling. A
window of T consecutive images becomes T feature vectors that the LSTM reads
in order; the class probabilities come from the final hidden state.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from flowpix.labels import NUM_CLASSES, ClassLabel
from flowpix.nn import checkpoint, ops
from flowpix.nn.layers import (LSTM, BatchNorm, Conv2D, Dense, InceptionBlock, LstmState, Module,
                               ResidualBlock, XceptionBlock)
from flowpix.nn.tensor import Parameter, Tensor, no_grad

LSTM_UNITS = 64


class BackboneKind(str, Enum):
    XCEPTION = "xception"
    INCEPTION = "inception"
    RESNET = "resnet"

    @property
    def resolution(self) -> int:
        return _RESOLUTION[self]

    @property
    def display(self) -> str:
        return {"xception": "Xception + LSTM", "inception": "Inception + LSTM", "resnet": "Resnet + LSTM"}[self.value]


_RESOLUTION = {BackboneKind.XCEPTION: 71, BackboneKind.INCEPTION: 75, BackboneKind.RESNET: 32}


class ConfigError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneKind
    base_channels: int = 8
    blocks: int = 3
    lstm_units: int = LSTM_UNITS
    num_classes: int = NUM_CLASSES
    window: int = 8
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "backbone", BackboneKind(self.backbone))
        bad = []
        if self.base_channels < 1:
            bad.append("base_channels")
        if self.blocks < 1:
            bad.append("blocks")
        if self.lstm_units != LSTM_UNITS:
            bad.append("lstm_units")
        if self.num_classes != NUM_CLASSES:
            bad.append("num_classes")
        if self.window < 1:
            bad.append("window")
        if self.dtype not in ("float64", "float32"):
            bad.append("dtype")
        if bad:
            raise ConfigError(f"invalid model config field(s): {', '.join(bad)}")

    @property
    def resolution(self) -> int:
        return self.backbone.resolution

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.value
        return d


class ModelGraph(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        c, kind = config.base_channels, config.backbone
        layers: list[Module] = []
        if kind is BackboneKind.XCEPTION:
            layers += [Conv2D("stem", 3, c, 3, rng, 2, "valid", bias=False, dtype=dtype), BatchNorm("stem.bn", c, dtype)]
            c_in = c
            for i in range(config.blocks):
                c_out = c * 2 ** i
                layers.append(XceptionBlock(f"block{i}", c_in, c_out, rng, 2, dtype))
                c_in = c_out
        elif kind is BackboneKind.INCEPTION:
            layers += [Conv2D("stem", 3, c, 3, rng, 2, "valid", bias=False, dtype=dtype), BatchNorm("stem.bn", c, dtype)]
            c_in = c
            for i in range(config.blocks):
                block = InceptionBlock(f"block{i}", c_in, c, rng, 2, dtype)
                layers.append(block)
                c_in = block.out_channels
        else:
            layers += [Conv2D("stem", 3, c, 3, rng, 2, "same", bias=False, dtype=dtype), BatchNorm("stem.bn", c, dtype)]
            c_in = c
            for i in range(config.blocks):
                c_out = c * 2 ** i
                layers.append(ResidualBlock(f"block{i}", c_in, c_out, rng, 1 if i == 0 else 2, dtype))
                c_in = c_out
        self.backbone = layers
        self.feature_dim = c_in
        self.lstm = LSTM("lstm", c_in, config.lstm_units, rng, dtype)
        self.head = Dense("head", config.lstm_units, config.num_classes, rng, dtype)
        self._params = list(self.parameters())
        names = [p.name for p in self._params]
        assert len(names) == len(set(names)), "duplicate parameter names"

    @property
    def expected_resolution(self) -> int:
        return self.config.resolution

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def params(self) -> list[Parameter]:
        return self._params

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params if p.trainable]

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self._params if p.trainable or not trainable_only)

    def check_resolution(self, images: np.ndarray) -> None:
        r = self.expected_resolution
        if images.ndim != 4 or images.shape[1:] != (r, r, 3):
            raise ResolutionError(
                f"{self.config.backbone.value} expects images of shape (*, {r}, {r}, 3), got {tuple(images.shape)}")

    def features(self, images) -> Tensor:
        """Backbone over a batch of images -> (N, D) feature tensor."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        self.check_resolution(x.data)
        stem, stem_bn, *blocks = self.backbone
        x = ops.relu(stem_bn(stem(x)))
        for block in blocks:
            x = block(x)
        return ops.global_avg_pool(x)

    def run_lstm(self, feats: Tensor, windows: np.ndarray, state: LstmState | None = None):
        """Read ``feats[windows[:, t]]`` for t = 0..T-1 through the LSTM.

        Returns (logits, final state).
        """
        windows = np.asarray(windows, dtype=np.intp)
        if windows.ndim != 2:
            raise ValueError("windows must be a (batch, T) index array")
        if state is None:
            state = LstmState.zeros(windows.shape[0], self.config.lstm_units, self.dtype)
        for t in range(windows.shape[1]):
            _, state = self.lstm.step(ops.take(feats, windows[:, t]), state)
        return self.head(state.hidden), state

    def forward_windows(self, images, windows: np.ndarray, state: LstmState | None = None):
        """Class probabilities for each row of ``windows`` (indices into ``images``)."""
        logits, state = self.run_lstm(self.features(images), windows, state)
        return ops.softmax(logits), state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self._params:
            p.data[...] = state[p.name]


def build_model(config: ModelConfig) -> ModelGraph:
    return ModelGraph(config)


def forward_window(model: ModelGraph, window: np.ndarray,
                   initial_state: LstmState | None = None) -> tuple[np.ndarray, LstmState]:
    """Probabilities for one window of T resized images, plus the final LSTM state."""
    window = np.asarray(window)
    if window.ndim != 4 or window.shape[0] != model.config.window:
        raise ValueError(f"window must hold {model.config.window} images, got shape {window.shape}")
    with no_grad():
        probs, state = model.forward_windows(window, np.arange(window.shape[0])[None, :], initial_state)
    return probs.data[0], state


def window_label(labels: Sequence[int]) -> int:
    """Majority class of a window; among tied classes the one seen latest wins."""
    arr = np.asarray(labels, dtype=np.intp)
    counts = np.bincount(arr, minlength=NUM_CLASSES)
    top = set(np.flatnonzero(counts == counts.max()).tolist())
    for label in arr[::-1]:
        if int(label) in top:
            return int(label)
    raise AssertionError("unreachable")


def stream_windows(n: int, window: int) -> list[np.ndarray]:
    """Sliding windows ending at each image; the first ``window - 1`` images get prefix windows."""
    return [np.arange(max(0, i - window + 1), i + 1) for i in range(n)]


def predict_proba_stream(model: ModelGraph, images: np.ndarray, stateful: bool = False,
                         chunk: int = 256) -> np.ndarray:
    """Per-image class probabilities over an ordered image stream, shape (N, 3)."""
    images = np.asarray(images)
    n = len(images)
    if n == 0:
        return np.zeros((0, model.config.num_classes))
    model.check_resolution(images)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            feats = Tensor(np.concatenate([model.features(images[i:i + chunk]).data for i in range(0, n, chunk)]))
            if stateful:
                out = np.empty((n, model.config.num_classes), dtype=model.dtype)
                state = LstmState.zeros(1, model.config.lstm_units, model.dtype)
                for i in range(n):
                    logits, state = model.run_lstm(feats, np.array([[i]]), state)
                    out[i] = ops.softmax(logits).data[0]
                return out
            return _stateless(model, feats, n)
    finally:
        model.train(was_training)


def _stateless(model: ModelGraph, feats: Tensor, n: int) -> np.ndarray:
    t = model.config.window
    out = np.empty((n, model.config.num_classes), dtype=model.dtype)
    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(stream_windows(n, t)):
        by_len.setdefault(len(w), []).append(i)
    for length, ends in by_len.items():
        ends_arr = np.asarray(ends)
        windows = ends_arr[:, None] - length + 1 + np.arange(length)[None, :]
        logits, _ = model.run_lstm(feats, windows)
        out[ends_arr] = ops.softmax(logits).data
    return out


def predict_stream(model: ModelGraph, images: np.ndarray, stateful: bool = False) -> list[ClassLabel]:
    """One predicted label per image of an ordered stream."""
    probs = predict_proba_stream(model, images, stateful)
    return [ClassLabel(int(k)) for k in probs.argmax(axis=1)]


def save_model(model: ModelGraph, directory: str | Path, stem: str) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (config + parameter shapes) and ``<stem>.ckpt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "flowpix-model",
        "version": 1,
        "config": model.config.to_dict(),
        "feature_dim": model.feature_dim,
        "parameters": [{"name": p.name, "shape": list(p.data.shape), "trainable": p.trainable}
                       for p in model.params()],
    }
    json_path, ckpt_path = directory / f"{stem}.json", directory / f"{stem}.ckpt"
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    checkpoint.save(ckpt_path, model.params())
    return json_path, ckpt_path


def load_model(json_path: str | Path, ckpt_path: str | Path | None = None) -> ModelGraph:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text())
    if meta.get("format") != "flowpix-model":
        raise checkpoint.CheckpointError(f"{json_path} is not a flowpix model description")
    model = build_model(ModelConfig(**meta["config"]))
    ckpt_path = Path(ckpt_path) if ckpt_path else json_path.with_suffix(".ckpt")
    checkpoint.load_into(ckpt_path, model.params())
    return model
