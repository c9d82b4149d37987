"""One JSON document describing a whole pipeline run.

Example::

    {
      "seed": 7,
      "paths": {"inputs": ["flows.csv"], "workdir": "run"},
      "features": null,
      "sampling": {"fractions": {"DDoS": 1.0, "DoS": 1.0, "Others": 1.0}, "block_length": 480},
      "model": {"backbones": ["xception", "inception", "resnet"], "dtype": "float32"},
      "train": {"learning_rate": 0.0001, "epochs": 50, "batch_size": 64},
      "synth": {"counts": {"DDoS": 13413, "DoS": 11488, "Normal": 2550, "Reconnaissance": 2549}}
    }

Relative paths resolve against the directory holding the config file.
Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from flowpix.ingest import DEFAULT_BLOCK_LENGTH, DEFAULT_SAMPLE_ROWS, N_FEATURES, SamplingPlan
from flowpix.labels import ClassLabel
from flowpix.models import BackboneKind, ModelConfig
from flowpix.synth import SyntheticSpec
from flowpix.trainer import TrainConfig, TrainingError


class PipelineConfigError(ValueError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    """Fixed derivation of a per-stage seed from the top-level seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class Paths:
    inputs: list[Path] = field(default_factory=list)
    workdir: Path = Path("run")
    sampled_csv: Path | None = None
    summary: Path | None = None
    image_dir: Path | None = None
    stats: Path | None = None
    checkpoint_dir: Path | None = None
    report_dir: Path | None = None

    def resolve(self, base: Path) -> None:
        def fix(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        self.inputs = [fix(p) for p in self.inputs]
        self.workdir = fix(self.workdir)
        defaults = {"sampled_csv": "sampled.csv", "summary": "summary.json", "image_dir": "images",
                    "stats": "stats.json", "checkpoint_dir": "checkpoints", "report_dir": "reports"}
        for key, default in defaults.items():
            value = getattr(self, key)
            setattr(self, key, self.workdir / default if value is None else fix(value))


@dataclass
class ModelSection:
    backbones: list[BackboneKind] = field(default_factory=lambda: list(BackboneKind))
    base_channels: int = 8
    blocks: int = 3
    window: int = 8
    dtype: str = "float32"
    resolution: int | None = None

    def config_for(self, kind: BackboneKind, seed: int) -> ModelConfig:
        return ModelConfig(kind, self.base_channels, self.blocks, window=self.window,
                           seed=stage_seed(seed, f"model-{kind.value}"), dtype=self.dtype)


@dataclass
class SynthSection:
    counts: dict[str, int]
    mode: str = "disjoint"
    mean_run: int = 240
    output: Path | None = None

    def spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(dict(self.counts), self.mode, stage_seed(seed, "synth"), self.mean_run)


@dataclass
class ReportSection:
    format: str = "csv"
    extra_methods: list[dict] = field(default_factory=list)


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    features: list[str] | None = None
    label_column: str = "category"
    sample_rows: int | None = DEFAULT_SAMPLE_ROWS
    fractions: dict[str, float] = field(default_factory=lambda: {c.display: 1.0 for c in ClassLabel})
    block_length: int = DEFAULT_BLOCK_LENGTH
    model: ModelSection = field(default_factory=ModelSection)
    train: dict[str, Any] = field(default_factory=dict)
    evaluate_split: str = "validation"
    report: ReportSection = field(default_factory=ReportSection)
    synth: SynthSection | None = None

    def sampling_plan(self) -> SamplingPlan:
        return SamplingPlan(dict(self.fractions), self.block_length, stage_seed(self.seed, "ingest"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": stage_seed(self.seed, "train")})

    def validate(self) -> None:
        if self.features is not None and len(self.features) != N_FEATURES:
            raise PipelineConfigError(f"features must list exactly {N_FEATURES} columns, got {len(self.features)}")
        if self.evaluate_split not in ("validation", "train", "all"):
            raise PipelineConfigError(f"evaluate.split must be validation, train or all, not {self.evaluate_split!r}")
        if self.report.format not in ("csv", "json"):
            raise PipelineConfigError(f"report.format must be csv or json, not {self.report.format!r}")
        if self.model.resolution is not None:
            for kind in self.model.backbones:
                if kind.resolution != self.model.resolution:
                    raise PipelineConfigError(
                        f"resolution mismatch: images resized to {self.model.resolution} but backbone "
                        f"{kind.value} expects {kind.resolution}")
        try:
            self.sampling_plan()
            self.train_config()
            for kind in self.model.backbones:
                self.model.config_for(kind, self.seed)
            if self.synth is not None:
                self.synth.spec(self.seed)
        except (ValueError, TypeError, TrainingError) as exc:
            raise PipelineConfigError(str(exc)) from exc


def _take(doc: dict, allowed: set[str], where: str) -> dict:
    if not isinstance(doc, dict):
        raise PipelineConfigError(f"{where} must be an object")
    extra = sorted(set(doc) - allowed)
    if extra:
        raise PipelineConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")
    return doc


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def from_dict(doc: dict, base: Path | None = None) -> PipelineConfig:
    top = _take(dict(doc), {"seed", "paths", "features", "label_column", "sample_rows", "full_scan", "sampling",
                            "model", "train", "evaluate", "report", "synth"}, "config")
    cfg = PipelineConfig()
    try:
        cfg.seed = int(top.get("seed", 0))
        paths = _take(top.get("paths", {}), _names(Paths), "paths")
        cfg.paths = Paths(**{k: ([Path(p) for p in v] if k == "inputs" else (None if v is None else Path(v)))
                             for k, v in paths.items()})
        cfg.features = top.get("features")
        cfg.label_column = top.get("label_column", cfg.label_column)
        cfg.sample_rows = top.get("sample_rows", cfg.sample_rows)
        if top.get("full_scan"):
            cfg.sample_rows = None
        sampling = _take(top.get("sampling", {}), {"fractions", "block_length"}, "sampling")
        cfg.fractions.update(sampling.get("fractions", {}))
        cfg.block_length = int(sampling.get("block_length", cfg.block_length))
        model = dict(_take(top.get("model", {}), _names(ModelSection), "model"))
        if "backbones" in model:
            model["backbones"] = [BackboneKind(b) for b in model["backbones"]]
        cfg.model = ModelSection(**model)
        cfg.train = dict(_take(top.get("train", {}), _names(TrainConfig) - {"seed"}, "train"))
        cfg.evaluate_split = _take(top.get("evaluate", {}), {"split"}, "evaluate").get("split", "validation")
        cfg.report = ReportSection(**_take(top.get("report", {}), _names(ReportSection), "report"))
        if top.get("synth") is not None:
            synth = dict(_take(top["synth"], _names(SynthSection), "synth"))
            if synth.get("output") is not None:
                synth["output"] = Path(synth["output"])
            cfg.synth = SynthSection(**synth)
    except (TypeError, ValueError) as exc:
        raise PipelineConfigError(str(exc)) from exc
    cfg.paths.resolve(base or Path.cwd())
    if cfg.synth is not None:
        cfg.synth.output = cfg.synth.output if cfg.synth.output is not None else cfg.paths.workdir / "synthetic.csv"
        if not cfg.synth.output.is_absolute():
            cfg.synth.output = (base or Path.cwd()) / cfg.synth.output
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    """Read a JSON config (or start from defaults) and apply dotted-key overrides."""
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise PipelineConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise PipelineConfigError(f"config {path} is not valid JSON: {exc}") from exc
        base = path.resolve().parent
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = doc
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = from_dict(doc, base)
    cfg.validate()
    return cfg
