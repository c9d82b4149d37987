"""Pipeline stages: synth, ingest, featurize, train, evaluate, report.

Every stage reads only artifacts written by earlier stages, validates their
format headers first, and writes its outputs deterministically (no
timestamps, no absolute paths) so repeated runs are byte-identical.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from flowpix.config import PipelineConfig, PipelineConfigError
from flowpix.evaluate import confusion_matrix, evaluation_document, export_comparison
from flowpix.featurize import (FeaturizeError, ImageSetWriter, NormalizationStats, fit_min_max, iter_images,
                               normalize, read_image_store, RECORDS_PER_IMAGE)
from flowpix.ingest import ingest_files, subsample_preserving_sequence, summarize, write_sampled_csv
from flowpix.labels import ClassLabel
from flowpix.models import build_model, load_model
from flowpix.synth import write_synthetic_csv
from flowpix.trainer import (Streams, TrainReport, compare_models, comparison_csv, compute_class_weights,
                             evaluate_streams, split_train_validation, train, validation_size)

log = logging.getLogger(__name__)

SUMMARY_FORMAT = "flowpix-ingest-summary"
MANIFEST_FORMAT = "flowpix-image-manifest"
CHUNK_ROWS = 4096

Echo = Callable[[str], None]


class DataError(RuntimeError):
    """Missing, unreadable or inconsistent pipeline artifacts."""


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _read_json(path: Path, fmt: str, stage: str) -> dict:
    if not path.exists():
        raise DataError(f"{path} not found; run `flowpix {stage}` first")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != fmt or doc.get("version") != 1:
        raise DataError(f"{path} is not a {fmt} v1 document")
    return doc


def _rel(path: Path, root: Path) -> str:
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.name


# -- synth --------------------------------------------------------------------

def run_synth(cfg: PipelineConfig, echo: Echo = print) -> Path:
    if cfg.synth is None:
        raise PipelineConfigError("no synth section in the configuration")
    spec = cfg.synth.spec(cfg.seed)
    n = write_synthetic_csv(spec, cfg.synth.output)
    echo(f"synth: wrote {n} records to {cfg.synth.output}")
    return cfg.synth.output


# -- ingest -------------------------------------------------------------------

def run_ingest(cfg: PipelineConfig, echo: Echo = print) -> dict:
    inputs = cfg.paths.inputs
    if not inputs and cfg.synth is not None:
        inputs = [cfg.synth.output]
    if not inputs:
        raise PipelineConfigError("no input CSV files configured (paths.inputs)")
    for p in inputs:
        if not p.is_file():
            raise DataError(f"input {p} is missing or unreadable")
    result = ingest_files(inputs, cfg.label_column, cfg.features, cfg.sample_rows)
    if len(result.table) == 0:
        raise DataError("no usable records in the inputs")
    sampled = subsample_preserving_sequence(result.table, cfg.sampling_plan())
    out = cfg.paths.sampled_csv
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sampled_csv(inputs, sampled.seq_index, result.kept_columns, out)
    summary = summarize(sampled)
    doc = {
        "format": SUMMARY_FORMAT,
        "version": 1,
        "label_column": cfg.label_column,
        "features": result.features,
        "kept_columns": result.kept_columns,
        "dropped_columns": result.dropped_columns,
        "rows_read": result.rows,
        "excluded_rows": result.excluded,
        "malformed_rows": result.row_errors,
        "input": summarize(result.table).to_dict(),
        "sampled": summary.to_dict(),
    }
    _write_json(cfg.paths.summary, doc)
    echo(json.dumps(summary.to_dict(), indent=2))
    return doc


# -- featurize ----------------------------------------------------------------

def _check_stats_file(path: Path, force: bool) -> None:
    if not path.exists() or force:
        return
    try:
        NormalizationStats.from_json(path.read_text())
    except (FeaturizeError, UnicodeDecodeError) as exc:
        raise DataError(f"existing stats file {path} is corrupt ({exc}); re-run with --force to replace it") from exc


def run_featurize(cfg: PipelineConfig, force: bool = False, echo: Echo = print) -> dict[str, int]:
    summary = _read_json(cfg.paths.summary, SUMMARY_FORMAT, "ingest")
    sampled = cfg.paths.sampled_csv
    if not sampled.is_file():
        raise DataError(f"sampled dataset {sampled} not found; run `flowpix ingest` first")
    _check_stats_file(cfg.paths.stats, force)
    result = ingest_files([sampled], summary["label_column"], summary["features"], cfg.sample_rows)
    table = result.table
    vf = cfg.train_config().validation_fraction

    streams = {c: table.class_stream(c) for c in ClassLabel}
    train_parts = []
    for label, stream in streams.items():
        n_img = len(stream) // RECORDS_PER_IMAGE
        if n_img < 2:
            raise DataError(f"class {label.display} yields {n_img} image(s); at least 2 are needed")
        n_train = (n_img - validation_size(n_img, vf)) * RECORDS_PER_IMAGE
        train_parts.append(stream.features[:n_train])
    stats = fit_min_max(np.concatenate(train_parts), summary["features"])
    cfg.paths.stats.parent.mkdir(parents=True, exist_ok=True)
    cfg.paths.stats.write_text(stats.to_json())

    def encode(label: ClassLabel) -> int:
        stream = streams[label]
        chunks = ((normalize(stream.features[i:i + CHUNK_ROWS], stats), stream.seq_index[i:i + CHUNK_ROWS])
                  for i in range(0, len(stream), CHUNK_ROWS))
        with ImageSetWriter(cfg.paths.image_dir, label) as writer:
            for image in iter_images(chunks, label):
                writer.write(image)
        return writer.count

    with ThreadPoolExecutor(max_workers=len(ClassLabel)) as pool:
        counts = dict(zip((c.display for c in ClassLabel), pool.map(encode, ClassLabel)))
    _write_json(cfg.paths.image_dir / "manifest.json",
                {"format": MANIFEST_FORMAT, "version": 1, "counts": counts, "features": summary["features"]})
    for name, n in counts.items():
        echo(f"featurize: {name}: {n} images")
    return counts


# -- train --------------------------------------------------------------------

def _load_store(cfg: PipelineConfig):
    manifest = _read_json(cfg.paths.image_dir / "manifest.json", MANIFEST_FORMAT, "featurize")
    try:
        store = read_image_store(cfg.paths.image_dir)
    except (OSError, FeaturizeError) as exc:
        raise DataError(f"image store {cfg.paths.image_dir}: {exc}") from exc
    found = {c.display: len(store[c][0]) for c in ClassLabel}
    if found != manifest["counts"]:
        raise DataError(f"image store holds {found}, manifest lists {manifest['counts']}")
    return store


def run_train(cfg: PipelineConfig, echo: Echo = print) -> dict[str, TrainReport]:
    store = _load_store(cfg)
    tc = cfg.train_config()
    train_set, val_set = split_train_validation(store, tc.validation_fraction)
    weights = compute_class_weights({c: len(store[c][0]) for c in ClassLabel})
    reports = {}
    for kind in cfg.model.backbones:
        model = build_model(cfg.model.config_for(kind, cfg.seed))
        echo(f"train: {kind.display} ({model.parameter_count()} parameters, {kind.resolution}x{kind.resolution})")
        report = train(model, train_set, val_set, weights, tc, cfg.paths.checkpoint_dir,
                       progress=lambda r: log.info("epoch %d val_acc %.4f", r.epoch, r.val_accuracy))
        if report.checkpoint is not None:
            report.checkpoint = _rel(Path(report.checkpoint), cfg.paths.workdir)
        _write_json(cfg.paths.report_dir / f"train_{kind.value}.json", report.to_dict())
        b = report.best
        echo(f"  best epoch {report.best_epoch}: train acc {b.train_accuracy:.4f} f1 {b.train_f1:.4f} | "
             f"val acc {b.val_accuracy:.4f} f1 {b.val_f1:.4f}")
        reports[kind.value] = report
    return reports


# -- evaluate -----------------------------------------------------------------

def _eval_set(cfg: PipelineConfig, store):
    if cfg.evaluate_split == "all":
        return store
    train_set, val_set = split_train_validation(store, cfg.train_config().validation_fraction)
    return val_set if cfg.evaluate_split == "validation" else train_set


def run_evaluate(cfg: PipelineConfig, echo: Echo = print) -> dict[str, dict]:
    store = _load_store(cfg)
    images = _eval_set(cfg, store)
    weights = compute_class_weights({c: len(store[c][0]) for c in ClassLabel}).as_array()
    docs = {}
    for kind in cfg.model.backbones:
        meta_path = cfg.paths.checkpoint_dir / f"{kind.value}.json"
        meta = _read_json(meta_path, "flowpix-model", "train")
        stored = meta["config"]["backbone"]
        if stored != kind.value:
            raise PipelineConfigError(f"backbone mismatch: requested {kind.value}, checkpoint {meta_path} holds {stored}")
        model = load_model(meta_path)
        streams = Streams.from_set(images, model.expected_resolution, model.dtype)
        pred, loss, _ = evaluate_streams(model, streams, weights)
        matrix = confusion_matrix(pred, streams.labels)
        doc = evaluation_document(matrix)
        doc.update({"backbone": kind.value, "split": cfg.evaluate_split, "loss": loss})
        _write_json(cfg.paths.report_dir / f"metrics_{kind.value}.json", doc)
        (cfg.paths.report_dir / f"confusion_{kind.value}.csv").write_text(matrix.to_csv())
        m = doc["metrics"]
        echo(f"evaluate: {kind.display} on {cfg.evaluate_split}: accuracy {m['accuracy']:.4f} "
             f"weighted F1 {m['weighted_f1']:.4f} binary accuracy {doc['binary']['accuracy']:.4f}")
        docs[kind.value] = doc
    return docs


# -- report -------------------------------------------------------------------

def run_report(cfg: PipelineConfig, echo: Echo = print) -> str:
    reports, methods = [], []
    for kind in cfg.model.backbones:
        doc = _read_json(cfg.paths.report_dir / f"train_{kind.value}.json", "flowpix-train-report", "train")
        reports.append(TrainReport.from_dict(doc))
        metrics_path = cfg.paths.report_dir / f"metrics_{kind.value}.json"
        if metrics_path.exists():
            m = _read_json(metrics_path, "flowpix-metrics", "evaluate")
            methods.append({"method": kind.display, "multiclass_accuracy": m["metrics"]["accuracy"],
                            "binary_accuracy": m["binary"]["accuracy"]})
    if not reports:
        raise PipelineConfigError("no backbones configured")
    table = comparison_csv(compare_models(reports))
    cfg.paths.report_dir.mkdir(parents=True, exist_ok=True)
    (cfg.paths.report_dir / "comparison.csv").write_text(table)
    methods += cfg.report.extra_methods
    if methods:
        (cfg.paths.report_dir / f"methods.{cfg.report.format}").write_text(
            export_comparison(methods, cfg.report.format))
    echo(table.rstrip("\n"))
    return table


def run_pipeline(cfg: PipelineConfig, force: bool = False, echo: Echo = print) -> None:
    if cfg.synth is not None and not cfg.paths.inputs:
        cfg.paths.inputs = [run_synth(cfg, echo)]
    run_ingest(cfg, echo)
    run_featurize(cfg, force, echo)
    run_train(cfg, echo)
    run_evaluate(cfg, echo)
    run_report(cfg, echo)

