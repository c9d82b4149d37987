"""``flowpix`` command line: synth, ingest, featurize, train, evaluate, report, pipeline.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from flowpix import __version__, pipeline
from flowpix.config import PipelineConfigError, load_config
from flowpix.evaluate import EvaluationError
from flowpix.featurize import FeaturizeError
from flowpix.ingest import ConfigurationError, IngestError, RowError
from flowpix.models import ConfigError, ResolutionError
from flowpix.nn.checkpoint import CheckpointError
from flowpix.synth import SynthError
from flowpix.trainer import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

CONFIG_ERRORS = (PipelineConfigError, ConfigurationError, ConfigError, ResolutionError, SynthError)
DATA_ERRORS = (pipeline.DataError, IngestError, RowError, FeaturizeError, EvaluationError, CheckpointError,
               TrainingError, OSError)


def _abs(value: str | None) -> str | None:
    return None if value is None else str(Path(value).resolve())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON pipeline configuration")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--workdir", help="directory for all stage artifacts")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="flowpix", description="Flow records to images to CNN+LSTM classifiers.")
    parser.add_argument("--version", action="version", version=f"flowpix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic flow CSV")
    p.add_argument("-o", "--output", help="CSV path (default <workdir>/synthetic.csv)")
    p.add_argument("--mode", choices=("disjoint", "overlap"))
    p.add_argument("--records", type=int, help="total records, split in the evaluation-set proportions")

    p = sub.add_parser("ingest", parents=[common], help="parse, remap, drop empty columns and sub-sample")
    p.add_argument("-i", "--input", action="append", help="input CSV (repeatable)")
    p.add_argument("--full-scan", action="store_true", help="scan every row when detecting empty columns")

    p = sub.add_parser("featurize", parents=[common], help="fit normalization and write the image store")
    p.add_argument("--force", action="store_true", help="replace a corrupt stats file")

    for name, text in (("train", "train one model per configured backbone"),
                       ("evaluate", "score saved checkpoints and write metrics")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("-b", "--backbone", action="append", choices=("xception", "inception", "resnet"))
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", type=int)
        else:
            p.add_argument("--split", choices=("validation", "train", "all"))

    p = sub.add_parser("report", parents=[common], help="write the model comparison tables")
    p.add_argument("--format", choices=("csv", "json"))

    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    p.add_argument("--force", action="store_true", help="replace a corrupt stats file")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    out = {
        "seed": args.seed,
        "paths.workdir": _abs(args.workdir),
        "paths.inputs": [_abs(p) for p in args.input] if get("input") else None,
        "full_scan": True if get("full_scan") else None,
        "model.backbones": get("backbone"),
        "train.epochs": get("epochs"),
        "train.learning_rate": get("lr"),
        "train.batch_size": get("batch_size"),
        "evaluate.split": get("split"),
        "report.format": get("format"),
        "synth.output": _abs(get("output")),
        "synth.mode": get("mode"),
    }
    if get("records") is not None:
        from flowpix.synth import proportional_counts
        out["synth.counts"] = proportional_counts(args.records)
    return out


def _run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config, _overrides(args))
    cmd = args.command
    if cmd == "synth":
        if cfg.synth is None:
            raise PipelineConfigError("synth needs a synth section in the config or --records")
        pipeline.run_synth(cfg)
    elif cmd == "ingest":
        pipeline.run_ingest(cfg)
    elif cmd == "featurize":
        pipeline.run_featurize(cfg, force=args.force)
    elif cmd == "train":
        pipeline.run_train(cfg)
    elif cmd == "evaluate":
        pipeline.run_evaluate(cfg)
    elif cmd == "report":
        pipeline.run_report(cfg)
    else:
        pipeline.run_pipeline(cfg, force=args.force)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except CONFIG_ERRORS as exc:
        print(f"flowpix {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"flowpix {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"flowpix {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
