"""Flow-record CSV ingestion: parsing, label remapping, empty-column removal,
feature extraction and sequence-preserving block sub-sampling."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

from flowpix.labels import CLASS_NAMES, ClassLabel

log = logging.getLogger(__name__)

N_FEATURES = 16
DEFAULT_SAMPLE_ROWS = 100_000
DEFAULT_BLOCK_LENGTH = 480


class IngestError(ValueError):
    """Fatal problem with the data itself."""


class ConfigurationError(ValueError):
    """Fatal problem with how ingestion was configured."""


class RowError(ValueError):
    """A single malformed row; ingestion continues past it."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UnknownLabelError(IngestError):
    def __init__(self, label: str):
        super().__init__(f"unknown class label {label!r}")
        self.label = label


@dataclass
class RawRecord:
    values: list[str]
    line_number: int


class FlowCsvReader:
    """Iterate the data rows of a header-first CSV as :class:`RawRecord`.

    Rows whose cell count differs from the header are passed to ``on_error``
    as :class:`RowError` (default: log a warning) and skipped.
    """

    def __init__(self, source: str | Path | BinaryIO | TextIO, required: Iterable[str] = (),
                 on_error: Callable[[RowError], None] | None = None):
        if isinstance(source, (str, Path)):
            self._fh = open(source, newline="", encoding="utf-8")
            self._owned = True
        elif isinstance(source, io.TextIOBase):
            self._fh, self._owned = source, False
        else:
            self._fh = io.TextIOWrapper(source, encoding="utf-8", newline="")
            self._owned = False
        self._reader = csv.reader(self._fh)
        try:
            self.header = next(self._reader)
        except StopIteration:
            self.close()
            raise IngestError("CSV source is empty (no header row)") from None
        missing = [c for c in required if c not in self.header]
        if missing:
            self.close()
            raise ConfigurationError(f"column(s) missing from header: {', '.join(missing)}")
        self.on_error = on_error or (lambda err: log.warning("skipping malformed row: %s", err))
        self.errors = 0

    def column(self, name: str) -> int:
        return self.header.index(name)

    def rows(self) -> Iterator[tuple[int, list[str]]]:
        """Every non-blank data row with its line number, malformed ones included."""
        try:
            for row in self._reader:
                if row:
                    yield self._reader.line_num, row
        finally:
            self.close()

    def __iter__(self) -> Iterator[RawRecord]:
        width = len(self.header)
        for line, row in self.rows():
            if len(row) != width:
                self.errors += 1
                self.on_error(RowError(line, f"expected {width} cells, found {len(row)}"))
                continue
            yield RawRecord(row, line)

    def close(self) -> None:
        if self._owned:
            self._fh.close()


def parse_flow_csv(source, schema: Iterable[str] | Mapping[str, int] = (),
                   on_error: Callable[[RowError], None] | None = None) -> FlowCsvReader:
    """Open ``source`` and check that every column named in ``schema`` is present."""
    return FlowCsvReader(source, list(schema), on_error)


def drop_empty_columns(header: Sequence[str], records: Sequence[RawRecord]) -> tuple[list[str], list[str]]:
    """Split ``header`` into (kept, removed) using only the given sample.

    A column survives if any sampled cell is non-blank. Columns that are blank
    throughout the sample are removed even if later rows fill them.
    """
    if not records:
        raise IngestError("cannot detect empty columns from an empty sample")
    seen = [False] * len(header)
    for rec in records:
        for i, cell in enumerate(rec.values):
            if not seen[i] and cell.strip():
                seen[i] = True
    kept = [h for h, s in zip(header, seen) if s]
    removed = [h for h, s in zip(header, seen) if not s]
    if not kept:
        raise IngestError("every column is empty in the sample")
    return kept, removed


_TAXONOMY: dict[str, ClassLabel | None] = {
    "ddos": ClassLabel.DDOS,
    "dos": ClassLabel.DOS,
    "normal": ClassLabel.OTHERS,
    "reconnaissance": ClassLabel.OTHERS,
    "others": ClassLabel.OTHERS,
    "theft": None,
    "stealing": None,
}


def map_label(raw_label: str) -> ClassLabel | None:
    """Map a Bot-IoT category to a target class; ``None`` means the record is excluded."""
    key = raw_label.strip().lower()
    if key not in _TAXONOMY:
        raise UnknownLabelError(raw_label)
    return _TAXONOMY[key]


@dataclass
class FlowRecord:
    features: np.ndarray
    label: ClassLabel
    seq_index: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape != (N_FEATURES,):
            raise ValueError(f"a flow record has exactly {N_FEATURES} features, got {self.features.shape}")


@dataclass
class FlowTable:
    """Columnar batch of flow records in seq_index order."""

    features: np.ndarray
    labels: np.ndarray
    seq_index: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, N_FEATURES)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.seq_index = np.asarray(self.seq_index, dtype=np.int64)
        if not (len(self.features) == len(self.labels) == len(self.seq_index)):
            raise ValueError("features, labels and seq_index must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_records(cls, records: Iterable[FlowRecord]) -> "FlowTable":
        recs = list(records)
        if not recs:
            return cls(np.empty((0, N_FEATURES)), np.empty(0), np.empty(0))
        return cls(np.stack([r.features for r in recs]), [int(r.label) for r in recs], [r.seq_index for r in recs])

    def records(self) -> Iterator[FlowRecord]:
        for f, l, s in zip(self.features, self.labels, self.seq_index):
            yield FlowRecord(f, ClassLabel(int(l)), int(s))

    def select(self, mask_or_index) -> "FlowTable":
        return FlowTable(self.features[mask_or_index], self.labels[mask_or_index], self.seq_index[mask_or_index])

    def class_stream(self, label: ClassLabel) -> "FlowTable":
        return self.select(self.labels == int(label))


# -- feature extraction -------------------------------------------------------

def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def numeric_columns(header: Sequence[str], sample: Sequence[RawRecord]) -> list[str]:
    """Columns whose non-blank sampled cells all parse as numbers (and at least one is non-blank)."""
    out = []
    for i, name in enumerate(header):
        cells = [r.values[i].strip() for r in sample if r.values[i].strip()]
        if cells and all(_is_number(c) for c in cells):
            out.append(name)
    return out


def select_features(header: Sequence[str], sample: Sequence[RawRecord],
                    exclude: Iterable[str] = ()) -> list[str]:
    """The 16 numeric columns with the highest sample variance (ties by header order)."""
    excluded = set(exclude)
    candidates = [c for c in numeric_columns(header, sample) if c not in excluded]
    if len(candidates) < N_FEATURES:
        raise ConfigurationError(
            f"need {N_FEATURES} numeric columns to pick features automatically, found {len(candidates)}")
    variances = []
    for name in candidates:
        i = header.index(name)
        vals = np.array([float(r.values[i]) for r in sample if r.values[i].strip()])
        variances.append(float(vals.var()))
    order = sorted(range(len(candidates)), key=lambda k: (-variances[k], k))
    chosen = sorted(order[:N_FEATURES])
    return [candidates[k] for k in chosen]


class FeatureEncoder:
    """Turn selected cells into floats.

    Columns judged numeric from the sample are parsed with ``float`` (blank
    cells become 0). Other columns are label-encoded to integers in the
    order values are first seen.
    """

    def __init__(self, header: Sequence[str], features: Sequence[str], numeric: Iterable[str]):
        if len(features) != N_FEATURES:
            raise ConfigurationError(f"exactly {N_FEATURES} features required, got {len(features)}")
        missing = [f for f in features if f not in header]
        if missing:
            raise ConfigurationError(f"feature column(s) missing from header: {', '.join(missing)}")
        numeric = set(numeric)
        self.features = list(features)
        self.positions = [header.index(f) for f in features]
        self.numeric = [f in numeric for f in features]
        self.codes: list[dict[str, int]] = [{} for _ in features]

    def encode(self, rec: RawRecord) -> np.ndarray:
        out = np.empty(N_FEATURES)
        for j, (pos, is_num) in enumerate(zip(self.positions, self.numeric)):
            cell = rec.values[pos].strip()
            if is_num:
                if not cell:
                    out[j] = 0.0
                    continue
                try:
                    out[j] = float(cell)
                except ValueError:
                    raise RowError(rec.line_number, f"non-numeric value {cell!r} in column {self.features[j]!r}") from None
            else:
                table = self.codes[j]
                out[j] = table.setdefault(cell, len(table))
        return out


@dataclass
class IngestResult:
    table: FlowTable
    header: list[str]
    kept_columns: list[str]
    dropped_columns: list[str]
    features: list[str]
    excluded: int = 0
    row_errors: int = 0
    rows: int = 0


def _sample(paths: Sequence[Path], limit: int | None) -> tuple[list[str], list[RawRecord]]:
    header: list[str] | None = None
    sample: list[RawRecord] = []
    for path in paths:
        reader = FlowCsvReader(path, on_error=lambda e: None)
        if header is None:
            header = reader.header
        elif reader.header != header:
            raise IngestError(f"{path}: header differs from {paths[0]}")
        for rec in reader:
            if limit is not None and len(sample) >= limit:
                reader.close()
                break
            sample.append(rec)
        if limit is not None and len(sample) >= limit:
            break
    assert header is not None
    return header, sample


def ingest_files(paths: Sequence[str | Path], label_column: str = "category",
                 features: Sequence[str] | None = None, sample_rows: int | None = DEFAULT_SAMPLE_ROWS,
                 on_error: Callable[[RowError], None] | None = None) -> IngestResult:
    """Read flow CSVs into a :class:`FlowTable`.

    ``seq_index`` is the 0-based ordinal of the data row across all files in
    the given order; malformed and excluded rows still consume an ordinal.
    ``sample_rows=None`` scans every row for empty-column detection.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ConfigurationError("no input files given")
    header, sample = _sample(paths, sample_rows)
    if label_column not in header:
        raise ConfigurationError(f"label column {label_column!r} missing from header")
    kept, dropped = drop_empty_columns(header, sample)
    if dropped:
        log.info("dropping %d empty column(s): %s", len(dropped), ", ".join(dropped))
    kept_sample = [RawRecord([r.values[header.index(c)] for c in kept], r.line_number) for r in sample]
    if features is None:
        features = select_features(kept, kept_sample, exclude=[label_column])
    bad = [f for f in features if f not in kept]
    if bad:
        raise ConfigurationError(f"feature column(s) empty or missing: {', '.join(bad)}")
    encoder = FeatureEncoder(header, features, numeric_columns(kept, kept_sample))
    label_pos = header.index(label_column)

    feats: list[np.ndarray] = []
    labels: list[int] = []
    seqs: list[int] = []
    result = IngestResult(FlowTable(np.empty((0, N_FEATURES)), [], []), header, kept, dropped, list(features))
    report = on_error or (lambda e: log.warning("skipping malformed row: %s", e))

    def count_error(err: RowError) -> None:
        result.row_errors += 1
        report(err)

    ordinal = 0
    for path in paths:
        reader = FlowCsvReader(path, on_error=lambda e: None)
        width = len(reader.header)
        for line, row in reader.rows():
            seq = ordinal
            ordinal += 1
            if len(row) != width:
                count_error(RowError(line, f"expected {width} cells, found {len(row)}"))
                continue
            rec = RawRecord(row, line)
            label = map_label(row[label_pos])
            if label is None:
                result.excluded += 1
                continue
            try:
                vec = encoder.encode(rec)
            except RowError as err:
                count_error(err)
                continue
            feats.append(vec)
            labels.append(int(label))
            seqs.append(seq)
    result.rows = ordinal
    result.table = FlowTable(np.array(feats).reshape(-1, N_FEATURES), labels, seqs)
    return result


# -- sub-sampling -------------------------------------------------------------

@dataclass
class SamplingPlan:
    fractions: dict[ClassLabel, float] = field(default_factory=lambda: {c: 1.0 for c in ClassLabel})
    block_length: int = DEFAULT_BLOCK_LENGTH
    seed: int = 0

    def __post_init__(self):
        self.fractions = {ClassLabel(k) if not isinstance(k, str) else ClassLabel.from_name(k): float(v)
                          for k, v in self.fractions.items()}
        for label in ClassLabel:
            self.fractions.setdefault(label, 1.0)
        for label, f in self.fractions.items():
            if not f > 0:
                raise ConfigurationError(f"sampling fraction for {label.display} must be > 0, got {f}")
        if self.block_length < 1:
            raise ConfigurationError("block_length must be >= 1")


def choose_blocks(n: int, fraction: float, block_length: int, rng: np.random.Generator,
                  name: str = "") -> np.ndarray:
    """Positions (0..n-1) kept from one class stream.

    The stream is cut into consecutive blocks of ``block_length`` (the last may
    be shorter); ``round(fraction * n / block_length)`` blocks (at least one)
    are drawn uniformly without replacement and returned in order.
    """
    if fraction > 1.0:
        warnings.warn(f"fraction {fraction} for {name or 'class'} exceeds the available records; keeping all",
                      stacklevel=2)
    n_blocks = -(-n // block_length)
    wanted = max(1, int(round(fraction * n / block_length)))
    if fraction >= 1.0 or wanted >= n_blocks:
        return np.arange(n)
    picked = np.sort(rng.choice(n_blocks, size=wanted, replace=False))
    starts = picked * block_length
    return np.concatenate([np.arange(s, min(s + block_length, n)) for s in starts])


def subsample_preserving_sequence(table: FlowTable, plan: SamplingPlan) -> FlowTable:
    """Keep contiguous blocks of each class stream; output stays in seq_index order."""
    keep = []
    for label in ClassLabel:
        rows = np.flatnonzero(table.labels == int(label))
        if rows.size == 0:
            continue
        rng = np.random.default_rng([plan.seed, int(label)])
        pos = choose_blocks(rows.size, plan.fractions[label], plan.block_length, rng, label.display)
        keep.append(rows[pos])
    if not keep:
        return table.select(np.zeros(0, dtype=np.intp))
    return table.select(np.sort(np.concatenate(keep)))


# -- summary ------------------------------------------------------------------

@dataclass
class DatasetSummary:
    counts: dict[str, int]
    total: int
    percentages: dict[str, float]

    def to_dict(self) -> dict:
        return {"counts": self.counts, "total": self.total, "percentages": self.percentages}


def summarize(labels) -> DatasetSummary:
    """Per-class counts and percentage of total (labels array, FlowTable or FlowRecords)."""
    if isinstance(labels, FlowTable):
        arr = labels.labels
    else:
        items = list(labels) if not isinstance(labels, np.ndarray) else labels
        arr = np.array([int(getattr(x, "label", x)) for x in items], dtype=np.int64)
    if len(arr) == 0:
        raise IngestError("cannot summarize an empty record stream")
    counts = np.bincount(np.asarray(arr, dtype=np.int64), minlength=len(ClassLabel))
    total = int(counts.sum())
    return DatasetSummary(
        {name: int(c) for name, c in zip(CLASS_NAMES, counts)},
        total,
        {name: 100.0 * int(c) / total for name, c in zip(CLASS_NAMES, counts)},
    )


def write_sampled_csv(paths: Sequence[str | Path], keep_seq: np.ndarray, columns: Sequence[str],
                      out: str | Path) -> int:
    """Re-read the sources and write kept rows (by seq_index), restricted to ``columns``."""
    keep = set(int(s) for s in keep_seq)
    written = 0
    ordinal = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for path in paths:
            reader = FlowCsvReader(path, on_error=lambda e: None)
            pos = [reader.header.index(c) for c in columns]
            width = len(reader.header)
            for _, row in reader.rows():
                seq = ordinal
                ordinal += 1
                if seq in keep and len(row) == width:
                    writer.writerow([row[p] for p in pos])
                    written += 1
    return written
