"""Seeded synthetic Bot-IoT-shaped flow CSVs for desk-scale runs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowpix.ingest import map_label
from flowpix.labels import ClassLabel

COLUMNS = [
    "stime", "proto", "saddr", "sport", "daddr", "dport", "pkts", "bytes", "state", "seq",
    "dur", "mean", "stddev", "smac", "dmac", "sum", "min", "max", "soui", "doui",
    "sco", "dco", "spkts", "dpkts", "sbytes", "dbytes", "rate", "srate", "category",
]
EMPTY_COLUMNS = ("smac", "dmac", "soui", "doui", "sco", "dco")
NUMERIC_FEATURES = (
    "pkts", "bytes", "seq", "dur", "mean", "stddev", "sum", "min", "max",
    "spkts", "dpkts", "sbytes", "dbytes", "rate", "srate",
)
DEFAULT_FEATURES = ["proto", *NUMERIC_FEATURES]
LABEL_COLUMN = "category"

_PROTO = {ClassLabel.DDOS: ("udp",), ClassLabel.DOS: ("tcp",), ClassLabel.OTHERS: ("icmp", "arp")}
_STATE = {ClassLabel.DDOS: ("INT", "CON"), ClassLabel.DOS: ("REQ", "RST"), ClassLabel.OTHERS: ("CON", "FIN")}


class SynthError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    """Record counts per raw category plus how separable the classes are.

    ``mode="disjoint"`` draws every numeric feature of each target class from
    its own band of the feature range, with gaps between bands. ``"overlap"``
    widens the bands so neighbouring classes share values.
    """

    counts: dict[str, int] = field(default_factory=lambda: {"DDoS": 14_000, "DoS": 12_000, "Normal": 2_500,
                                                            "Reconnaissance": 2_500, "Theft": 200})
    mode: str = "disjoint"
    seed: int = 0
    mean_run: int = 240

    def __post_init__(self):
        if self.mode not in ("disjoint", "overlap"):
            raise SynthError(f"mode must be 'disjoint' or 'overlap', got {self.mode!r}")
        per_class: dict[ClassLabel, int] = {}
        for name, n in self.counts.items():
            label = map_label(name)
            if n < 0:
                raise SynthError(f"negative count for {name}")
            if label is not None:
                per_class[label] = per_class.get(label, 0) + n
        short = [c.display for c, n in per_class.items() if n < 48]
        if short:
            raise SynthError(f"each class needs at least 48 records; too few for {', '.join(short)}")
        if self.mean_run < 1:
            raise SynthError("mean_run must be >= 1")


def _bands(mode: str) -> list[tuple[float, float]]:
    if mode == "disjoint":
        return [(b / 3 + 0.03, (b + 1) / 3 - 0.03) for b in range(3)]
    return [(max(0.0, b / 3 - 0.15), min(1.0, (b + 1) / 3 + 0.15)) for b in range(3)]


def _label_sequence(spec: SyntheticSpec, rng: np.random.Generator) -> list[str]:
    """Interleave categories in runs of geometric length so each keeps its count exactly."""
    runs: list[tuple[str, int]] = []
    for name, n in spec.counts.items():
        left = n
        while left > 0:
            size = min(left, int(rng.geometric(1.0 / spec.mean_run)))
            runs.append((name, size))
            left -= size
    order = rng.permutation(len(runs))
    seq: list[str] = []
    for k in order:
        name, size = runs[k]
        seq.extend([name] * size)
    return seq


def generate_rows(spec: SyntheticSpec):
    rng = np.random.default_rng(spec.seed)
    bands = _bands(spec.mode)
    n_feat = len(NUMERIC_FEATURES)
    # per feature: which band each class uses, and an overall magnitude
    band_of = np.stack([rng.permutation(3) for _ in range(n_feat)])
    scale = 10.0 ** rng.uniform(0, 4, size=n_feat)
    labels = _label_sequence(spec, rng)
    t = 1_526_000_000.0
    for i, raw in enumerate(labels):
        label = map_label(raw)
        cls = label if label is not None else ClassLabel.OTHERS
        u = np.empty(n_feat)
        for j in range(n_feat):
            lo, hi = bands[band_of[j, cls]]
            u[j] = rng.uniform(lo, hi)
        values = dict(zip(NUMERIC_FEATURES, u * scale))
        t += float(rng.exponential(0.01))
        row = {
            "stime": f"{t:.6f}",
            "proto": str(rng.choice(_PROTO[cls])),
            "saddr": f"192.168.100.{int(rng.integers(1, 255))}",
            "sport": str(int(rng.integers(1024, 65535))),
            "daddr": f"192.168.100.{int(rng.integers(1, 255))}",
            "dport": str(int(rng.choice((80, 443, 53, 1883)))),
            "state": str(rng.choice(_STATE[cls])),
            LABEL_COLUMN: raw,
        }
        row.update({k: f"{v:.6g}" for k, v in values.items()})
        row.update({k: "" for k in EMPTY_COLUMNS})
        yield [row[c] for c in COLUMNS]


def write_synthetic_csv(spec: SyntheticSpec, path: str | Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in generate_rows(spec):
            writer.writerow(row)
            n += 1
    return n


def proportional_counts(total: int) -> dict[str, int]:
    """Raw-category counts in the DDoS / DoS / Others proportions of the evaluation set."""
    ddos = round(total * 4816344 / 10772805)
    dos = round(total * 4125279 / 10772805)
    others = total - ddos - dos
    return {"DDoS": ddos, "DoS": dos, "Normal": others // 2, "Reconnaissance": others - others // 2}
