"""Target classes and the mapping from raw Bot-IoT categories."""
from __future__ import annotations

from enum import IntEnum


class ClassLabel(IntEnum):
    DDOS = 0
    DOS = 1
    OTHERS = 2

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def from_name(cls, name: str) -> "ClassLabel":
        key = name.strip().lower()
        for label, text in _DISPLAY.items():
            if text.lower() == key:
                return label
        raise ValueError(f"unknown class label {name!r}")


_DISPLAY = {ClassLabel.DDOS: "DDoS", ClassLabel.DOS: "DoS", ClassLabel.OTHERS: "Others"}

CLASS_NAMES: tuple[str, ...] = tuple(_DISPLAY[c] for c in ClassLabel)
NUM_CLASSES = len(ClassLabel)
