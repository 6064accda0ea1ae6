"""Metric records: one JSON object per line, versioned, all numbers finite."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import SchemaViolation

RECORD_SCHEMA = 1
REQUIRED = ("experiment", "layer", "seed", "method", "hyperparameters", "rel_acc", "cross_entropy")


@dataclass
class MetricRecord:
    experiment: str
    layer: str
    seed: int
    method: str
    hyperparameters: dict = field(default_factory=dict)
    rel_acc: float = 0.0
    cross_entropy: float = 0.0
    similarity: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # further numeric quantities (sparsity, lambda, epoch, ...)
    note: str = ""
    wall_time: float = 0.0
    schema: int = RECORD_SCHEMA

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        numbers = {"rel_acc": self.rel_acc, "cross_entropy": self.cross_entropy, "wall_time": self.wall_time}
        numbers.update({f"similarity.{k}": v for k, v in self.similarity.items()})
        numbers.update({f"extra.{k}": v for k, v in self.extra.items()})
        for key, value in numbers.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise SchemaViolation(f"record field {key} must be a finite number, got {value!r}")
        if self.schema != RECORD_SCHEMA:
            raise SchemaViolation(f"record schema {self.schema} is not {RECORD_SCHEMA}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        missing = [k for k in REQUIRED if k not in d]
        if missing:
            raise SchemaViolation(f"record lacks {missing}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaViolation(str(exc)) from None

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"unparseable record: {exc}") from None
        if not isinstance(d, dict):
            raise SchemaViolation("record is not a JSON object")
        return cls.from_dict(d)


class RecordWriter:
    """Append-only JSON-lines sink; appends are serialized."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self._lock = threading.Lock()
        self.records: list[MetricRecord] = []

    def write(self, rec: MetricRecord) -> None:
        line = rec.to_json()
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
            self.records.append(rec)


def read_records(path) -> list[MetricRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(MetricRecord.from_json(line))
    return out


def strip_wall_time(text: str) -> str:
    """Record stream with wall_time removed, for determinism comparisons."""
    lines = []
    for line in text.splitlines():
        d = json.loads(line)
        d.pop("wall_time", None)
        lines.append(json.dumps(d, sort_keys=True))
    return "\n".join(lines)
