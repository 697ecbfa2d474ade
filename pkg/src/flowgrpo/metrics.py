"""Append-only metric logs and their delimited text form."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path


class MetricLog:
    """Rows keyed by a strictly increasing step; columns fixed by the first row."""

    def __init__(self, columns: list[str] | None = None):
        self.columns: list[str] | None = list(columns) if columns else None
        self.steps: list[int] = []
        self.rows: list[dict[str, float]] = []

    def append(self, step: int, values: dict[str, float]) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} does not follow {self.steps[-1]}")
        if self.columns is None:
            self.columns = list(values)
        elif set(values) != set(self.columns):
            raise ValueError(f"columns {sorted(values)} differ from {sorted(self.columns)}")
        self.steps.append(int(step))
        self.rows.append({k: float(values[k]) for k in self.columns})

    def __len__(self) -> int:
        return len(self.steps)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def last(self, name: str) -> float:
        return self.rows[-1][name]

    def at(self, step: int) -> dict[str, float]:
        return self.rows[self.steps.index(step)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", *(self.columns or [])])
        for s, r in zip(self.steps, self.rows):
            w.writerow([s, *(repr(r[c]) for c in self.columns)])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, text: str) -> "MetricLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        log = cls(header[1:])
        for row in reader:
            log.append(int(row[0]), {c: float(v) for c, v in zip(header[1:], row[1:])})
        return log

    @classmethod
    def read(cls, path) -> "MetricLog":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricLog):
            return NotImplemented
        if self.columns != other.columns or self.steps != other.steps:
            return False
        return all(
            a[c] == b[c] or (math.isnan(a[c]) and math.isnan(b[c])) for a, b in zip(self.rows, other.rows) for c in a
        )
