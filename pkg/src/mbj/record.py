from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any


@dataclass
class RunRecord:
    """Per-epoch metrics of one training run, serialized as JSON lines."""

    name: str = "run"
    epochs: list[dict[str, Any]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)

    def log(self, **row) -> dict:
        self.epochs.append(row)
        return row

    def last(self, phase: str | None = None) -> dict:
        rows = [r for r in self.epochs if phase is None or r.get("phase") == phase]
        if not rows:
            raise KeyError(f"no rows for phase {phase!r}")
        return rows[-1]

    def series(self, key: str, phase: str | None = None) -> list:
        return [r[key] for r in self.epochs if key in r and (phase is None or r.get("phase") == phase)]

    def extend(self, other: "RunRecord") -> "RunRecord":
        self.epochs.extend(other.epochs)
        self.summary.update(other.summary)
        return self

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def read_jsonl(cls, path, name: str = "run") -> "RunRecord":
        with open(path) as fh:
            return cls(name, [json.loads(line) for line in fh if line.strip()])
