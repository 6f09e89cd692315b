from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ExperimentResult:
    """Metrics of one run or sweep.

    ``metrics`` holds one dict per epoch or sweep point (the CSV rows);
    ``summary`` holds scalars derived from them. ``artifacts`` carries
    in-memory objects such as trained models and is never serialised.
    """

    name: str
    config: dict
    seed: int
    metrics: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "config": self.config,
            "summary": self.summary,
            "metrics": self.metrics,
        }

    def column(self, key: str) -> list:
        return [row[key] for row in self.metrics]

    @classmethod
    def from_json(cls, path) -> "ExperimentResult":
        d = json.loads(Path(path).read_text())
        return cls(name=d["name"], config=d["config"], seed=d["seed"], metrics=d["metrics"], summary=d["summary"])
