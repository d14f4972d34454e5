"""Scan report model: per-engine verdict rows, reports, snapshots.

Each engine contributes one six-field row: category, engine_name,
engine_update, engine_version, method, result. The result label is present
only for malicious/suspicious rows and is null otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ValidationError

CATEGORIES = (
    "confirmed-timeout",
    "failure",
    "harmless",
    "malicious",
    "suspicious",
    "timeout",
    "type-unsupported",
    "undetected",
)

_LABELED = ("malicious", "suspicious")

SNAPSHOT_KINDS = ("first", "reanalysis", "tracked")


@dataclass(frozen=True)
class EngineVerdict:
    category: str
    engine_name: str
    engine_update: str
    engine_version: str
    method: str = "blacklist"
    result: Optional[str] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError("unknown category %r" % self.category)
        if self.result is not None and self.category not in _LABELED:
            raise ValidationError(
                "result must be null for category %r" % self.category)

    @property
    def is_malicious(self) -> bool:
        # Suspicious deliberately maps to not-malicious for flip accounting.
        return self.category == "malicious"

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "engine_name": self.engine_name,
            "engine_update": self.engine_update,
            "engine_version": self.engine_version,
            "method": self.method,
            "result": self.result,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EngineVerdict":
        return cls(obj["category"], obj["engine_name"], obj["engine_update"],
                   obj["engine_version"], obj.get("method", "blacklist"),
                   obj.get("result"))


@dataclass
class ScanReport:
    sha256: str
    timestamp: float
    verdicts: dict = field(default_factory=dict)  # engine_name -> EngineVerdict

    def add(self, verdict: EngineVerdict) -> None:
        if verdict.engine_name in self.verdicts:
            raise ValidationError(
                "duplicate verdict for engine %s" % verdict.engine_name)
        self.verdicts[verdict.engine_name] = verdict

    def engine(self, name: str) -> Optional[EngineVerdict]:
        return self.verdicts.get(name)

    def to_dict(self) -> dict:
        return {
            "sha256": self.sha256,
            "scan_timestamp": self.timestamp,
            "verdicts": {name: v.to_dict() for name, v in self.verdicts.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ScanReport":
        report = cls(obj["sha256"], obj["scan_timestamp"])
        for name, row in obj.get("verdicts", {}).items():
            verdict = EngineVerdict.from_dict(row)
            if verdict.engine_name != name:
                raise ValidationError("verdict key %r != engine_name %r"
                                      % (name, verdict.engine_name))
            report.add(verdict)
        return report


@dataclass(frozen=True)
class Snapshot:
    report: ScanReport
    kind: str
    day: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SNAPSHOT_KINDS:
            raise ValidationError("unknown snapshot kind %r" % self.kind)
        if self.kind == "tracked":
            if self.day is None or self.day < 1:
                raise ValidationError("tracked snapshots need day >= 1")
        elif self.day is not None:
            raise ValidationError("day applies only to tracked snapshots")

    def key(self) -> tuple:
        return (self.report.sha256, self.kind, self.report.timestamp)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "day": self.day,
                           "report": self.report.to_dict()}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Snapshot":
        obj = json.loads(line)
        return cls(ScanReport.from_dict(obj["report"]), obj["kind"],
                   obj.get("day"))


def filter_engines(reports, threshold: float = 0.9) -> list:
    """Engines worth keeping: type-unsupported fraction not above threshold.

    The boundary is exclusive: an engine at exactly the threshold stays in.
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("cannot filter engines over an empty corpus")
    totals: dict[str, int] = {}
    unsupported: dict[str, int] = {}
    for report in reports:
        for name, verdict in report.verdicts.items():
            totals[name] = totals.get(name, 0) + 1
            if verdict.category == "type-unsupported":
                unsupported[name] = unsupported.get(name, 0) + 1
    return sorted(name for name, n in totals.items()
                  if unsupported.get(name, 0) / n <= threshold)
