"""Per-run metric time series and their JSON Lines file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORACLE_FIELDS = frozenset({"eval_return"})
RUNLOG_FORMAT = "cqlflow.runlog"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


class OracleAccessError(KeyError):
    """Raised when offline code asks a RunLog for ground-truth fields."""


@dataclass
class CheckpointRef:
    step: int
    critic_path: str | None
    policy_path: str | None
    metrics_at_save: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"step": self.step, "critic_path": self.critic_path,
                "policy_path": self.policy_path, "metrics_at_save": self.metrics_at_save}

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointRef":
        return cls(d["step"], d.get("critic_path"), d.get("policy_path"), d.get("metrics_at_save", {}))

    def exists(self) -> bool:
        return all(p is not None and Path(p).is_file() for p in (self.critic_path, self.policy_path))


@dataclass
class RunLog:
    meta: dict
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.records.append(record)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r["step"] for r in self.records], dtype=int)

    @property
    def algo(self) -> str:
        return self.meta.get("algo", "cql")

    def series(self, name: str) -> np.ndarray:
        """Offline metric series; ground-truth fields are refused."""
        if name in ORACLE_FIELDS:
            raise OracleAccessError(f"{name} is analysis-only and not visible to offline code")
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records], dtype=float)

    def oracle_series(self, name: str = "eval_return") -> np.ndarray:
        """Ground-truth series for analysis and acceptance tests."""
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.records], dtype=float)

    def final(self, name: str) -> float:
        return float(self.series(name)[-1])

    def offline_view(self) -> "RunLog":
        """Copy with every ground-truth field removed."""
        recs = [{k: v for k, v in r.items() if k not in ORACLE_FIELDS} for r in self.records]
        return RunLog(dict(self.meta), recs)

    def has_oracle_data(self) -> bool:
        return any(r.get(k) is not None for r in self.records for k in ORACLE_FIELDS)

    @property
    def checkpoints(self) -> list:
        return [CheckpointRef.from_dict(c) for c in self.meta.get("checkpoints", [])]

    def to_jsonl(self) -> str:
        header = {"format": RUNLOG_FORMAT, **self.meta}
        lines = [canonical_json(header)] + [canonical_json(r) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def from_jsonl(cls, text: str) -> "RunLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty run log")
        header = json.loads(lines[0])
        if header.pop("format", None) != RUNLOG_FORMAT:
            raise ValueError("not a run log (missing format header)")
        log = cls(header)
        for ln in lines[1:]:
            log.append(json.loads(ln))
        return log

    @classmethod
    def read(cls, path) -> "RunLog":
        path = Path(path)
        if path.is_dir():
            path = path / "runlog.jsonl"
        return cls.from_jsonl(path.read_text())
