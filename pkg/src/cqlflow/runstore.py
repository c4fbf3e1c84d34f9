"""Config files and the experiment registry.

Configs are flat ``key = value`` text files. Keys are checked against the
config dataclass, so a misspelled hyperparameter is an error rather than a
silently ignored line.
"""

from __future__ import annotations

import fcntl
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

from .agents import BracConfig, CqlConfig

CONFIG_CLASSES = {"cql": CqlConfig, "brac": BracConfig}
REGISTRY_FILE = "registry.jsonl"
LOCK_FILE = ".registry.lock"
STATUSES = ("running", "completed", "failed")


class ConfigError(ValueError):
    pass


def _coerce(raw: str, kind: str, key: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def config_schema(algo: str) -> dict:
    """Field name -> type name for the config class of ``algo``."""
    if algo not in CONFIG_CLASSES:
        raise ConfigError(f"unknown algo {algo!r}; expected one of {sorted(CONFIG_CLASSES)}")
    return {f.name: str(f.type) for f in fields(CONFIG_CLASSES[algo])}


def parse_config(text: str, algo: str | None = None):
    """Parse ``key = value`` lines into a CqlConfig or BracConfig.

    An ``algo`` line in the file selects the class unless ``algo`` is given;
    a conflicting pair is an error.
    """
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = val
    file_algo = pairs.pop("algo", None)
    if algo and file_algo and algo != file_algo:
        raise ConfigError(f"config says algo={file_algo} but {algo} was requested")
    algo = algo or file_algo or "cql"
    schema = config_schema(algo)
    unknown = sorted(set(pairs) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {algo}: {unknown}")
    values = {k: _coerce(v, schema[k], k) for k, v in pairs.items()}
    try:
        return CONFIG_CLASSES[algo](**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def read_config(path, algo: str | None = None):
    return parse_config(Path(path).read_text(), algo)


def format_config(cfg) -> str:
    lines = [f"algo = {cfg.algo}"]
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_config(cfg, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg))
    return path


@dataclass
class RunEntry:
    run_id: str
    config_hash: str
    dataset_id: str
    status: str
    artifacts: dict

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "config_hash": self.config_hash, "dataset_id": self.dataset_id,
                "status": self.status, "artifacts": self.artifacts}


class ExperimentRegistry:
    """Append-only run index under ``root``; writers hold an exclusive file lock."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.path = self.root / REGISTRY_FILE

    @contextmanager
    def _locked(self):
        with open(self.root / LOCK_FILE, "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _read(self) -> dict:
        entries = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    d = json.loads(line)
                    entries[d["run_id"]] = RunEntry(**d)  # later lines supersede
        return entries

    def entries(self) -> list:
        return list(self._read().values())

    def get(self, run_id: str) -> RunEntry:
        entries = self._read()
        if run_id not in entries:
            raise KeyError(run_id)
        return entries[run_id]

    def _append(self, entry: RunEntry):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def register(self, config_hash: str, dataset_id: str, run_id: str | None = None,
                 artifacts: dict | None = None) -> RunEntry:
        with self._locked():
            existing = self._read()
            if run_id is None:
                n = sum(1 for r in existing if r.startswith(config_hash[:8] + "-"))
                run_id = f"{config_hash[:8]}-{n:03d}"
                while run_id in existing:
                    n += 1
                    run_id = f"{config_hash[:8]}-{n:03d}"
            elif run_id in existing:
                raise ValueError(f"run id {run_id!r} already registered")
            entry = RunEntry(run_id, config_hash, dataset_id, "running", dict(artifacts or {}))
            self._append(entry)
            return entry

    def update(self, run_id: str, status: str, artifacts: dict | None = None) -> RunEntry:
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        with self._locked():
            entry = self._read().get(run_id)
            if entry is None:
                raise KeyError(run_id)
            if artifacts:
                entry.artifacts.update(artifacts)
            if status == "completed":
                missing = [k for k, p in entry.artifacts.items() if not Path(p).exists()]
                if missing:
                    status = "failed"
                    entry.artifacts["missing"] = ",".join(missing)
            entry.status = status
            self._append(entry)
            return entry

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id
