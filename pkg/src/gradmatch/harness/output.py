"""Tables, atomic CSV/JSON writers and ordered fan-out over runs."""
from __future__ import annotations

import json
import math
import os
import subprocess
import tempfile
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Table:
    name: str
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, **values) -> None:
        missing = set(self.columns) - set(values)
        extra = set(values) - set(self.columns)
        if missing or extra:
            raise KeyError(f"{self.name}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.rows.append(tuple(values[c] for c in self.columns))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]


@dataclass
class RunOutput:
    """What a runner hands back to the CLI."""
    tables: list
    total: int
    failures: int = 0
    summary: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


def format_value(v) -> str:
    """Shortest round-trip text for numbers; blanks for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(format_value(x) for x in v)
    text = str(v)
    if any(c in text for c in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def csv_text(table: Table) -> str:
    lines = [",".join(table.columns)]
    lines += [",".join(format_value(v) for v in row) for row in table.rows]
    return "\n".join(lines) + "\n"


def write_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_outputs(cfg: dict, out: RunOutput, stem: str) -> list:
    """One CSV per table plus ``<stem>_manifest.json``; returns the paths."""
    root = Path(cfg["output_dir"])
    paths = []
    for table in out.tables:
        name = stem if table.name == "main" else f"{stem}_{table.name}"
        paths.append(write_atomic(root / f"{name}.csv", csv_text(table)))
    manifest = {
        "experiment": cfg["experiment"],
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "git_describe": git_describe(),
        "outputs": [p.name for p in paths],
        "runs": out.total,
        "failures": out.failures,
        "timings": {
            "total_seconds": sum(t for _, t in out.timings),
            "runs": [[label, t] for label, t in out.timings],
        },
        **{k: _jsonable(v) for k, v in out.extra.items()},
    }
    paths.append(write_atomic(root / f"{stem}_manifest.json", json.dumps(manifest, indent=2) + "\n"))
    return paths


@dataclass
class Outcome:
    label: str
    value: object = None
    error: str | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


def _guarded(fn, label, task):
    start = time.perf_counter()
    try:
        value, error = fn(task), None
    except Exception as exc:  # one bad run must not abort the sweep
        value = None
        error = f"{type(exc).__name__}: {exc}"
        if os.environ.get("GRADMATCH_TRACEBACK"):
            traceback.print_exc()
    return Outcome(label, value, error, time.perf_counter() - start)


def fan_out(fn, tasks, parallelism: int = 1, label=str) -> list:
    """Apply ``fn`` to every task; results come back in task order.

    Each task carries its own seeds, so the outcome does not depend on
    ``parallelism``.
    """
    tasks = list(tasks)
    if parallelism <= 1 or len(tasks) <= 1:
        return [_guarded(fn, label(t), t) for t in tasks]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda t: _guarded(fn, label(t), t), tasks))
