"""Experiment reports: JSON records plus plot-ready CSV rows."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

SCHEMA_VERSION = 1


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            return repr(x)
        return x
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class Measured:
    """A measured constant with its uncertainty and how the latter was obtained."""
    value: float
    uncertainty: float = float("nan")
    method: str = ""


@dataclass
class ExperimentReport:
    experiment: str
    params: dict = field(default_factory=dict)
    samples: int = 0
    violations: int = 0
    constants: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    timing: float = 0.0
    seed: int | None = None
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=list)

    def check(self, name: str, ok: bool, detail: Any = None):
        self.checks[name] = {"pass": bool(ok), "detail": _clean(detail)}
        return bool(ok)

    def measure(self, name: str, value, uncertainty=float("nan"), method=""):
        self.constants[name] = Measured(float(value), float(uncertainty), method)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values())

    def to_dict(self):
        from . import __version__
        d = asdict(self)
        d.pop("rows")
        d.pop("columns")
        d["passed"] = self.passed
        d["provenance"] = {"version": __version__, "seed": self.seed, "schema": SCHEMA_VERSION}
        return _clean(d)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.columns:
            w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(x) for x in r])
        return buf.getvalue()

    def write(self, outdir: str, stem: str | None = None):
        os.makedirs(outdir, exist_ok=True)
        stem = stem or self.experiment
        jpath = os.path.join(outdir, stem + ".json")
        cpath = os.path.join(outdir, stem + ".csv")
        with open(jpath, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        with open(cpath, "w", newline="") as fh:
            fh.write(self.csv_text())
        return jpath, cpath


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def table(reports: list[dict]) -> str:
    """Human table from stored report dictionaries."""
    lines = [f"{'experiment':<32} {'pass':<5} {'samples':>9} {'viol':>6}  checks"]
    for r in reports:
        bad = [k for k, c in r.get("checks", {}).items() if not c["pass"]]
        status = "yes" if r.get("passed") else "NO"
        lines.append(f"{r['experiment']:<32} {status:<5} {r.get('samples', 0):>9} "
                     f"{r.get('violations', 0):>6}  {len(r.get('checks', {}))} run"
                     + (f", failed: {', '.join(bad)}" if bad else ""))
        for k, m in sorted(r.get("constants", {}).items()):
            lines.append(f"    {k:<28} {m['value']!s:<24} +- {m['uncertainty']!s}  ({m['method']})")
    return "\n".join(lines)
