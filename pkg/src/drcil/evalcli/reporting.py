"""Result persistence: JSON-lines records, per-step CSVs and seed summaries.

Records hold no wall-clock data, so re-running ``report`` on stored
records reproduces every summary number exactly. Timings go to a separate
``timings.jsonl`` sidecar.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..evaluation import ExperimentResult

RESULTS_FILE = "results.jsonl"
TIMINGS_FILE = "timings.jsonl"
SUMMARY_FILE = "summary.csv"
STEP_HEADER = ["step", "seen_classes", "accuracy", "imbalance_ratio"]


class ReportError(OSError):
    pass


def run_label(config: dict) -> str:
    kind = config.get("kind", "run")
    return f"{kind}+DRC" if config.get("drc_enabled") else kind


def group_key(config: dict) -> str:
    """Configs that differ only in seed share a summary row."""
    return json.dumps({k: v for k, v in config.items() if k != "seed"}, sort_keys=True)


def record_line(result: ExperimentResult) -> str:
    return json.dumps(result.to_record(), sort_keys=True)


def steps_csv_name(result: ExperimentResult) -> str:
    label = run_label(result.config).replace("+", "_")
    return f"steps_{label}_seed{result.seed}.csv"


def _wrap_io(path, fn):
    try:
        return fn()
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from exc


def write_steps_csv(result: ExperimentResult, path) -> Path:
    path = Path(path)

    def write():
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(STEP_HEADER)
            for s in result.steps:
                ratio = "" if s.imbalance_ratio is None else repr(s.imbalance_ratio)
                w.writerow([s.step, s.seen_classes, repr(s.accuracy), ratio])
        return path

    return _wrap_io(path, write)


def read_steps_csv(path) -> list[dict]:
    path = Path(path)

    def read():
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return [
            {
                "step": int(r["step"]),
                "seen_classes": int(r["seen_classes"]),
                "accuracy": float(r["accuracy"]),
                "imbalance_ratio": float(r["imbalance_ratio"]) if r["imbalance_ratio"] else None,
            }
            for r in rows
        ]

    return _wrap_io(path, read)


def emit_results(results: Sequence[ExperimentResult], out_dir) -> list[Path]:
    """Append records and timings, write one per-step CSV per run.

    Returns the paths written. Called from a single process, so appends are
    naturally serialized.
    """
    out = Path(out_dir)
    _wrap_io(out, lambda: out.mkdir(parents=True, exist_ok=True))
    written = []

    def append():
        with (out / RESULTS_FILE).open("a", encoding="utf-8") as rec, (out / TIMINGS_FILE).open("a", encoding="utf-8") as tim:
            for r in results:
                rec.write(record_line(r) + "\n")
                tim.write(json.dumps({"label": run_label(r.config), "seed": r.seed, "step_seconds": r.timings}) + "\n")

    _wrap_io(out / RESULTS_FILE, append)
    written.append(out / RESULTS_FILE)
    for r in results:
        written.append(write_steps_csv(r, out / steps_csv_name(r)))
    return written


def load_results(path) -> list[ExperimentResult]:
    path = Path(path)
    if path.is_dir():
        path = path / RESULTS_FILE

    def read():
        lines = path.read_text(encoding="utf-8").splitlines()
        return [ExperimentResult.from_record(json.loads(ln)) for ln in lines if ln.strip()]

    return _wrap_io(path, read)


# ------------------------------------------------------------------ summaries

@dataclass(frozen=True)
class SummaryRow:
    label: str
    runs: int
    avg_mean: float
    avg_se: float
    last_mean: float
    last_se: float
    key: str

    def format(self) -> str:
        def pm(m, se):
            tail = "" if math.isnan(se) else f" ± {100 * se:.2f}"
            return f"{100 * m:.2f}{tail}"
        return f"{self.label:<10} n={self.runs:<3} Avg {pm(self.avg_mean, self.avg_se):<16} Last {pm(self.last_mean, self.last_se)}"


def mean_and_se(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and standard error (ddof=1); the error is NaN for one value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values to summarize")
    if x.size == 1:
        return float(x[0]), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def summarize(results: Iterable[ExperimentResult]) -> list[SummaryRow]:
    groups: dict[str, list[ExperimentResult]] = {}
    for r in results:
        groups.setdefault(group_key(r.config), []).append(r)
    rows = []
    for key, rs in groups.items():
        am, ase = mean_and_se([r.avg_accuracy for r in rs])
        lm, lse = mean_and_se([r.last_accuracy for r in rs])
        rows.append(SummaryRow(run_label(rs[0].config), len(rs), am, ase, lm, lse, key))
    return rows


def write_summary(rows: Sequence[SummaryRow], out_dir) -> Path:
    path = Path(out_dir) / SUMMARY_FILE

    def write():
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "runs", "avg_mean", "avg_se", "last_mean", "last_se", "config"])
            for r in rows:
                w.writerow([r.label, r.runs, repr(r.avg_mean), repr(r.avg_se), repr(r.last_mean), repr(r.last_se), r.key])
        return path

    return _wrap_io(path, write)
