"""Quantitative instrumentation: discretization gap, saturation statistics,
and metrics serialization (append-only CSV plus a JSON run summary).

CSV rows carry 9 significant digits with '.' as the decimal separator and
'\\n' line endings. In deterministic mode the wall-clock column is written as
0 so repeat runs produce byte-identical files; real timings still reach the
JSON summary and the in-memory records.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from bqf.binarize import binarize_weights
from bqf.network import Network, discretize_model, evaluate

CSV_HEADER = "epoch,task_loss,reg_loss,train_acc,test_acc,test_acc_d,gap,saturation,dominance,step_ms"
SATURATION_THRESHOLD = 0.9
HISTOGRAM_BINS = 20


@dataclass
class MetricsRecord:
    epoch: int
    task_loss: float
    reg_loss: float
    train_acc: float
    test_acc: float
    test_acc_discretized: float
    discretization_gap: float      # always test_acc - test_acc_discretized
    saturation_fraction: float     # share of |W_q| > 0.9 over binarized weights
    dominance_ratio: float
    step_time_ms: float

    def validate(self) -> None:
        if not np.isclose(self.discretization_gap,
                          self.test_acc - self.test_acc_discretized, atol=1e-12):
            raise ValueError("metrics: gap != test_acc - test_acc_discretized")
        if not 0.0 <= self.saturation_fraction <= 1.0:
            raise ValueError("metrics: saturation_fraction outside [0,1]")


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def format_row(rec: MetricsRecord, zero_timing: bool = False) -> str:
    ms = 0.0 if zero_timing else rec.step_time_ms
    cells = [str(rec.epoch), _fmt(rec.task_loss), _fmt(rec.reg_loss),
             _fmt(rec.train_acc), _fmt(rec.test_acc), _fmt(rec.test_acc_discretized),
             _fmt(rec.discretization_gap), _fmt(rec.saturation_fraction),
             _fmt(rec.dominance_ratio), _fmt(ms)]
    return ",".join(cells)


class MetricsWriter:
    """Append-only CSV writer; rows are flushed as they arrive."""

    def __init__(self, path, deterministic: bool):
        self.path = Path(path)
        self.deterministic = deterministic
        self.path.write_text(CSV_HEADER + "\n")

    def append(self, rec: MetricsRecord) -> None:
        rec.validate()
        with open(self.path, "a", newline="") as f:
            f.write(format_row(rec, zero_timing=self.deterministic) + "\n")


def emit_metrics(records: list[MetricsRecord], out_dir, config: dict,
                 wall_time_s: float, deterministic: bool = True) -> tuple[Path, Path]:
    """Write metrics.csv and summary.json under out_dir; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    writer = MetricsWriter(csv_path, deterministic)
    for rec in records:
        writer.append(rec)
    summary_path = out / "summary.json"
    summary = {
        "config": config,
        "final": asdict(records[-1]) if records else {},
        "epochs": len(records) - 1 if records else 0,
        "wall_time_s": wall_time_s,
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, summary_path


def parse_metrics_csv(path) -> list[MetricsRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"metrics csv: unexpected header {lines[:1]!r}")
    out = []
    for line in lines[1:]:
        c = line.split(",")
        out.append(MetricsRecord(
            epoch=int(c[0]), task_loss=float(c[1]), reg_loss=float(c[2]),
            train_acc=float(c[3]), test_acc=float(c[4]),
            test_acc_discretized=float(c[5]), discretization_gap=float(c[6]),
            saturation_fraction=float(c[7]), dominance_ratio=float(c[8]),
            step_time_ms=float(c[9])))
    return out


def saturation_stats(network: Network) -> tuple[np.ndarray, float]:
    """20-bin histogram of binarized-weight values over [-1, 1] plus the
    fraction with |W_q| > 0.9. Empty (no binarized layers) -> zeros, 0.0."""
    values = []
    for st in network.binarized.values():
        wq = binarize_weights(st).data
        values.append(wq.reshape(-1))
    if not values:
        return np.zeros(HISTOGRAM_BINS, dtype=np.int64), 0.0
    flat = np.concatenate(values)
    hist, _ = np.histogram(flat, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    fraction = float((np.abs(flat) > SATURATION_THRESHOLD).mean())
    return hist, fraction


def discretization_gap(network: Network, x: np.ndarray, y: np.ndarray,
                       batch_size: int = 512) -> tuple[float, float, float]:
    """(accuracy, discretized accuracy, gap) on a split; the evaluated model
    is never modified (the discretized model is a clone)."""
    acc = evaluate(network, x, y, batch_size=batch_size)
    acc_d = evaluate(discretize_model(network), x, y, batch_size=batch_size)
    return acc, acc_d, acc - acc_d
