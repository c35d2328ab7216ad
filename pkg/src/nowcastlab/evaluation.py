"""Test-set scoring: MSE per lead time and threshold-based verification.

Predictions are scored in two spaces. MSE is computed on normalized values
(the training objective); classification metrics binarize both forecast and
truth at a rain-rate threshold after converting back to mm/h.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .datamodel import Sample, Variable, VariableStats, denormalize_array
from .exceptions import ShapeError
from .models import sample_tensors

DEFAULT_THRESHOLD = 0.5  # mm/h
METRIC_NAMES = ("mse", "acc", "prec", "rec", "f1", "csi", "mcc")
LOWER_IS_BETTER = {"mse"}


def binarize(frames, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where the value is strictly greater than ``threshold``."""
    return (np.asarray(frames) > threshold).astype(np.uint8)


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def accumulate_confusion(pred_mask, true_mask, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    pred = np.asarray(pred_mask).astype(bool)
    true = np.asarray(true_mask).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction mask {pred.shape} and truth mask {true.shape} differ")
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    tn = pred.size - tp - fp - fn
    new = ConfusionCounts(tp, tn, fp, fn)
    return new if counts is None else counts + new


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def classification_metrics(c: ConfusionCounts) -> dict:
    """ACC, PREC, REC, F1, CSI and MCC; undefined ratios are reported as 0."""
    acc = _ratio(c.tp + c.tn, c.total)
    prec = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * prec * rec, prec + rec)
    csi = _ratio(c.tp, c.tp + c.fn + c.fp)
    # integer numerator and radicand: exact until the final sqrt
    num = c.tp * c.tn - c.fp * c.fn
    radicand = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = num / math.sqrt(radicand) if radicand else 0.0
    return {"acc": acc, "prec": prec, "rec": rec, "f1": f1, "csi": csi, "mcc": mcc}


class _MseAccumulator:
    """Per-lead-time sums of squared errors; partials merge exactly via fsum."""

    def __init__(self, steps: int):
        self.partials = [[] for _ in range(steps)]
        self.counts = [0] * steps

    def add(self, pred: np.ndarray, target: np.ndarray):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
        err = (pred.astype(np.float64) - target.astype(np.float64)) ** 2
        for t in range(err.shape[1]):
            self.partials[t].append(float(err[:, t].sum()))
            self.counts[t] += err[:, t].size

    def result(self) -> tuple[float, list[float]]:
        per_step = [math.fsum(p) / n if n else 0.0 for p, n in zip(self.partials, self.counts)]
        total_n = sum(self.counts)
        total = math.fsum(x for p in self.partials for x in p) / total_n if total_n else 0.0
        return total, per_step


def mse_report(preds, targets) -> tuple[float, list[float]]:
    """Total MSE and MSE per lead time for ``(N, T, H, W)`` arrays."""
    preds, targets = np.asarray(preds), np.asarray(targets)
    if preds.shape != targets.shape or preds.ndim != 4:
        raise ShapeError(f"expected matching (N, T, H, W) arrays, got {preds.shape} and {targets.shape}")
    acc = _MseAccumulator(preds.shape[1])
    acc.add(preds, targets)
    return acc.result()


@dataclass
class MetricReport:
    mse_total: float
    mse_per_step: list
    threshold: float
    acc: float
    prec: float
    rec: float
    f1: float
    csi: float
    mcc: float
    counts: ConfusionCounts
    mse_total_mm: float | None = None
    mse_per_step_mm: list | None = None
    model: str | None = None
    n_samples: int = 0

    @property
    def mse(self) -> float:
        return self.mse_total

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "model", "n_samples", "threshold", "mse_total", "mse_per_step",
            "acc", "prec", "rec", "f1", "csi", "mcc", "mse_total_mm", "mse_per_step_mm",
        )}
        d["counts"] = self.counts.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["counts"] = ConfusionCounts(**d["counts"])
        return cls(**d)


@torch.no_grad()
def evaluate_model(model, samples: Sequence[Sample], stats: Mapping[Variable, VariableStats],
                   threshold: float = DEFAULT_THRESHOLD, batch_size: int = 16) -> MetricReport:
    """Score ``model`` on normalized ``samples``; ``stats`` are the training
    statistics used to convert rain back to mm/h for thresholding."""
    if not samples:
        raise ValueError("no samples to evaluate")
    rain_stats = stats[Variable.RAIN]
    was_training = model.training
    model.eval()
    norm_mse = _MseAccumulator(model.cfg.out_frames)
    mm_mse = _MseAccumulator(model.cfg.out_frames)
    counts = ConfusionCounts()
    try:
        for start in range(0, len(samples), batch_size):
            rain, aux, target = sample_tensors(samples[start:start + batch_size])
            pred = model(rain, aux).numpy()
            target = target.numpy()
            norm_mse.add(pred, target)
            pred_mm = denormalize_array(pred, rain_stats)
            target_mm = denormalize_array(target, rain_stats)
            mm_mse.add(pred_mm, target_mm)
            counts = accumulate_confusion(binarize(pred_mm, threshold), binarize(target_mm, threshold), counts)
    finally:
        model.train(was_training)
    total, per_step = norm_mse.result()
    total_mm, per_step_mm = mm_mse.result()
    return MetricReport(
        mse_total=total,
        mse_per_step=per_step,
        threshold=threshold,
        counts=counts,
        mse_total_mm=total_mm,
        mse_per_step_mm=per_step_mm,
        model=model.variant.value,
        n_samples=len(samples),
        **classification_metrics(counts),
    )


# --------------------------------------------------------------------------
# output files


def write_metrics(report: MetricReport, directory) -> dict:
    """Write metrics.json, per_step.csv and mse_per_step.svg."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": directory / "metrics.json",
        "per_step": directory / "per_step.csv",
        "plot": directory / "mse_per_step.svg",
    }
    paths["metrics"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(paths["per_step"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lead_hours", "mse", "mse_mm"])
        mm = report.mse_per_step_mm or [None] * len(report.mse_per_step)
        for i, (m, m_mm) in enumerate(zip(report.mse_per_step, mm), start=1):
            writer.writerow([i, i, repr(m), "" if m_mm is None else repr(m_mm)])
    plot_mse_per_step({report.model or "model": report}, paths["plot"])
    return paths


def read_metrics(path) -> MetricReport:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    return MetricReport.from_dict(json.loads(path.read_text(encoding="utf-8")))


def plot_mse_per_step(reports: Mapping[str, MetricReport], path):
    """Line plot of MSE against lead time, one line per model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt keeps the generated element ids stable between runs
    with plt.rc_context({"svg.hashsalt": "nowcastlab"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, rep in reports.items():
            steps = np.arange(1, len(rep.mse_per_step) + 1)
            ax.plot(steps, rep.mse_per_step, marker="o", label=name)
        ax.set_xlabel("Lead time (h)")
        ax.set_ylabel("MSE")
        ax.set_xticks(np.arange(1, max(len(r.mse_per_step) for r in reports.values()) + 1))
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def comparison_table(reports: Mapping[str, MetricReport]) -> str:
    """Markdown table with models as rows and metrics as columns.

    The best value per column is bold and the second best underlined.
    """
    names = list(reports)
    headers = ["Model", "MSE↓", "Accuracy↑", "Precision↑", "Recall↑", "F1↑", "CSI↑", "MCC↑"]
    columns = {}
    for metric in METRIC_NAMES:
        values = [getattr(reports[n], metric) for n in names]
        order = sorted(set(values), reverse=metric not in LOWER_IS_BETTER)
        columns[metric] = (values, order)
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    for i, name in enumerate(names):
        cells = [name]
        for metric in METRIC_NAMES:
            values, order = columns[metric]
            text = f"{values[i]:.4f}"
            if len(names) > 1 and values[i] == order[0]:
                text = f"**{text}**"
            elif len(names) > 2 and len(order) > 1 and values[i] == order[1]:
                text = f"<u>{text}</u>"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
