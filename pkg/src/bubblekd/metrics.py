"""Binary-classification evaluation: confusion counts, F1, MCC.

The positive class (label 1) is the air-bubble artifact. Any metric
whose denominator is zero evaluates to 0 by convention.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

REPORT_COLUMNS = ("split", "epoch", "accuracy", "f1", "mcc", "tp", "fp", "fn", "tn")


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    confusion: Confusion


def confusion(y_true, y_pred) -> Confusion:
    """Tally the four confusion cells over binary label vectors."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ContractError(
            f"label vectors must be 1-D and equal length, got {y_true.shape} and {y_pred.shape}"
        )
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ContractError(f"{name} contains non-binary labels")
    tp = int(np.count_nonzero((y_true == 1) & (y_pred == 1)))
    fp = int(np.count_nonzero((y_true == 0) & (y_pred == 1)))
    fn = int(np.count_nonzero((y_true == 1) & (y_pred == 0)))
    tn = int(np.count_nonzero((y_true == 0) & (y_pred == 0)))
    return Confusion(tp=tp, fp=fp, fn=fn, tn=tn)


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def scores(c: Confusion) -> MetricsReport:
    """Derive accuracy, precision, recall, F1 and MCC from counts."""
    if c.total == 0:
        raise ContractError("cannot score an empty confusion")
    accuracy = (c.tp + c.tn) / c.total
    precision = _safe_div(c.tp, c.tp + c.fp)
    recall = _safe_div(c.tp, c.tp + c.fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    denom = math.sqrt(
        float(c.tp + c.fp) * float(c.tp + c.fn) * float(c.tn + c.fp) * float(c.tn + c.fn)
    )
    mcc = _safe_div(float(c.tp) * c.tn - float(c.fp) * c.fn, denom)
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall,
                         f1=f1, mcc=mcc, confusion=c)


def evaluate_labels(y_true, y_pred) -> MetricsReport:
    return scores(confusion(y_true, y_pred))


def report_row(split: str, epoch, report: MetricsReport) -> list:
    c = report.confusion
    return [split, epoch, f"{report.accuracy:.6f}", f"{report.f1:.6f}",
            f"{report.mcc:.6f}", c.tp, c.fp, c.fn, c.tn]


def write_report_csv(path, rows: list[list]) -> None:
    """Rows as produced by report_row, under the standard header."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)
