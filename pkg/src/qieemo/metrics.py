"""Four-class emotion evaluation: confusion matrix, WA, UA, weighted F1."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .fusion import CLASS_NAMES, NUM_CLASSES


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted.

    Emotion evaluation uses the default 4x4 layout in CLASS_NAMES order; the
    symbol probe reuses the same machinery with a wider matrix.
    """

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    wa: float
    ua: float
    wf1: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]

    CSV_HEADER = ("run_id", "seed", "wa", "ua", "wf1") + tuple(
        f"recall_{name}" for name in CLASS_NAMES)

    def csv_row(self, run_id: str, seed: int) -> list[str]:
        vals = [self.wa, self.ua, self.wf1, *self.recall]
        return [run_id, str(seed)] + [f"{v:.6f}" for v in vals]


def confusion_from_pairs(true_labels: Sequence[int], pred_labels: Sequence[int],
                         num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    if len(true_labels) != len(pred_labels):
        raise InputError(
            f"{len(true_labels)} true labels vs {len(pred_labels)} predictions")
    cm = ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))
    for t, p in zip(true_labels, pred_labels):
        t, p = int(t), int(p)
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise InputError(f"label pair ({t}, {p}) outside [0, {num_classes})")
        cm.counts[t, p] += 1
    return cm


def compute_metrics(cm: ConfusionMatrix) -> EvalReport:
    """Weighted accuracy, unweighted accuracy (mean recall over supported
    classes), and support-weighted F1. Zero-support classes are excluded from
    UA and carry zero weight in WF1."""
    total = cm.total
    if total == 0:
        raise InputError("cannot evaluate an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    support = row_sums.astype(np.int64)

    recall = np.where(row_sums > 0, diag / np.maximum(row_sums, 1), 0.0)
    precision = np.where(col_sums > 0, diag / np.maximum(col_sums, 1), 0.0)
    pr = precision + recall
    f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)

    wa = float(diag.sum() / total)
    supported = row_sums > 0
    ua = float(recall[supported].mean()) if supported.any() else 0.0
    wf1 = float((support * f1).sum() / total)
    return EvalReport(wa=wa, ua=ua, wf1=wf1,
                      precision=tuple(precision), recall=tuple(recall),
                      f1=tuple(f1), support=tuple(int(s) for s in support))


def write_metrics_csv(path: str | Path, rows: Iterable[tuple[str, int, EvalReport]]) -> None:
    """Write reports as CSV with the mandatory header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EvalReport.CSV_HEADER)
        for run_id, seed, report in rows:
            writer.writerow(report.csv_row(run_id, seed))


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
