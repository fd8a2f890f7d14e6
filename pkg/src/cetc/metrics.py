"""Confusion-matrix construction and the six binary evaluation metrics.

ACC = (TP+TN)/total, NPV = TN/(TN+FN), PPV = TP/(TP+FP),
SEN = TP/(TP+FN), SPE = TN/(TN+FP), FOS = 2TP/(2TP+FN+FP).

A metric whose denominator is zero is *undefined* (``None``), rendered as
an em-dash in tables; percentages round half-up to one decimal.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

import numpy as np

__all__ = ["ConfusionMatrix", "MetricReport", "Predictions", "confusion_matrix",
           "compute_metrics", "format_percent", "render_table",
           "reports_to_csv", "METRIC_COLUMNS"]

METRIC_COLUMNS = ("acc", "npv", "ppv", "sen", "spe", "fos")


@dataclass(frozen=True)
class Predictions:
    """Per-example classifier outputs; predicted labels are the argmax row."""

    true_labels: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.true_labels)
        lg = np.asarray(self.logits)
        if lg.ndim != 2 or t.shape != (lg.shape[0],):
            raise ValueError(
                f"need (n,) labels with (n, classes) logits, got {t.shape} "
                f"and {lg.shape}"
            )

    @property
    def predicted_labels(self) -> np.ndarray:
        return np.asarray(self.logits).argmax(axis=1)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_matrix(true_labels, pred_labels: Optional[Sequence[int]] = None,
                     positive_class: int = 1) -> ConfusionMatrix:
    """Tally TP/FP/TN/FN from labels, or from a :class:`Predictions` batch."""
    if isinstance(true_labels, Predictions):
        if pred_labels is not None:
            raise TypeError("pass either a Predictions batch or two label arrays")
        pred_labels = true_labels.predicted_labels
        true_labels = true_labels.true_labels
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.size == 0:
        raise ValueError("cannot build a confusion matrix from zero predictions")
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
    pos_t = t == positive_class
    pos_p = p == positive_class
    return ConfusionMatrix(
        tp=int(np.sum(pos_t & pos_p)),
        fp=int(np.sum(~pos_t & pos_p)),
        tn=int(np.sum(~pos_t & ~pos_p)),
        fn=int(np.sum(pos_t & ~pos_p)),
    )


@dataclass(frozen=True)
class MetricReport:
    acc: Optional[float]
    npv: Optional[float]
    ppv: Optional[float]
    sen: Optional[float]
    spe: Optional[float]
    fos: Optional[float]

    def as_dict(self) -> dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    if cm.total <= 0:
        raise ValueError("confusion matrix has zero total count")
    return MetricReport(
        acc=(cm.tp + cm.tn) / cm.total,
        npv=_ratio(cm.tn, cm.tn + cm.fn),
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        sen=_ratio(cm.tp, cm.tp + cm.fn),
        spe=_ratio(cm.tn, cm.tn + cm.fp),
        fos=_ratio(2 * cm.tp, 2 * cm.tp + cm.fn + cm.fp),
    )


def format_percent(value: Optional[float]) -> str:
    """Half-up one-decimal percentage, or an em-dash when undefined."""
    if value is None:
        return "—"
    q = Decimal(value * 100.0).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{q}%"


def render_table(rows: list[tuple[str, MetricReport]], bold_best: bool = False) -> str:
    """Aligned text table (label + ACC/NPV/PPV/SEN/SPE/FOS columns).

    With ``bold_best`` the best defined value in each metric column is
    wrapped in asterisks, mirroring the bolding convention of printed
    comparison tables.
    """
    header = ["config"] + [c.upper() for c in METRIC_COLUMNS]
    best: dict[str, Optional[float]] = {c: None for c in METRIC_COLUMNS}
    if bold_best:
        for _, rep in rows:
            for c in METRIC_COLUMNS:
                v = getattr(rep, c)
                if v is not None and (best[c] is None or v > best[c]):
                    best[c] = v
    body = []
    for label, rep in rows:
        cells = [label]
        for c in METRIC_COLUMNS:
            v = getattr(rep, c)
            cell = format_percent(v)
            if bold_best and v is not None and v == best[c]:
                cell = f"*{cell}*"
            cells.append(cell)
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for cells in [header] + body:
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def reports_to_csv(rows: list[tuple[str, MetricReport]],
                   extra: Optional[dict[str, list]] = None) -> str:
    """CSV dump with full-precision values; undefined metrics are empty cells."""
    out = io.StringIO()
    extra = extra or {}
    writer = csv.writer(out)
    writer.writerow(["config"] + list(METRIC_COLUMNS) + list(extra))
    for i, (label, rep) in enumerate(rows):
        cells = [label]
        for c in METRIC_COLUMNS:
            v = getattr(rep, c)
            cells.append("" if v is None else repr(v))
        for key in extra:
            cells.append(extra[key][i])
        writer.writerow(cells)
    return out.getvalue()
