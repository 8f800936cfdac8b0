"""Confusion-matrix scores and confidence-threshold tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError


@dataclass
class EvalReport:
    classes: List
    confusion: np.ndarray  # rows = reference, columns = prediction
    oa: float
    precision: np.ndarray  # NaN where a class was never predicted
    recall: np.ndarray  # NaN where a class has no reference point
    f1: np.ndarray
    mean_confidence: float

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    @property
    def macro_precision(self) -> float:
        return _nanmean(self.precision)

    @property
    def macro_recall(self) -> float:
        return _nanmean(self.recall)

    @property
    def macro_f1(self) -> float:
        return _nanmean(self.f1)

    def to_text(self) -> str:
        """Delimited report: scores, per-class table, then the confusion block."""
        out = [f"oa,{_fmt(self.oa)}", f"mean_confidence,{_fmt(self.mean_confidence)}",
               f"macro_precision,{_fmt(self.macro_precision)}",
               f"macro_recall,{_fmt(self.macro_recall)}", f"macro_f1,{_fmt(self.macro_f1)}", "",
               "class,support,precision,recall,f1"]
        support = self.confusion.sum(axis=1)
        for c, s, p, r, f in zip(self.classes, support, self.precision, self.recall, self.f1):
            out.append(f"{c},{int(s)},{_fmt(p)},{_fmt(r)},{_fmt(f)}")
        out.append("")
        out.append("reference\\predicted," + ",".join(str(c) for c in self.classes))
        for c, row in zip(self.classes, self.confusion):
            out.append(f"{c}," + ",".join(str(int(v)) for v in row))
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return "NaN" if v != v else f"{float(v):.6f}"


def _nanmean(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    a = a[~np.isnan(a)]
    return float(a.mean()) if len(a) else float("nan")


def evaluate(y_true, y_pred, conf=None, classes: Optional[Sequence] = None) -> EvalReport:
    """Overall accuracy plus per-class precision, recall and F1.

    Args:
        y_true: reference labels.
        y_pred: predicted labels.
        conf: optional per-point confidences (for ``mean_confidence``).
        classes: label order of the confusion matrix; defaults to the sorted
            union of both label sets.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) != len(y_pred):
        raise DataError(f"{len(y_true)} reference labels but {len(y_pred)} predictions")
    if conf is not None and len(conf) != len(y_true):
        raise DataError("one confidence per point is required")
    if classes is None:
        classes = np.unique(np.concatenate([y_true, y_pred]))
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    try:
        ti = np.array([pos[c] for c in y_true.tolist()], np.int64)
        pi = np.array([pos[c] for c in y_pred.tolist()], np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in the class list") from None
    k = len(classes)
    cm = np.zeros((k, k), np.int64)
    np.add.at(cm, (ti, pi), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_n > 0, tp / pred_n, np.nan)
        recall = np.where(true_n > 0, tp / true_n, np.nan)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, np.where(np.isnan(denom), np.nan, 0.0))
    total = cm.sum()
    oa = float(tp.sum() / total) if total else float("nan")
    mc = float(np.mean(conf)) if conf is not None and len(conf) else float("nan")
    return EvalReport(classes, cm, oa, precision, recall, f1, mc)


def confidence_filter_table(y_true, y_pred, conf, thresholds) -> List[Tuple[float, float, float]]:
    """``(threshold, OA of points with conf >= threshold, kept fraction)`` rows.

    OA is NaN for a threshold that drops every point.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    conf = np.asarray(conf, dtype=np.float64)
    if not (len(y_true) == len(y_pred) == len(conf)):
        raise DataError("labels, predictions and confidences must have equal lengths")
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise DataError("thresholds must be ascending")
    right = y_true == y_pred
    n = len(conf)
    rows = []
    for t in thresholds:
        keep = conf >= t
        k = int(keep.sum())
        oa = float(right[keep].mean()) if k else float("nan")
        rows.append((t, oa, k / n if n else float("nan")))
    return rows


def filter_table_text(rows) -> str:
    lines = ["threshold,oa,kept_fraction"]
    for t, oa, kept in rows:
        lines.append(f"{t:g},{_fmt(oa)},{_fmt(kept)}")
    return "\n".join(lines) + "\n"
