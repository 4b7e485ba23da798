"""Accuracy and per-class precision-recall metrics, plus report files.

Reports are plain data (JSON or flattened CSV); rendering lives in the
figures module so these files stay consumable by any external plotter.

report.json schema (version 1):

    {
      "report_version": 1,
      "mode": str,                  # which prediction mode was evaluated
      "config": {...},              # caller-provided config snapshot
      "n_eval": int,
      "top1": float,                # exact correct / n_eval
      "confusion": [[int, ...]],    # C x C counts, row = true class
      "per_class_pr": {
        "<class>": [[threshold, precision, recall], ...]   # descending threshold
      }
    }

CSV output flattens the top-level scalars only, in a fixed column order:
mode, n_eval, top1, then config keys sorted by name.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure, LengthMismatch

REPORT_VERSION = 1


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class EvalReport:
    mode: str
    config: dict
    n_eval: int
    top1: float
    confusion: np.ndarray
    per_class_pr: dict[int, list[PrPoint]] = field(default_factory=dict)


def top1(preds: np.ndarray, truth: np.ndarray) -> float:
    """Exact fraction of top-1 predictions matching the true labels."""
    p = np.asarray(preds)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise LengthMismatch(f"preds length {p.size} vs truth length {t.size}")
    return float(np.count_nonzero(p == t)) / p.size


def confusion_matrix(preds: np.ndarray, truth: np.ndarray, class_count: int) -> np.ndarray:
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape or p.size == 0:
        raise LengthMismatch(f"preds length {p.size} vs truth length {t.size}")
    counts = np.bincount(t * class_count + p, minlength=class_count * class_count)
    return counts.reshape(class_count, class_count)


def pr_curve(scores: np.ndarray, truth: np.ndarray, cls: int) -> list[PrPoint]:
    """One-vs-rest precision-recall points for one class.

    The score of a sample is its predicted probability for ``cls``; a
    sample is predicted positive at threshold t when score >= t. One point
    is emitted per distinct score value, descending, so tied scores share
    a single point and the curve does not depend on sample order. With no
    positive predictions precision is defined as 1; with no true positives
    in the data recall is reported as 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth)
    if s.ndim != 2 or s.shape[0] != t.shape[0] or s.shape[0] == 0:
        raise LengthMismatch(f"scores shape {s.shape} vs truth length {t.size}")
    col = s[:, cls]
    positive = (t == cls).astype(np.int64)
    total_pos = int(positive.sum())

    order = np.argsort(-col, kind="stable")
    col = col[order]
    positive = positive[order]
    # last index of each run of tied scores -> cumulative counts at the tie
    boundary = np.flatnonzero(np.diff(col) != 0.0)
    last = np.concatenate([boundary, [col.size - 1]])
    tp = np.cumsum(positive)[last]
    predicted = last + 1

    points = []
    for i in range(last.size):
        n_pred = int(predicted[i])
        precision = float(tp[i] / n_pred) if n_pred else 1.0
        recall = float(tp[i] / total_pos) if total_pos else 0.0
        points.append(PrPoint(float(col[last[i]]), precision, recall))
    return points


def build_report(
    mode: str,
    config: dict,
    probs: np.ndarray,
    truth: np.ndarray,
    class_count: int,
    pr_classes: list[int] | None = None,
) -> EvalReport:
    """Assemble metrics from stacked per-sample distributions."""
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(truth, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != t.shape[0] or probs.shape[0] == 0:
        raise LengthMismatch(f"probs shape {probs.shape} vs truth length {t.size}")
    preds = probs.argmax(axis=1)
    report = EvalReport(
        mode=mode,
        config=config,
        n_eval=int(t.size),
        top1=top1(preds, t),
        confusion=confusion_matrix(preds, t, class_count),
    )
    for cls in pr_classes or []:
        report.per_class_pr[int(cls)] = pr_curve(probs, t, int(cls))
    return report


def _to_json_dict(report: EvalReport) -> dict:
    return {
        "report_version": REPORT_VERSION,
        "mode": report.mode,
        "config": report.config,
        "n_eval": report.n_eval,
        "top1": report.top1,
        "confusion": report.confusion.tolist(),
        "per_class_pr": {
            str(cls): [[p.threshold, p.precision, p.recall] for p in pts]
            for cls, pts in report.per_class_pr.items()
        },
    }


def write_report(report: EvalReport, path, format: str = "json") -> None:
    """Persist a report; JSON round-trips via read_report, CSV flattens."""
    fmt = str(format).lower()
    if fmt not in ("json", "csv"):
        raise IoFailure(f"unknown report format {format!r}")
    if fmt == "json":
        payload = json.dumps(_to_json_dict(report), indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        scalar_config = {
            k: v for k, v in sorted(report.config.items()) if np.isscalar(v) or v is None
        }
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mode", "n_eval", "top1", *scalar_config.keys()])
        writer.writerow([report.mode, report.n_eval, report.top1, *scalar_config.values()])
        payload = buf.getvalue()
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path!r}: {exc}") from exc


def read_report(path) -> EvalReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path!r}: {exc}") from exc
    return EvalReport(
        mode=data["mode"],
        config=data["config"],
        n_eval=data["n_eval"],
        top1=data["top1"],
        confusion=np.asarray(data["confusion"], dtype=np.int64),
        per_class_pr={
            int(cls): [PrPoint(*pt) for pt in pts]
            for cls, pts in data["per_class_pr"].items()
        },
    )
