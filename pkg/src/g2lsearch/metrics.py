"""Action segmentation metrics: frame accuracy, segmental edit score and F1@IoU.

All scores are percentages in [0, 100].  Dataset-level aggregation follows the
usual action-segmentation convention: accuracy pools frames over all videos,
edit is the mean of per-video scores and F1 pools true/false positive counts
over all videos before forming precision and recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, ShapeError

DEFAULT_THRESHOLDS = (0.1, 0.25, 0.5)


class Segment(NamedTuple):
    label: int
    start: int  # inclusive
    end: int    # exclusive


def _as_labels(seq) -> np.ndarray:
    arr = np.asarray(seq)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError("a label sequence must be a non-empty 1-D array")
    return arr


def to_segments(seq) -> list[Segment]:
    """Maximal runs of equal labels, in order."""
    labels = _as_labels(seq)
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [labels.size]))
    return [Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def from_segments(segments: Sequence[Segment]) -> np.ndarray:
    out = np.empty(segments[-1].end, dtype=np.int64)
    for seg in segments:
        out[seg.start:seg.end] = seg.label
    return out


def framewise_accuracy(pred, gt) -> float:
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"length mismatch: {pred.size} predicted vs {gt.size} ground-truth frames")
    return 100.0 * float(np.mean(pred == gt))


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance, one DP row at a time."""
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def edit_score(pred, gt) -> float:
    p = [s.label for s in to_segments(pred)]
    g = [s.label for s in to_segments(gt)]
    return 100.0 * (1.0 - levenshtein(p, g) / max(len(p), len(g)))


def _iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (max(a.end, b.end) - min(a.start, b.start))


def _check_tau(tau: float):
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"IoU threshold must lie in (0, 1), got {tau}")


def segment_counts(pred, gt, tau: float, matching: str = "optimal") -> tuple[int, int, int]:
    """True positives, false positives and false negatives at IoU > ``tau``.

    A predicted segment may be matched to at most one ground-truth segment of
    the same class whose IoU with it exceeds ``tau``, and vice versa.
    ``matching="optimal"`` maximises the number of matches (maximum bipartite
    matching).  ``matching="greedy"`` is the widely used in-order rule: each
    predicted segment takes its highest-IoU same-class ground-truth segment
    and counts only if that one is still free.  The greedy rule can undercount
    at low thresholds when one prediction spans two ground-truth segments.
    """
    _check_tau(tau)
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"length mismatch: {pred.size} predicted vs {gt.size} ground-truth frames")
    ps, gs = to_segments(pred), to_segments(gt)
    iou = np.array([[_iou(p, g) if p.label == g.label else 0.0 for g in gs] for p in ps])
    if matching == "optimal":
        ok = iou > tau
        rows, cols = linear_sum_assignment(ok.astype(np.int64), maximize=True)
        tp = int(ok[rows, cols].sum())
    elif matching == "greedy":
        hit = np.zeros(len(gs), dtype=bool)
        tp = 0
        for row in iou:
            j = int(np.argmax(row))
            if row[j] > tau and not hit[j]:
                hit[j] = True
                tp += 1
    else:
        raise ConfigError(f"unknown matching rule {matching!r}")
    return tp, len(ps) - tp, len(gs) - tp


def _f1(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_at_iou(pred, gt, tau: float, matching: str = "optimal") -> float:
    return _f1(*segment_counts(pred, gt, tau, matching))


def _threshold_key(tau: float) -> str:
    return f"{tau:.2f}"


@dataclass
class MetricsReport:
    acc: float
    edit: float
    f1: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "edit": self.edit,
            "f1": {_threshold_key(t): v for t, v in sorted(self.f1.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(float(d["acc"]), float(d["edit"]),
                   {float(k): float(v) for k, v in d["f1"].items()})

    def get(self, selector: str) -> float:
        """Look up one score by name: ``acc``, ``edit`` or ``f1@<tau>``."""
        return metric_value(self, selector)

    @classmethod
    def mean(cls, reports: Sequence[MetricsReport]) -> MetricsReport:
        taus = sorted(reports[0].f1)
        return cls(
            float(np.mean([r.acc for r in reports])),
            float(np.mean([r.edit for r in reports])),
            {t: float(np.mean([r.f1[t] for r in reports])) for t in taus},
        )


def parse_metric(selector: str) -> tuple[str, float | None]:
    sel = selector.strip().lower()
    if sel in ("acc", "edit"):
        return sel, None
    if sel.startswith("f1@"):
        try:
            tau = float(sel[3:])
        except ValueError:
            raise ConfigError(f"bad metric selector {selector!r}") from None
        _check_tau(tau)
        return "f1", tau
    raise ConfigError(f"unknown metric {selector!r}; use acc, edit or f1@<tau>")


def metric_value(rep: MetricsReport, selector: str) -> float:
    kind, tau = parse_metric(selector)
    if kind == "f1":
        for t, v in rep.f1.items():
            if abs(t - tau) < 1e-12:
                return v
        raise ConfigError(f"report has no F1 at {tau}")
    return getattr(rep, kind)


def report(preds: Sequence, gts: Sequence, thresholds=DEFAULT_THRESHOLDS,
           matching: str = "optimal") -> MetricsReport:
    """Dataset-level metrics over paired prediction / ground-truth sequences."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ShapeError("report needs a non-empty dataset with one prediction per video")
    correct = total = 0
    edits = []
    counts = {t: np.zeros(3, dtype=np.int64) for t in thresholds}
    for p, g in zip(preds, gts):
        p, g = _as_labels(p), _as_labels(g)
        if p.shape != g.shape:
            raise ShapeError(f"length mismatch: {p.size} vs {g.size}")
        correct += int(np.sum(p == g))
        total += p.size
        edits.append(edit_score(p, g))
        for t in thresholds:
            counts[t] += segment_counts(p, g, t, matching)
    return MetricsReport(
        acc=100.0 * correct / total,
        edit=float(np.mean(edits)),
        f1={float(t): float(_f1(*c)) for t, c in counts.items()},
    )
