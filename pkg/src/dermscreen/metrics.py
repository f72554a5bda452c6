"""Classification and detection metrics.

AUC and average precision are computed with the trapezoid rule over the
threshold sweep defined by the sorted unique prediction scores, so tied
predictions enter the curve together.  The ROC curve is anchored at
(FPR, TPR) = (0, 0) and (1, 1); the PR curve is anchored at
(TPR=0, PPV=1).  With these conventions AUC equals the Mann-Whitney
statistic with ties credited 0.5.

Detection metrics use greedy score-ordered matching: each prediction, in
descending score order, claims the still-unmatched ground-truth box of
highest IoU when that IoU meets the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from collections.abc import Iterable, Mapping, Sequence
from typing import NamedTuple

import numpy as np

from .data import Roi
from .errors import MetricUndefinedError

MAP_SWEEP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class ScoredLabel(NamedTuple):
    score: float
    label: int


def _scores_labels(pairs: Iterable[tuple[float, int]]) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    for score, label in pairs:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        if not math.isfinite(score):
            raise ValueError(f"score must be finite, got {score!r}")
        scores.append(float(score))
        labels.append(int(label))
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _threshold_points(scores: np.ndarray, flags: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (tp, fp, n) after each tie group, descending score order."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = flags[order]
    last_of_group = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([last_of_group, [len(s) - 1]])
    tp = np.cumsum(y)[idx]
    n = idx + 1
    return tp, n - tp, n


def auc(pairs: Iterable[tuple[float, int]]) -> float:
    """Area under the ROC curve by the trapezoid rule.

    Raises MetricUndefinedError unless both classes are present.
    """
    scores, labels = _scores_labels(pairs)
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    tp, fp, _ = _threshold_points(scores, labels)
    tpr = np.concatenate([[0.0], tp / pos])
    fpr = np.concatenate([[0.0], fp / neg])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)


def average_precision(pairs: Iterable[tuple[float, int]]) -> float:
    """Average precision: trapezoid over the (TPR, PPV) curve.

    Raises MetricUndefinedError when no positives are present.
    """
    scores, labels = _scores_labels(pairs)
    pos = int(labels.sum())
    if pos == 0:
        raise MetricUndefinedError("AP needs at least one positive")
    return _ranked_ap(scores, labels, pos)


def _ranked_ap(scores: np.ndarray, tp_flags: np.ndarray, positives_total: int) -> float:
    """AP over a ranking whose recall denominator is ``positives_total``."""
    if len(scores) == 0:
        return 0.0
    tp, fp, n = _threshold_points(scores, tp_flags)
    tpr = np.concatenate([[0.0], tp / positives_total])
    ppv = np.concatenate([[1.0], tp / n])
    return float(np.sum((tpr[1:] - tpr[:-1]) * (ppv[1:] + ppv[:-1])) / 2.0)


def iou(a: Roi, b: Roi) -> float:
    """Intersection over union of two center-format boxes."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def _as_box_score(prediction) -> tuple[Roi, float]:
    if isinstance(prediction, (tuple, list)):
        box, score = prediction
        return box, float(score)
    return prediction.box, float(prediction.score)


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one image's predictions against its ground truth."""

    iou_threshold: float
    pred_scores: tuple[float, ...]
    pred_is_tp: tuple[bool, ...]
    pred_match_iou: tuple[float, ...]
    gt_matched: tuple[bool, ...]
    gt_best_iou: tuple[float, ...]

    @property
    def tp_count(self) -> int:
        return sum(self.pred_is_tp)

    @property
    def fp_count(self) -> int:
        return len(self.pred_is_tp) - self.tp_count


def match_detections(
    predictions: Sequence,
    ground_truths: Sequence[Roi],
    iou_threshold: float,
) -> MatchResult:
    """Greedy one-to-one assignment of predictions to ground-truth boxes.

    Predictions are processed in descending score order (stable on ties);
    each claims the unmatched ground truth of highest IoU when that IoU is
    at least ``iou_threshold``, with IoU ties broken by ground-truth input
    order.  Each ground truth is matched at most once.
    """
    pairs = [_as_box_score(p) for p in predictions]
    order = sorted(range(len(pairs)), key=lambda i: -pairs[i][1])

    gt_taken = [False] * len(ground_truths)
    gt_best = [0.0] * len(ground_truths)
    scores = [0.0] * len(pairs)
    is_tp = [False] * len(pairs)
    match_iou = [0.0] * len(pairs)

    for rank, i in enumerate(order):
        box, score = pairs[i]
        scores[rank] = score
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(ground_truths):
            overlap = iou(box, gt)
            if overlap > gt_best[j]:
                gt_best[j] = overlap
            if gt_taken[j] or overlap < iou_threshold:
                continue
            if overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0:
            gt_taken[best_j] = True
            is_tp[rank] = True
            match_iou[rank] = best_iou

    return MatchResult(
        iou_threshold=iou_threshold,
        pred_scores=tuple(scores),
        pred_is_tp=tuple(is_tp),
        pred_match_iou=tuple(match_iou),
        gt_matched=tuple(gt_taken),
        gt_best_iou=tuple(gt_best),
    )


@dataclass(frozen=True)
class MapResult:
    per_threshold: dict[float, float]
    mean_50_95: float


def map_at(
    predictions_by_image: Mapping[str, Sequence],
    ground_truths_by_image: Mapping[str, Sequence[Roi]],
    thresholds: Sequence[float] = (0.5, 0.75),
) -> MapResult:
    """Class-agnostic detection AP at the requested IoU thresholds.

    Predictions are pooled across images after per-image TP/FP
    binarization; the recall denominator is the total ground-truth count.
    Also reports the mean AP over thresholds 0.5:0.05:0.95.
    """
    total_gt = sum(len(v) for v in ground_truths_by_image.values())
    if total_gt == 0:
        raise MetricUndefinedError("mAP needs at least one ground-truth box")

    def ap_at(threshold: float) -> float:
        pooled_scores: list[float] = []
        pooled_tp: list[int] = []
        for image_id, preds in predictions_by_image.items():
            gts = ground_truths_by_image.get(image_id, ())
            result = match_detections(preds, gts, threshold)
            pooled_scores.extend(result.pred_scores)
            pooled_tp.extend(int(t) for t in result.pred_is_tp)
        return _ranked_ap(
            np.asarray(pooled_scores, dtype=np.float64),
            np.asarray(pooled_tp, dtype=np.int64),
            total_gt,
        )

    per_threshold = {float(t): ap_at(float(t)) for t in thresholds}
    sweep = [per_threshold.get(t) if t in per_threshold else ap_at(t) for t in MAP_SWEEP_THRESHOLDS]
    return MapResult(per_threshold=per_threshold, mean_50_95=float(np.mean(sweep)))


def recall_any_overlap(
    predictions_by_image: Mapping[str, Sequence],
    ground_truths_by_image: Mapping[str, Sequence[Roi]],
) -> float:
    """Fraction of ground-truth boxes touched (IoU > 0) by any prediction."""
    total_gt = sum(len(v) for v in ground_truths_by_image.values())
    if total_gt == 0:
        raise MetricUndefinedError("recall needs at least one ground-truth box")
    hit = 0
    for image_id, gts in ground_truths_by_image.items():
        preds = [_as_box_score(p)[0] for p in predictions_by_image.get(image_id, ())]
        for gt in gts:
            if any(iou(p, gt) > 0.0 for p in preds):
                hit += 1
    return hit / total_gt


@dataclass(frozen=True)
class IouSummary:
    median: float
    q1: float
    q3: float
    count: int


def iou_summary(match_results: Iterable[MatchResult]) -> IouSummary:
    """Median and interquartile range of per-ground-truth best IoU.

    Only overlapping pairs (IoU > 0) contribute; quantiles use linear
    interpolation between order statistics.
    """
    values = [v for r in match_results for v in r.gt_best_iou if v > 0.0]
    if not values:
        raise MetricUndefinedError("IoU summary needs at least one overlapping match")
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0], method="linear")
    return IouSummary(median=float(med), q1=float(q1), q3=float(q3), count=len(values))
