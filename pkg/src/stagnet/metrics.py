"""Evaluation protocol: frame-level average precision and time-to-accident.

Frames of positive videos before the onset count as positive examples; frames
from the onset onward are excluded from precision-recall pooling (the task is
anticipation, not detection). All frames of negative videos are negatives.
Sweeping the decision threshold over the pooled scores yields the PR curve and
its step-interpolated area; TTA measures how many seconds before the onset the
probability first exceeds a threshold, and mTTA averages that over the
threshold grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from stagnet.model import PredictionSeries

logger = logging.getLogger(__name__)

EvalRecord = PredictionSeries  # prediction series plus label/onset/fps is what metrics consume


class MetricError(ValueError):
    pass


@dataclass
class PRPoint:
    cutoff: float  # predictions are "prob > cutoff"
    precision: float
    recall: float


@dataclass
class MetricsReport:
    ap: float
    mtta: float
    baseline_ap: float
    pr_points: list[PRPoint]
    threshold_grid: list[float]
    tta_table: list[dict]  # per positive video: id, onset, fps, crossings, tta@0.5, mean tta
    video_level_ap: float | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.ap <= 1.0):
            raise MetricError(f"AP {self.ap} outside [0, 1]")
        if self.mtta < 0:
            raise MetricError(f"mTTA {self.mtta} negative")
        recalls = [p.recall for p in self.pr_points]
        if recalls != sorted(recalls):
            raise MetricError("PR points not sorted by recall")


def frame_labels(record: EvalRecord) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ground truth and an inclusion mask for PR pooling."""
    n = len(record.probs)
    if record.label == 1:
        if record.onset is None or not (1 <= record.onset <= n):
            raise MetricError(f"{record.video_id}: positive video needs onset in [1, {n}], got {record.onset}")
        labels = np.zeros(n, dtype=int)
        include = np.zeros(n, dtype=bool)
        labels[: record.onset - 1] = 1
        include[: record.onset - 1] = True
        return labels, include
    if record.onset is not None:
        raise MetricError(f"{record.video_id}: negative video carries an onset")
    return np.zeros(n, dtype=int), np.ones(n, dtype=bool)


def pooled_scores(records: list[EvalRecord], video_level: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Flatten records into (scores, labels); video level uses max included prob."""
    scores, labels = [], []
    for record in records:
        lab, inc = frame_labels(record)
        if video_level:
            if not inc.any():
                continue
            scores.append(record.probs[inc].max())
            labels.append(record.label)
        else:
            scores.extend(record.probs[inc])
            labels.extend(lab[inc])
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=int)


def ap_from_scores(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[PRPoint]]:
    """Step-interpolated area under the precision-recall curve.

    Thresholds sweep the sorted unique scores (predictions are strict
    ``score > alpha``), closing with a point below the minimum so recall
    reaches 1; ties enter the curve together.
    """
    if len(scores) == 0 or labels.sum() == 0 or labels.sum() == len(labels):
        raise MetricError("AP needs at least one positive and one negative pooled frame")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    boundaries = np.nonzero(np.diff(s))[0]
    ends = np.append(boundaries, len(s) - 1)  # inclusive index where each score group ends
    tp = np.cumsum(y)[ends]
    predicted = ends + 1.0
    precision = tp / predicted
    recall = tp / labels.sum()
    ap = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    points = [PRPoint(float(s[e]), float(p), float(r)) for e, p, r in zip(ends, precision, recall)]
    return ap, points


def average_precision(records: list[EvalRecord], video_level: bool = False) -> float:
    scores, labels = pooled_scores(records, video_level=video_level)
    ap, _ = ap_from_scores(scores, labels)
    return ap


def tta(record: EvalRecord, alpha: float) -> float | None:
    """Seconds between the earliest pre-onset crossing of alpha and the onset."""
    if record.label != 1:
        raise MetricError(f"{record.video_id}: TTA is defined for positive videos only")
    _, include = frame_labels(record)
    pre = record.probs[: record.onset - 1]
    hits = np.nonzero(pre > alpha)[0]
    if hits.size == 0:
        return None
    t = int(hits[0]) + 1  # 1-based frame index
    return (record.onset - t) / record.fps


def threshold_grid(records: list[EvalRecord]) -> np.ndarray:
    """All unique predicted probabilities in the pool, plus the 0 and 1 endpoints."""
    values = np.concatenate([r.probs for r in records] + [np.array([0.0, 1.0])])
    return np.unique(values)


def mtta(records: list[EvalRecord], grid: np.ndarray | None = None,
         include_misses: bool = False) -> tuple[float, bool]:
    """Mean TTA over all thresholds with at least one crossing.

    Returns (value, crossed_any); a pool where no positive video ever crosses
    any threshold yields (0.0, False). ``include_misses`` counts non-crossing
    videos as zero seconds inside each threshold's average.
    """
    positives = [r for r in records if r.label == 1]
    if not positives:
        raise MetricError("mTTA needs at least one positive video")
    if grid is None:
        grid = threshold_grid(records)
    grid = np.asarray(grid, dtype=np.float64)

    # per video: earliest pre-onset crossing as a function of alpha, via the
    # running maximum of the pre-onset probabilities
    per_alpha_sum = np.zeros(len(grid))
    per_alpha_count = np.zeros(len(grid))
    for record in positives:
        pre = record.probs[: record.onset - 1]
        if pre.size == 0:
            continue
        running = np.maximum.accumulate(pre)
        first = np.searchsorted(running, grid, side="right")  # index of first prob > alpha
        crossed = first < pre.size
        tau = np.where(crossed, (record.onset - (first + 1)) / record.fps, 0.0)
        per_alpha_sum += tau
        per_alpha_count += crossed
    if include_misses:
        valid = per_alpha_count > 0
        averages = per_alpha_sum[valid] / len(positives)
    else:
        valid = per_alpha_count > 0
        averages = per_alpha_sum[valid] / per_alpha_count[valid]
    if averages.size == 0:
        logger.warning("mTTA: no positive video crosses any threshold")
        return 0.0, False
    return float(averages.mean()), True


def tta_at_recall(records: list[EvalRecord], target_recall: float = 0.8) -> tuple[float, float]:
    """Alternative single-threshold view: mean TTA at the threshold whose
    frame-level recall is closest to ``target_recall``. Returns (tta, alpha)."""
    scores, labels = pooled_scores(records)
    _, points = ap_from_scores(scores, labels)
    best = min(points, key=lambda p: abs(p.recall - target_recall))
    taus = [tta(r, best.cutoff) for r in records if r.label == 1]
    taus = [t for t in taus if t is not None]
    return (float(np.mean(taus)) if taus else 0.0, best.cutoff)


def baseline_ap(records: list[EvalRecord]) -> float:
    """Accident-video fraction: the AP of an uninformative scorer."""
    if not records:
        raise MetricError("baseline AP of an empty pool")
    return sum(r.label == 1 for r in records) / len(records)


def compute_report(records: list[EvalRecord], with_video_level: bool = False) -> MetricsReport:
    scores, labels = pooled_scores(records)
    ap, points = ap_from_scores(scores, labels)
    grid = threshold_grid(records)
    mtta_value, crossed = mtta(records, grid)
    flags = [] if crossed else ["no-threshold-crossed"]
    table = []
    for record in records:
        if record.label != 1:
            continue
        taus = [tta(record, a) for a in grid]
        hit = [t for t in taus if t is not None]
        tta_mid = tta(record, 0.5)
        table.append(
            {
                "video_id": record.video_id,
                "onset": record.onset,
                "fps": record.fps,
                "crossings": len(hit),
                "tta_at_0.5": tta_mid,
                "mean_tta": float(np.mean(hit)) if hit else None,
            }
        )
    video_ap = average_precision(records, video_level=True) if with_video_level else None
    return MetricsReport(
        ap=ap,
        mtta=mtta_value,
        baseline_ap=baseline_ap(records),
        pr_points=points,
        threshold_grid=[float(v) for v in grid],
        tta_table=table,
        video_level_ap=video_ap,
        flags=flags,
    )
