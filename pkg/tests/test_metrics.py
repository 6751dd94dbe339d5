"""Evaluation metrics against exhaustive brute-force oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from stagnet.metrics import (
    MetricError,
    ap_from_scores,
    average_precision,
    baseline_ap,
    compute_report,
    frame_labels,
    mtta,
    threshold_grid,
    tta,
    tta_at_recall,
)
from stagnet.model import PredictionSeries


def rec(probs, label, onset=None, fps=10.0, vid="v0"):
    return PredictionSeries(vid, fps, np.asarray(probs, dtype=float), label, onset)


def ap_oracle(scores, labels):
    """Sweep every unique score (strict >) plus a below-minimum endpoint."""
    thresholds = sorted(set(scores), reverse=True)
    thresholds.append(min(scores) - 1.0)
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for alpha in thresholds:
        pred = [s > alpha for s in scores]
        n_pred = sum(pred)
        if n_pred == 0:
            continue
        tp = sum(1 for p, y in zip(pred, labels) if p and y == 1)
        precision = tp / n_pred
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def mtta_oracle(records):
    """Per-threshold average of per-video earliest-crossing times, then mean."""
    grid = sorted({p for r in records for p in r.probs} | {0.0, 1.0})
    per_alpha = []
    for alpha in grid:
        taus = []
        for r in records:
            if r.label != 1:
                continue
            crossing = None
            for t in range(1, r.onset):
                if r.probs[t - 1] > alpha:
                    crossing = t
                    break
            if crossing is not None:
                taus.append((r.onset - crossing) / r.fps)
        if taus:
            per_alpha.append(sum(taus) / len(taus))
    return sum(per_alpha) / len(per_alpha) if per_alpha else 0.0


def random_records(rng, n_videos=4, max_frames=5, quantize=False):
    records = []
    has_pos = has_neg = False
    for i in range(n_videos):
        n = int(rng.integers(2, max_frames + 1))
        probs = rng.uniform(0, 1, n)
        if quantize:
            probs = np.round(probs, 1)
        label = int(rng.uniform() < 0.5)
        if i == n_videos - 1 and not has_pos:
            label = 1
        if i == n_videos - 1 and label == 1 and not has_neg:
            label = 1  # negatives guaranteed below via extra record
        onset = int(rng.integers(2, n + 1)) if label else None
        records.append(rec(probs, label, onset, fps=float(rng.choice([10.0, 20.0])), vid=f"v{i}"))
        has_pos |= label == 1
        has_neg |= label == 0
    if not has_neg:
        records.append(rec(rng.uniform(0, 1, 3), 0, vid="extra-neg"))
    if not has_pos:
        records.append(rec(rng.uniform(0, 1, 4), 1, 3, vid="extra-pos"))
    return records


class TestFrameLabels:
    def test_negative_video_all_negative(self):
        labels, include = frame_labels(rec(np.linspace(0, 1, 50), 0))
        assert labels.sum() == 0 and include.all()

    def test_positive_pre_onset_only(self):
        labels, include = frame_labels(rec(np.zeros(100), 1, onset=91, fps=20.0))
        assert labels[:90].sum() == 90
        assert include[:90].all() and not include[90:].any()

    def test_onset_out_of_range_rejected(self):
        with pytest.raises(MetricError):
            frame_labels(rec(np.zeros(10), 1, onset=11))
        with pytest.raises(MetricError):
            frame_labels(rec(np.zeros(10), 1, onset=0))

    def test_negative_with_onset_rejected(self):
        with pytest.raises(MetricError):
            frame_labels(rec(np.zeros(10), 0, onset=5))


class TestAveragePrecision:
    def test_perfect_separation_is_exactly_one(self):
        records = [rec([0.9] * 6, 1, onset=6), rec([0.1] * 5, 0)]
        assert average_precision(records) == 1.0

    def test_fully_inverted_pair_is_half(self):
        ap, _ = ap_from_scores(np.array([0.2, 0.8]), np.array([1, 0]))
        assert ap == 0.5

    def test_identical_scores_single_point(self):
        ap, points = ap_from_scores(np.array([0.4, 0.4, 0.4, 0.4]), np.array([1, 0, 1, 0]))
        assert len(points) == 1
        assert ap == points[0].precision == 0.5

    def test_needs_both_classes(self):
        with pytest.raises(MetricError):
            ap_from_scores(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(21)
        for trial in range(300):
            records = random_records(rng, quantize=(trial % 2 == 0))
            scores, labels = [], []
            for r in records:
                lab, inc = frame_labels(r)
                scores.extend(r.probs[inc])
                labels.extend(lab[inc])
            if sum(labels) == 0 or sum(labels) == len(labels):
                continue
            got = ap_from_scores(np.array(scores), np.array(labels))[0]
            want = ap_oracle(scores, labels)
            assert abs(got - want) <= 1e-12

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            scores = rng.uniform(0, 1, 30)
            labels = rng.integers(0, 2, 30)
            if labels.sum() in (0, 30):
                continue
            base = ap_from_scores(scores, labels)[0]
            for transform in (lambda s: s ** 3, lambda s: np.exp(2 * s), lambda s: 5 * s + 1):
                assert abs(ap_from_scores(transform(scores), labels)[0] - base) <= 1e-12

    def test_random_scores_near_baseline_on_balanced_pool(self):
        # sigma is the spread of the AP-under-random-scores distribution; the
        # mean itself carries the small positive finite-sample bias of
        # step-interpolated AP, so a standard-error band would reject it
        rng = np.random.default_rng(23)
        labels = np.array([1] * 50 + [0] * 50)
        aps = [ap_from_scores(rng.uniform(0, 1, 100), labels)[0] for _ in range(200)]
        assert abs(np.mean(aps) - 0.5) <= 3 * np.std(aps)

    def test_video_level_mode(self):
        records = [rec([0.1, 0.8, 0.1], 1, onset=3), rec([0.3, 0.2, 0.4], 0)]
        assert average_precision(records, video_level=True) == 1.0


class TestTTA:
    def test_known_crossing(self):
        probs = np.zeros(100)
        probs[30:] = 0.9  # first crossing at frame 31 (1-based)
        assert tta(rec(probs, 1, onset=91, fps=20.0), 0.5) == 3.0

    def test_no_crossing_is_none(self):
        assert tta(rec(np.full(50, 0.1), 1, onset=40), 0.5) is None

    def test_crossing_at_last_pre_onset_frame(self):
        probs = np.zeros(50)
        probs[38] = 0.9  # frame 39 = onset - 1
        assert tta(rec(probs, 1, onset=40, fps=20.0), 0.5) == pytest.approx(1 / 20.0)

    def test_crossings_at_or_after_onset_ignored(self):
        probs = np.zeros(50)
        probs[45] = 0.9  # after onset 40
        assert tta(rec(probs, 1, onset=40), 0.5) is None

    def test_negative_record_rejected(self):
        with pytest.raises(MetricError):
            tta(rec(np.zeros(10), 0), 0.5)

    def test_non_increasing_in_alpha(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            record = rec(rng.uniform(0, 1, 30), 1, onset=int(rng.integers(5, 31)))
            taus = []
            for alpha in np.linspace(0, 1, 21):
                value = tta(record, alpha)
                taus.append(-1.0 if value is None else value)
            for early, late in zip(taus, taus[1:]):
                if late >= 0:
                    assert early >= late


class TestMTTA:
    def test_constant_full_confidence(self):
        records = [rec(np.ones(100), 1, onset=91, fps=20.0)]
        value, crossed = mtta(records)
        assert crossed
        assert value == pytest.approx(4.5, abs=1e-12)

    def test_two_video_case_matches_oracle(self):
        records = [
            rec([0.1, 0.4, 0.8, 0.9, 0.9], 1, onset=5, fps=10.0, vid="a"),
            rec([0.2, 0.2, 0.7, 0.9, 0.95], 1, onset=4, fps=10.0, vid="b"),
            rec([0.05, 0.1, 0.2, 0.1, 0.3], 0, fps=10.0, vid="c"),
        ]
        value, crossed = mtta(records)
        assert crossed
        assert abs(value - mtta_oracle(records)) <= 1e-12

    def test_matches_bruteforce_oracle_random(self):
        rng = np.random.default_rng(25)
        for _ in range(200):
            records = random_records(rng, n_videos=3, max_frames=5)
            value, _ = mtta(records)
            assert abs(value - mtta_oracle(records)) <= 1e-12

    def test_no_crossing_flagged_zero(self):
        records = [rec(np.zeros(10), 1, onset=8)]
        value, crossed = mtta(records, grid=np.array([0.5]))
        assert value == 0.0 and not crossed

    def test_include_misses_lowers_or_keeps_value(self):
        records = [
            rec([0.9, 0.9, 0.9], 1, onset=3, vid="hit"),
            rec([0.0, 0.0, 0.0], 1, onset=3, vid="miss"),
        ]
        strict, _ = mtta(records, include_misses=False)
        lenient, _ = mtta(records, include_misses=True)
        assert lenient <= strict

    def test_tta_at_recall_returns_threshold(self):
        records = [rec([0.1, 0.6, 0.9], 1, onset=3), rec([0.2, 0.1, 0.3], 0)]
        value, alpha = tta_at_recall(records, 0.8)
        assert value >= 0.0 and 0.0 <= alpha <= 1.0


class TestBaselineAP:
    def test_dataset_ratios(self):
        records = [rec([0.5], 1, onset=1) for _ in range(938)]
        records += [rec([0.5], 0) for _ in range(2299 - 938)]
        assert round(100 * baseline_ap(records), 1) == 40.8
        records = [rec([0.5], 1, onset=1) for _ in range(745)]
        records += [rec([0.5], 0) for _ in range(1490 - 745)]
        assert round(100 * baseline_ap(records), 1) == 50.0

    def test_all_positive(self):
        assert baseline_ap([rec([0.5], 1, onset=1)] * 3) == 1.0


class TestReport:
    def test_structure_and_flags(self):
        rng = np.random.default_rng(26)
        records = [
            rec(rng.uniform(0.5, 1.0, 20), 1, onset=15, vid="p1"),
            rec(rng.uniform(0.4, 0.9, 20), 1, onset=18, vid="p2"),
            rec(rng.uniform(0.0, 0.5, 20), 0, vid="n1"),
            rec(rng.uniform(0.0, 0.4, 20), 0, vid="n2"),
        ]
        report = compute_report(records, with_video_level=True)
        assert 0.0 <= report.ap <= 1.0
        assert report.baseline_ap == 0.5
        assert len(report.tta_table) == 2
        assert report.video_level_ap is not None
        recalls = [p.recall for p in report.pr_points]
        assert recalls == sorted(recalls)
        grid = threshold_grid(records)
        assert grid[0] == 0.0 and grid[-1] == 1.0
