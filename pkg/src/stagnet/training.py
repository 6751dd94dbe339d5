"""Gradient training, stratified k-fold cross-validation, and cross-dataset runs."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from stagnet.config import TrainConfig
from stagnet.data import FeatureBundle
from stagnet.metrics import MetricsReport, average_precision, compute_report
from stagnet.model import PredictionSeries, PreparedVideo, STAGNet, cross_entropy_loss, prepare_video
from stagnet.tensor import Tensor

logger = logging.getLogger(__name__)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One adaptive-moment update with bias correction.

    Missing gradients count as zero. A non-finite gradient anywhere skips the
    whole step (state untouched) and returns False.
    """
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            logger.warning("adam: non-finite gradient for %s, skipping step %d", name, state.step + 1)
            return False
    state.step += 1
    t = state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


class Adam:
    """Stateful wrapper binding the functional update to a parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.state = AdamState()
        self.skipped = 0

    def step(self) -> bool:
        grads = {name: p.grad for name, p in self.params.items()}
        ok = adam_step(self.params, grads, self.state, self.lr)
        if not ok:
            self.skipped += 1
        return ok

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- fitting ----------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_ap: float | None
    seconds: float


@dataclass
class FitResult:
    model: STAGNet
    history: list[EpochStats]
    best_epoch: int | None


def prepare_all(bundle: FeatureBundle, config: TrainConfig,
                ids: list[str] | None = None) -> dict[str, PreparedVideo]:
    ids = list(bundle.video_ids()) if ids is None else ids
    return {vid: prepare_video(bundle.video(vid), config) for vid in ids}


def predict_videos(model: STAGNet, prepared: dict[str, PreparedVideo],
                   ids: list[str]) -> list[PredictionSeries]:
    return [model.predict(prepared[vid]) for vid in ids]


def fit(bundle: FeatureBundle, config: TrainConfig,
        train_ids: list[str] | None = None, val_ids: list[str] | None = None,
        prepared: dict[str, PreparedVideo] | None = None, log_file=None) -> FitResult:
    """Train one model; retains the best-validation-AP parameters when asked.

    With ``config.select == "best"`` and a validation split, the parameters
    from the epoch with the highest validation AP are restored at the end;
    otherwise the last epoch's parameters stand.
    """
    train_ids = list(bundle.video_ids()) if train_ids is None else list(train_ids)
    if not train_ids:
        raise ValueError("fit: empty training set")
    if val_ids:
        overlap = set(train_ids) & set(val_ids)
        if overlap:
            raise ValueError(f"fit: train/validation leakage: {sorted(overlap)[:5]}")
    needed = train_ids + list(val_ids or [])
    if prepared is None:
        prepared = prepare_all(bundle, config, needed)

    model = STAGNet(config)
    optimizer = Adam(model.parameters(), config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 17])
    history: list[EpochStats] = []
    best: tuple[float, int, dict] | None = None  # (val ap, epoch, state)
    started = time.monotonic()

    for epoch in range(1, config.epochs + 1):
        order = list(train_ids)
        shuffle_rng.shuffle(order)
        losses = []
        for step, vid in enumerate(order, start=1):
            video = prepared[vid].video
            logits = model.forward(prepared[vid])
            loss = cross_entropy_loss(logits, video.label, video.onset, config.label_mode)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"fit: non-finite loss at epoch {epoch} step {step} ({vid})")
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            losses.append(value)
            if log_file is not None:
                log_file.write(json.dumps({
                    "epoch": epoch, "step": step, "loss": value,
                    "wall": round(time.monotonic() - started, 6),
                }) + "\n")
        val_ap = None
        if val_ids and config.select == "best":
            val_ap = average_precision(predict_videos(model, prepared, list(val_ids)))
            if best is None or val_ap > best[0]:
                best = (val_ap, epoch, model.state())
        history.append(EpochStats(epoch, float(np.mean(losses)), val_ap, time.monotonic() - started))

    best_epoch = None
    if best is not None:
        best_epoch = best[1]
        model.load_state(best[2])
    return FitResult(model, history, best_epoch)


# -- k-fold cross-validation ----------------------------------------------------


@dataclass
class FoldSplit:
    index: int
    train_ids: list[str]
    test_ids: list[str]


def stratified_folds(ids: list[str], labels: dict[str, int], folds: int, seed: int) -> list[FoldSplit]:
    """Disjoint folds with per-fold positive counts within one video of proportional."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if folds > len(ids):
        raise ValueError(f"{folds} folds for {len(ids)} videos")
    rng = np.random.default_rng([seed, 23])
    positives = [v for v in ids if labels[v] == 1]
    negatives = [v for v in ids if labels[v] == 0]
    rng.shuffle(positives)
    rng.shuffle(negatives)
    assignment: dict[str, int] = {}
    for group in (positives, negatives):
        for i, vid in enumerate(group):
            assignment[vid] = i % folds
    splits = []
    for f in range(folds):
        test = [v for v in ids if assignment[v] == f]
        train = [v for v in ids if assignment[v] != f]
        splits.append(FoldSplit(f, train, test))
    return splits


@dataclass
class FoldOutcome:
    fold: int
    test_ids: list[str]
    report: MetricsReport
    predictions: list[PredictionSeries]
    history: list[EpochStats]


@dataclass
class KFoldResult:
    folds: list[FoldOutcome]
    mean_ap: float
    mean_mtta: float


def kfold_run(bundle: FeatureBundle, config: TrainConfig, log_file=None) -> KFoldResult:
    """Train a fresh model per fold; report per-fold and mean AP/mTTA."""
    ids = bundle.video_ids()
    labels = {vid: bundle.label(vid) for vid in ids}
    splits = stratified_folds(ids, labels, config.folds, config.seed)
    tested = [vid for split in splits for vid in split.test_ids]
    assert sorted(tested) == sorted(ids), "every video must be tested exactly once"
    prepared = prepare_all(bundle, config)

    outcomes = []
    for split in splits:
        try:
            result = fit(bundle, config, split.train_ids, split.test_ids,
                         prepared=prepared, log_file=log_file)
            series = predict_videos(result.model, prepared, split.test_ids)
            report = compute_report(series)
        except Exception as exc:
            raise RuntimeError(f"fold {split.index} failed: {exc}") from exc
        outcomes.append(FoldOutcome(split.index, split.test_ids, report, series, result.history))
    mean_ap = float(np.mean([o.report.ap for o in outcomes]))
    mean_mtta = float(np.mean([o.report.mtta for o in outcomes]))
    return KFoldResult(outcomes, mean_ap, mean_mtta)


# -- cross-dataset evaluation -----------------------------------------------------


@dataclass
class CrossDatasetResult:
    train_dataset: str
    test_dataset: str
    report: MetricsReport
    predictions: list[PredictionSeries]
    history: list[EpochStats]


def cross_dataset_run(train_bundle: FeatureBundle, test_bundle: FeatureBundle,
                      config: TrainConfig, log_file=None) -> CrossDatasetResult:
    """Train on one bundle, evaluate on another with compatible features."""
    tm, em = train_bundle.manifest, test_bundle.manifest
    for dim in ("d1", "d2", "h", "slots"):
        if getattr(tm, dim) != getattr(em, dim):
            raise ValueError(
                f"cross-dataset: {dim} differs ({getattr(tm, dim)} vs {getattr(em, dim)})"
            )
    if tm.fps != em.fps and tm.resampled_from_fps is None and em.resampled_from_fps is None:
        raise ValueError(
            f"cross-dataset: fps {tm.fps} vs {em.fps} with no declared resample in either manifest"
        )
    result = fit(train_bundle, config, log_file=log_file)
    prepared = prepare_all(test_bundle, config)
    series = predict_videos(result.model, prepared, test_bundle.video_ids())
    report = compute_report(series)
    return CrossDatasetResult(tm.dataset, em.dataset, report, series, result.history)
