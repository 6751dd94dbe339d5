"""Shared builders for toy configs and hand-rolled videos."""

import numpy as np
import pytest

from stagnet.config import TrainConfig
from stagnet.data import VideoSample


def toy_config(**overrides) -> TrainConfig:
    """A small architecture matching the toy video dims below."""
    base = dict(
        d1=6, d2=4, h=8, slots=3, k=4, u=1,
        phi_e_dim=4, phi_l_dim=3, gat_obj_dim=4,
        phi_fr_dim=5, lstm_hidden=5, gat_frame_dim=4, classifier_hidden=6,
        lr=1e-3, epochs=2, seed=0, folds=2,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_video(rng, video_id="v0", n_frames=5, slots=3, d1=6, d2=4, h=8,
               label=0, onset=None, fps=10.0, n_valid=None) -> VideoSample:
    """Random but structurally valid video sample.

    Coordinates live on a small frame (16x12) so that exp(-distance) spatial
    weights stay graded instead of underflowing.
    """
    n_valid = slots if n_valid is None else n_valid
    boxes = np.zeros((n_frames, slots, 4), dtype=np.float32)
    class_ids = np.zeros((n_frames, slots), dtype=np.int32)
    mask = np.zeros((n_frames, slots), dtype=bool)
    f_e = np.zeros((n_frames, slots, d1), dtype=np.float32)
    f_l = np.zeros((n_frames, slots, d2), dtype=np.float32)
    for obj in range(n_valid):
        mask[:, obj] = True
        class_ids[:, obj] = rng.integers(0, 3)
        boxes[:, obj, 0] = rng.uniform(1.0, 15.0, n_frames)
        boxes[:, obj, 1] = rng.uniform(1.0, 11.0, n_frames)
        boxes[:, obj, 2] = rng.uniform(0.5, 1.6)
        boxes[:, obj, 3] = rng.uniform(0.5, 1.6)
        f_e[:, obj] = rng.normal(0, 1, (n_frames, d1)).astype(np.float32)
        f_l[:, obj] = rng.normal(0, 1, d2).astype(np.float32)
    f_fr = rng.normal(0, 1, (n_frames, h)).astype(np.float32)
    return VideoSample(video_id, fps, label, onset, boxes, class_ids, mask, f_e, f_l, f_fr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
