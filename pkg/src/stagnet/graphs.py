"""Adjacency construction for the three message-passing graphs.

Spatial: per-frame object graph weighted by pixel proximity, normalized so all
valid entries sum to one. Temporal: links same-class objects in consecutive
frames by feature cosine similarity. Frame: causal video-level graph where
each frame receives directed edges from up to ``k`` immediate predecessors.

All builders return plain float64 arrays; weights are data-derived constants
and never carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned detection box given by center and extent in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy], dtype=np.float64)


def box_centers(boxes) -> np.ndarray:
    """Centers as an (n, 2) array from BoundingBox lists or (n, 2)/(n, 4) arrays."""
    if len(boxes) and isinstance(boxes[0], BoundingBox):
        return np.array([[b.cx, b.cy] for b in boxes], dtype=np.float64)
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (2, 4):
        raise ValueError(f"box_centers: expected (n, 2) or (n, 4), got {arr.shape}")
    return arr[:, :2]


def spatial_adjacency(boxes, mask: np.ndarray, normalize: str = "global") -> np.ndarray:
    """Proximity weights between objects of one frame.

    Entry (i, j) is exp(-euclidean pixel distance between centers i and j),
    normalized by the sum over all valid pairs including self pairs (which
    contribute exp(0) = 1 each). With ``normalize="row"`` each valid row is
    normalized independently instead. Rows/columns of masked slots are zero;
    a frame with no valid slot yields an all-zero matrix.
    """
    centers = box_centers(boxes)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (centers.shape[0],):
        raise ValueError(f"spatial_adjacency: mask shape {mask.shape} != ({centers.shape[0]},)")
    if normalize not in ("global", "row"):
        raise ValueError(f"spatial_adjacency: unknown normalize mode {normalize!r}")
    if not np.all(np.isfinite(centers[mask])):
        raise ValueError("spatial_adjacency: non-finite box centers")

    n = centers.shape[0]
    if not mask.any():
        return np.zeros((n, n))
    diff = centers[:, None, :] - centers[None, :, :]
    weights = np.exp(-np.sqrt((diff * diff).sum(axis=-1)))
    valid = np.outer(mask, mask)
    weights = np.where(valid, weights, 0.0)
    if normalize == "global":
        return weights / weights.sum()
    sums = weights.sum(axis=1, keepdims=True)
    return np.divide(weights, sums, out=np.zeros_like(weights), where=sums > 0)


def temporal_adjacency(
    curr_feats: np.ndarray,
    curr_labels: np.ndarray,
    curr_mask: np.ndarray,
    prev_feats: np.ndarray,
    prev_labels: np.ndarray,
    prev_mask: np.ndarray,
) -> np.ndarray:
    """Cross-frame weights from current objects to their previous-frame peers.

    Entry (i, j) is the cosine similarity between the raw visual features of
    current object i and previous object j when their class labels match, and
    zero otherwise. Cosines are clamped to [-1, 1] and kept signed; zero-norm
    features and masked slots give zero. The result is the rectangular
    current-by-previous block of the joint two-frame graph (see
    ``embed_joint``).
    """
    curr_feats = np.asarray(curr_feats, dtype=np.float64)
    prev_feats = np.asarray(prev_feats, dtype=np.float64)
    if curr_feats.ndim != 2 or prev_feats.ndim != 2 or curr_feats.shape[1] != prev_feats.shape[1]:
        raise ValueError(
            f"temporal_adjacency: feature dims {curr_feats.shape} and {prev_feats.shape} differ"
        )
    curr_mask = np.asarray(curr_mask, dtype=bool)
    prev_mask = np.asarray(prev_mask, dtype=bool)

    norms_c = np.linalg.norm(curr_feats, axis=1)
    norms_p = np.linalg.norm(prev_feats, axis=1)
    denom = np.outer(norms_c, norms_p)
    sims = np.divide(
        curr_feats @ prev_feats.T, denom, out=np.zeros((len(norms_c), len(norms_p))), where=denom > 0
    )
    sims = np.clip(sims, -1.0, 1.0)
    same_label = np.asarray(curr_labels)[:, None] == np.asarray(prev_labels)[None, :]
    valid = np.outer(curr_mask, prev_mask)
    return np.where(same_label & valid, sims, 0.0)


def embed_joint(block: np.ndarray) -> np.ndarray:
    """Embed a current-by-previous block into the square joint-graph matrix.

    Nodes 0..n-1 are the current frame's objects and nodes n..n+m-1 the
    previous frame's; the only edges run from current nodes to previous ones.
    """
    n, m = block.shape
    joint = np.zeros((n + m, n + m))
    joint[:n, n:] = block
    return joint


def frame_adjacency(n_frames: int, k: int) -> np.ndarray:
    """Causal frame graph: edge (i, j) iff frame j lies 1..k steps in the past.

    Strictly lower-banded: no self loops and no future edges, so the upper
    triangle is identically zero.
    """
    if n_frames < 1:
        raise ValueError(f"frame_adjacency: need at least one frame, got {n_frames}")
    if k < 1:
        raise ValueError(f"frame_adjacency: window must be positive, got {k}")
    i = np.arange(n_frames)
    lag = i[:, None] - i[None, :]
    return ((lag >= 1) & (lag <= k)).astype(np.float64)
