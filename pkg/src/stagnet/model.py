"""The end-to-end accident predictor and its loss.

Three branches per video: a per-frame object graph (spatial proximity plus
temporal same-class links) attended and mean-pooled into one embedding per
frame; per-frame global descriptors projected and aggregated by an LSTM; and a
causal frame graph where two parallel attention layers mix both sequences
before a two-layer classifier outputs per-frame accident logits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from stagnet import tensor as T
from stagnet.config import TrainConfig
from stagnet.graphs import frame_adjacency, spatial_adjacency, temporal_adjacency
from stagnet.layers import GATv2, Linear, LSTM, load_checkpoint, save_checkpoint
from stagnet.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

ACCIDENT_CLASS = 1


@dataclass
class PredictionSeries:
    """Per-frame accident probabilities for one video."""

    video_id: str
    fps: float
    probs: np.ndarray
    label: int
    onset: int | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ValueError(f"{self.video_id}: probs must be 1-D, got {self.probs.shape}")
        if np.any((self.probs < 0) | (self.probs > 1)):
            raise ValueError(f"{self.video_id}: probabilities outside [0, 1]")


@dataclass
class PreparedVideo:
    """A video plus its precomputed (constant) adjacency stacks."""

    video: object
    a_spatial: np.ndarray  # N x S x S
    a_temporal: np.ndarray  # N x S x S, block t couples frame t to frame t-u
    a_frame: np.ndarray  # N x N


def prepare_video(video, config: TrainConfig) -> PreparedVideo:
    """Build all adjacency matrices once; they are data, not parameters."""
    mask = np.asarray(video.mask, dtype=bool)
    n_frames, slots = mask.shape
    empty = np.nonzero(~mask.any(axis=1))[0]
    if empty.size:
        logger.warning("video %s: frames %s have no valid detections", video.video_id, empty.tolist())
    a_spatial = np.stack(
        [spatial_adjacency(video.boxes[t], mask[t], config.spatial_norm) for t in range(n_frames)]
    )
    a_temporal = np.zeros((n_frames, slots, slots))
    for t in range(config.u, n_frames):
        a_temporal[t] = temporal_adjacency(
            video.f_e[t], video.class_ids[t], mask[t],
            video.f_e[t - config.u], video.class_ids[t - config.u], mask[t - config.u],
        )
    return PreparedVideo(video, a_spatial, a_temporal, frame_adjacency(n_frames, config.k))


class STAGNet:
    """Spatio-temporal attention graph network over precomputed features."""

    def __init__(self, config: TrainConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        node_dim = c.phi_e_dim + c.phi_l_dim
        obj_dim = 2 * c.gat_obj_dim
        glob_dim = c.lstm_hidden if c.use_lstm else c.phi_fr_dim
        gat_kw = dict(
            heads=c.heads, slope=c.leaky_slope, edge_mode=c.edge_mode, attention=c.attention
        )
        self.phi_e = Linear(c.d1, c.phi_e_dim, rng, "phi_e")
        self.phi_l = Linear(c.d2, c.phi_l_dim, rng, "phi_l")
        self.gat_spatial = GATv2(node_dim, c.gat_obj_dim, rng, name="gat_spatial", **gat_kw)
        self.gat_temporal = GATv2(node_dim, c.gat_obj_dim, rng, name="gat_temporal", **gat_kw)
        self.phi_fr = Linear(c.h, c.phi_fr_dim, rng, "phi_fr")
        self.lstm = LSTM(c.phi_fr_dim, c.lstm_hidden, rng, "lstm") if c.use_lstm else None
        self.gat_frame_obj = GATv2(obj_dim, c.gat_frame_dim, rng, name="gat_frame_obj", **gat_kw)
        self.gat_frame_glob = GATv2(glob_dim, c.gat_frame_dim, rng, name="gat_frame_glob", **gat_kw)
        self.cls_hidden = Linear(2 * c.gat_frame_dim, c.classifier_hidden, rng, "cls_hidden")
        self.cls_out = Linear(c.classifier_hidden, 2, rng, "cls_out")
        self._modules = [
            self.phi_e, self.phi_l, self.gat_spatial, self.gat_temporal, self.phi_fr,
            *([self.lstm] if self.lstm else []),
            self.gat_frame_obj, self.gat_frame_glob, self.cls_hidden, self.cls_out,
        ]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for module in self._modules:
            for name, param in module.parameters().items():
                if name in out:
                    raise ValueError(f"duplicate parameter name {name}")
                out[name] = param
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if params[name].shape != value.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {params[name].shape}")
            params[name].data[:] = value

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # -- branches ------------------------------------------------------------

    def object_branch(self, prep: PreparedVideo) -> Tensor:
        """Per-frame object embeddings: attended object graph, pooled over valid slots."""
        video = prep.video
        mask = np.asarray(video.mask, dtype=bool)
        n_frames, slots = mask.shape
        c = self.config
        f_e = Tensor(np.asarray(video.f_e, dtype=np.float64))
        f_l = Tensor(np.asarray(video.f_l, dtype=np.float64))
        node = T.concat([self.phi_e(f_e), self.phi_l(f_l)], axis=-1)
        f_spatial = self.gat_spatial(node, node, prep.a_spatial)

        node_dim = c.phi_e_dim + c.phi_l_dim
        if n_frames > c.u:
            prev = T.concat(
                [Tensor(np.zeros((c.u, slots, node_dim))), T.narrow(node, 0, 0, n_frames - c.u)],
                axis=0,
            )
        else:
            prev = Tensor(np.zeros((n_frames, slots, node_dim)))
        f_temporal = self.gat_temporal(node, prev, prep.a_temporal)

        f_obj = T.concat([f_spatial, f_temporal], axis=-1)
        dim = 2 * c.gat_obj_dim
        valid = np.repeat(mask[:, :, None].astype(np.float64), dim, axis=2)
        if c.pool == "mean":
            counts = mask.sum(axis=1).astype(np.float64)
            inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
            summed = T.tsum(T.mul(f_obj, Tensor(valid)), axis=1)
            return T.mul(summed, Tensor(np.repeat(inv[:, None], dim, axis=1)))
        filled = T.masked_fill(f_obj, ~(valid > 0), T.NEG_FILL)
        peak = T.amax(filled, axis=1)
        nonempty = np.repeat((mask.any(axis=1))[:, None].astype(np.float64), dim, axis=1)
        return T.mul(peak, Tensor(nonempty))

    def global_branch(self, glob: np.ndarray | Tensor) -> Tensor:
        """Project global frame descriptors and aggregate them recurrently."""
        x = glob if isinstance(glob, Tensor) else Tensor(np.asarray(glob, dtype=np.float64))
        if x.shape[-1] != self.config.h:
            raise ShapeError(f"global feature dim {x.shape[-1]} != configured h {self.config.h}")
        reduced = self.phi_fr(x)
        if self.lstm is None:
            return reduced
        return self.lstm(reduced)

    def frame_graph_head(self, obj_seq: Tensor, glob_seq: Tensor, a_frame: np.ndarray) -> Tensor:
        """Causal frame-graph attention over both sequences, then the classifier."""
        if obj_seq.shape[0] != glob_seq.shape[0]:
            raise ShapeError(f"sequence lengths differ: {obj_seq.shape} vs {glob_seq.shape}")
        f_obj = self.gat_frame_obj(obj_seq, obj_seq, a_frame)
        f_glob = self.gat_frame_glob(glob_seq, glob_seq, a_frame)
        # tanh rather than a rectifier: frames without graph neighbors feed the
        # classifier exact zeros, which would sit on a rectifier's kink
        hidden = T.tanh(self.cls_hidden(T.concat([f_obj, f_glob], axis=-1)))
        return self.cls_out(hidden)

    def forward(self, prep: PreparedVideo) -> Tensor:
        """Per-frame logits (N x 2) for one prepared video."""
        obj_seq = self.object_branch(prep)
        glob_seq = self.global_branch(prep.video.f_fr)
        return self.frame_graph_head(obj_seq, glob_seq, prep.a_frame)

    def predict(self, video_or_prep) -> PredictionSeries:
        prep = (
            video_or_prep
            if isinstance(video_or_prep, PreparedVideo)
            else prepare_video(video_or_prep, self.config)
        )
        video = prep.video
        with T.no_grad():
            logits = self.forward(prep)
            probs = T.softmax(logits, axis=-1).data[:, ACCIDENT_CLASS]
        return PredictionSeries(video.video_id, video.fps, probs, video.label, video.onset)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.parameters(), self.config.hash(), self.config.to_json())

    @classmethod
    def from_checkpoint(cls, path) -> "STAGNet":
        state, _, config_json = load_checkpoint(path)
        model = cls(TrainConfig.from_json(config_json))
        model.load_state(state)
        return model


def frame_targets(n_frames: int, label: int, onset: int | None, mode: str) -> np.ndarray:
    """Per-frame training weights: one-hot rows, zeroed where excluded.

    Negative videos are normal-class everywhere. Positive videos are
    accident-class on every frame in ``"all"`` mode; in ``"pre_onset"`` mode
    only frames before the onset are labeled and later frames drop out of the
    loss.
    """
    onehot = np.zeros((n_frames, 2))
    if label == 0:
        onehot[:, 0] = 1.0
        return onehot
    if onset is None or not (1 <= onset <= n_frames):
        raise ValueError(f"positive video needs onset in [1, {n_frames}], got {onset}")
    if mode == "all":
        onehot[:, ACCIDENT_CLASS] = 1.0
    else:
        onehot[: onset - 1, ACCIDENT_CLASS] = 1.0
    return onehot


def cross_entropy_loss(logits: Tensor, label: int, onset: int | None, mode: str = "all") -> Tensor:
    """Mean per-frame cross entropy between logits and the video's frame targets."""
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"cross_entropy_loss: expected (N, 2) logits, got {logits.shape}")
    onehot = frame_targets(logits.shape[0], label, onset, mode)
    counted = float(onehot.sum())
    if counted == 0:
        raise ValueError("cross_entropy_loss: no labeled frames under this label mode")
    picked = T.tsum(T.mul(T.log_softmax(logits, axis=-1), Tensor(onehot)))
    return T.scale(T.neg(picked), 1.0 / counted)


# -- prediction dumps ----------------------------------------------------------


def write_predictions(path, series: list[PredictionSeries]) -> None:
    """Line-delimited JSON records consumed by the evaluation module."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in series:
            record = {
                "video_id": s.video_id,
                "fps": s.fps,
                "label": int(s.label),
                "onset": None if s.onset is None else int(s.onset),
                "probs": [float(p) for p in s.probs],
            }
            fh.write(json.dumps(record) + "\n")


def read_predictions(path) -> list[PredictionSeries]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                PredictionSeries(rec["video_id"], rec["fps"], rec["probs"], rec["label"], rec["onset"])
            )
    return out
