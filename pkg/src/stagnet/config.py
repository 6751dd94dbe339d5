"""Training/architecture configuration shared by the model, trainer, and CLI.

Every knob lives here so that runs are fully described by (config, seed,
data); the canonical JSON form is hashed into checkpoints and reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace


@dataclass
class TrainConfig:
    # feature dims, must agree with the bundle manifest
    d1: int = 4096
    d2: int = 300
    h: int = 2304
    slots: int = 19
    # graph construction
    k: int = 20
    u: int = 1
    spatial_norm: str = "global"  # "global" | "row"
    edge_mode: str = "weighted_log"  # "weighted_log" | "binary"
    # architecture (desk-scale defaults)
    phi_e_dim: int = 32
    phi_l_dim: int = 8
    gat_obj_dim: int = 16
    phi_fr_dim: int = 32
    lstm_hidden: int = 32
    gat_frame_dim: int = 16
    classifier_hidden: int = 32
    heads: int = 1
    leaky_slope: float = 0.2
    use_lstm: bool = True
    attention: str = "gatv2"  # "gatv2" | "uniform"
    pool: str = "mean"  # "mean" | "max"
    # loss
    label_mode: str = "all"  # "all" | "pre_onset"
    # optimization
    lr: float = 1e-4
    epochs: int = 50
    seed: int = 0
    folds: int = 5
    select: str = "best"  # "best" | "last"

    def __post_init__(self):
        for name in ("d1", "d2", "h", "slots", "k", "u", "phi_e_dim", "phi_l_dim",
                     "gat_obj_dim", "phi_fr_dim", "lstm_hidden", "gat_frame_dim",
                     "classifier_hidden", "heads", "epochs", "folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"config: {name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"config: lr must be positive, got {self.lr}")
        _check_choice("spatial_norm", self.spatial_norm, ("global", "row"))
        _check_choice("edge_mode", self.edge_mode, ("weighted_log", "binary"))
        _check_choice("attention", self.attention, ("gatv2", "uniform"))
        _check_choice("pool", self.pool, ("mean", "max"))
        _check_choice("label_mode", self.label_mode, ("all", "pre_onset"))
        _check_choice("select", self.select, ("best", "last"))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _check_choice(name: str, value: str, allowed: tuple[str, ...]) -> None:
    if value not in allowed:
        raise ValueError(f"config: {name} must be one of {allowed}, got {value!r}")
