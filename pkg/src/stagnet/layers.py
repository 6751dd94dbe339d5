"""Learned building blocks: linear reducers, GATv2 attention, and an LSTM.

All layers operate on the autodiff tensors from ``stagnet.tensor`` and expose
their parameters as a flat name-to-tensor mapping for the optimizer and the
checkpoint writer.
"""

from __future__ import annotations

import struct

import numpy as np

from stagnet import tensor as T
from stagnet.tensor import ShapeError, Tensor

ADJ_EPS = 1e-10  # added inside log() when injecting edge weights into logits


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


class Linear:
    """Affine map on the last axis: x @ W.T + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        self.weight = Tensor(xavier_uniform(rng, out_dim, in_dim), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}: input {x.shape} does not match in_dim {self.in_dim}")
        return T.add_last(T.matmul(x, T.transpose(self.weight)), self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class GATv2:
    """Graph attention with transform-then-score edge logits.

    For destination node i and source node j, the edge logit is
    a . leaky_relu(W_tgt x_i + W_src x_j), optionally plus log(A_ij + eps) so
    real-valued adjacency weights modulate attention (``edge_mode string
    "weighted_log"``; "binary" ignores the weights and keeps only the edge
    pattern A_ij > 0). Attention is a softmax over each destination's
    neighborhood, and the output aggregates W_src x_j. Destinations without
    neighbors produce zero rows. ``attention="uniform"`` replaces the learned
    scores with constant 1/degree weights (ablation hook).

    Self- and cross-attention share one code path: ``h_dst`` and ``h_src`` may
    be the same tensor with a square adjacency, or different node sets with a
    rectangular one. Leading batch axes are supported throughout.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        heads: int = 1,
        slope: float = 0.2,
        edge_mode: str = "weighted_log",
        attention: str = "gatv2",
        name: str = "gat",
    ):
        if out_dim % heads != 0:
            raise ValueError(f"{name}: out_dim {out_dim} not divisible by heads {heads}")
        if edge_mode not in ("weighted_log", "binary"):
            raise ValueError(f"{name}: unknown edge_mode {edge_mode!r}")
        if attention not in ("gatv2", "uniform"):
            raise ValueError(f"{name}: unknown attention {attention!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.head_dim = out_dim // heads
        self.slope = slope
        self.edge_mode = edge_mode
        self.attention = attention
        self.name = name
        self.w_src: list[Tensor] = []
        self.w_tgt: list[Tensor] = []
        self.attn: list[Tensor] = []
        for h in range(heads):
            self.w_src.append(
                Tensor(xavier_uniform(rng, self.head_dim, in_dim), requires_grad=True, name=f"{name}.h{h}.w_src")
            )
            self.w_tgt.append(
                Tensor(xavier_uniform(rng, self.head_dim, in_dim), requires_grad=True, name=f"{name}.h{h}.w_tgt")
            )
            limit = np.sqrt(6.0 / (self.head_dim + 1))
            self.attn.append(
                Tensor(rng.uniform(-limit, limit, self.head_dim), requires_grad=True, name=f"{name}.h{h}.attn")
            )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for h in range(self.heads):
            out[f"{self.name}.h{h}.w_src"] = self.w_src[h]
            out[f"{self.name}.h{h}.w_tgt"] = self.w_tgt[h]
            out[f"{self.name}.h{h}.attn"] = self.attn[h]
        return out

    def __call__(self, h_dst: Tensor, h_src: Tensor, adj: np.ndarray, return_attention: bool = False):
        adj = np.asarray(adj, dtype=np.float64)
        if adj.shape[:-2] != h_dst.shape[:-2] or adj.shape[-2] != h_dst.shape[-2]:
            raise ShapeError(f"{self.name}: adjacency {adj.shape} does not match destinations {h_dst.shape}")
        if adj.shape[-1] != h_src.shape[-2] or h_src.shape[:-2] != h_dst.shape[:-2]:
            raise ShapeError(f"{self.name}: adjacency {adj.shape} does not match sources {h_src.shape}")
        if h_dst.shape[-1] != self.in_dim or h_src.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}: feature dim {h_dst.shape[-1]} != in_dim {self.in_dim}")

        edges = adj > 0
        edges_f = edges.astype(np.float64)
        head_outs = []
        attentions = []
        for h in range(self.heads):
            hs = T.matmul(h_src, T.transpose(self.w_src[h]))
            if self.attention == "uniform":
                deg = edges_f.sum(axis=-1, keepdims=True)
                alpha_const = np.divide(edges_f, deg, out=np.zeros_like(edges_f), where=deg > 0)
                alpha = Tensor(alpha_const)
            else:
                ht = T.matmul(h_dst, T.transpose(self.w_tgt[h]))
                scores = T.dot_last(T.leaky_relu(T.pair_sum(ht, hs), self.slope), self.attn[h])
                if self.edge_mode == "weighted_log":
                    bias = np.where(edges, np.log(np.where(edges, adj, 1.0) + ADJ_EPS), 0.0)
                    scores = T.add(scores, Tensor(bias))
                scores = T.masked_fill(scores, ~edges, T.NEG_FILL)
                # empty neighborhoods would softmax to uniform junk; the edge
                # indicator zeroes them and leaves real rows untouched
                alpha = T.mul(T.softmax(scores, axis=-1), Tensor(edges_f))
            head_outs.append(T.matmul(alpha, hs))
            attentions.append(alpha.data)
        out = head_outs[0] if self.heads == 1 else T.concat(head_outs, axis=-1)
        if return_attention:
            return out, attentions
        return out


class LSTM:
    """Single-layer LSTM over a T x d sequence, returning all hidden states.

    Gate blocks are ordered (input, forget, candidate, output) inside the
    stacked weights; the forget-gate bias starts at 1.0.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.in_dim = in_dim
        self.hidden = hidden
        self.name = name
        self.w_x = Tensor(xavier_uniform(rng, 4 * hidden, in_dim), requires_grad=True, name=f"{name}.w_x")
        self.w_h = Tensor(xavier_uniform(rng, 4 * hidden, hidden), requires_grad=True, name=f"{name}.w_h")
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.bias = Tensor(bias, requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{self.name}.w_x": self.w_x,
            f"{self.name}.w_h": self.w_h,
            f"{self.name}.bias": self.bias,
        }

    def __call__(self, seq: Tensor, h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
        if seq.data.ndim != 2 or seq.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (T, {self.in_dim}) input, got {seq.shape}")
        steps = seq.shape[0]
        hidden = self.hidden
        h = h0 if h0 is not None else Tensor(np.zeros((1, hidden)))
        c = c0 if c0 is not None else Tensor(np.zeros((1, hidden)))
        x_proj = T.matmul(seq, T.transpose(self.w_x))
        outputs = []
        for t in range(steps):
            gates = T.add_last(
                T.add(T.narrow(x_proj, 0, t, 1), T.matmul(h, T.transpose(self.w_h))), self.bias
            )
            i = T.sigmoid(T.narrow(gates, 1, 0, hidden))
            f = T.sigmoid(T.narrow(gates, 1, hidden, hidden))
            g = T.tanh(T.narrow(gates, 1, 2 * hidden, hidden))
            o = T.sigmoid(T.narrow(gates, 1, 3 * hidden, hidden))
            c = T.add(T.mul(f, c), T.mul(i, g))
            h = T.mul(o, T.tanh(c))
            if not np.all(np.isfinite(h.data)):
                raise ArithmeticError(f"{self.name}: non-finite hidden state at step {t}")
            outputs.append(h)
        return outputs[0] if steps == 1 else T.concat(outputs, axis=0)


# -- checkpoint serialization --------------------------------------------------

CKPT_MAGIC = b"STAGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], config_hash: str, config_json: str = "") -> None:
    """Write named parameters as float32 little-endian with format/version header."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        hash_bytes = config_hash.encode("utf-8")
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        cfg_bytes = config_json.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, str]:
    """Read a checkpoint; returns (params as float64 arrays, config hash, config json)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hash_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    config_hash = blob[off : off + hash_len].decode("utf-8")
    off += hash_len
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config_json = blob[off : off + cfg_len].decode("utf-8")
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = arr.astype(np.float64)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after parameter table")
    return params, config_hash, config_json
