"""Two attention-convolution + ranking-pooling blocks, mean readout, MLP head.

All forward functions work on stacks of graphs with equal node count:
features ``(B, N, d)`` and adjacency ``(B, N, N)``. A single graph is a
stack of one.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError
from .graph import BrainGraph, GraphValidationError
from .seeding import rng_for

POOL_KINDS = ("topk", "sage")


@dataclass
class ModelConfig:
    in_dim: int = 84
    hidden: tuple[int, ...] = (16, 16)
    mlp: tuple[int, ...] = (16, 8, 2)
    pool_kind: str = "topk"
    ratio: float = 0.5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.mlp = tuple(int(m) for m in self.mlp)
        self.pool_kind = self.pool_kind.lower()
        if self.pool_kind not in POOL_KINDS:
            raise ConfigError(f"pool kind must be one of {POOL_KINDS}, got {self.pool_kind!r}")
        if not 0 < self.ratio < 1:
            raise ConfigError(f"pooling ratio must lie in (0, 1), got {self.ratio}")

    @property
    def n_classes(self) -> int:
        return self.mlp[-1]


@dataclass
class GatConvParams:
    theta: Tensor  # (d_out, d_in)
    attn: Tensor  # (2 * d_out, 1)


@dataclass
class PoolParams:
    kind: str
    w: Tensor | None = None  # (d, 1), topk
    score_conv: GatConvParams | None = None  # output dim 1, sage
    ratio: float = 0.5


def gat_conv(h, adjacency: np.ndarray, params: GatConvParams, return_attention: bool = False):
    """Edge-weighted graph attention convolution.

    Neighbours of i are nodes with e_ij > 0, plus i itself with edge factor 1.
    The raw attention logit is e_ij * relu(a . [z_i || z_j]) with z = theta h.
    """
    h = dc.as_tensor(h)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if (adjacency < 0).any():
        raise GraphValidationError("gat_conv: negative edge weight")
    d_out = params.theta.shape[0]
    z = h @ params.theta.T
    src = z @ dc.gather_rows(params.attn, np.arange(d_out))
    dst = z @ dc.gather_rows(params.attn, np.arange(d_out, 2 * d_out))
    n = adjacency.shape[-1]
    eye = np.eye(n, dtype=bool)
    weight = np.where(eye, 1.0, adjacency)
    mask = (adjacency > 0) | eye
    logits = dc.relu(src + dst.T) * weight
    alpha = dc.masked_softmax(logits, mask)
    out = alpha @ z
    return (out, alpha) if return_attention else out


def node_scores(h, adjacency: np.ndarray, pool: PoolParams) -> Tensor:
    """Per-node importance in (0, 1), shape (..., N, 1)."""
    h = dc.as_tensor(h)
    if pool.kind == "topk":
        norm_sq = float((pool.w.value ** 2).sum())
        if math.sqrt(norm_sq) < 1e-12:
            raise dc.NumericError("node_scores: projection vector has zero norm")
        norm = dc.sqrt(dc.sum(dc.square(pool.w)))
        return dc.sigmoid((h @ pool.w) / norm)
    if pool.kind == "sage":
        return dc.sigmoid(gat_conv(h, adjacency, pool.score_conv))
    raise ConfigError(f"unknown pool kind {pool.kind!r}")


def n_keep(ratio: float, n: int) -> int:
    return max(1, math.ceil(round(ratio * n, 9)))


def top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, descending, ties by index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def pool(h, adjacency: np.ndarray, scores: Tensor, ratio: float):
    """Keep the top ceil(ratio * N) nodes; features are gated by their scores.

    Returns (pooled features, pooled adjacency, kept indices in descending-score
    order). Works on one graph ((N, d) features) or a stack ((B, N, d)).
    """
    h, scores = dc.as_tensor(h), dc.as_tensor(scores)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = h.shape[-2]
    if scores.shape[-2:] != (n, 1):
        raise dc.DimensionError(f"pool: scores shape {scores.shape} does not match {n} nodes")
    k = n_keep(ratio, n)
    s = scores.value[..., 0]
    idx = top_indices(s, k)
    if k < n:
        ordered = np.take_along_axis(s, np.argsort(-s, axis=-1, kind="stable"), axis=-1)
        margin = (ordered[..., k - 1] - ordered[..., k]).min()
    else:
        margin = np.inf
    dc.record_kink("topk", idx.tobytes(), margin)
    gated = h * scores
    if idx.ndim == 1:
        pooled = dc.gather_rows(gated, idx)
        adj = adjacency[np.ix_(idx, idx)]
    else:
        pooled = dc.gather_rows(gated, idx)
        adj = np.take_along_axis(np.take_along_axis(adjacency, idx[:, :, None], axis=1),
                                 idx[:, None, :], axis=2)
    return pooled, adj, idx


def readout_mean(h) -> Tensor:
    return dc.mean_rows(h)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class PrGnnModel:
    """Trainable parameters plus architecture config.

    Parameters live in ``params`` as named float64 arrays; ``tensors()``
    wraps them as graph leaves for one forward/backward pass.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "PrGnnModel":
        rng = rng_for(seed, "init")
        params: dict[str, np.ndarray] = {}
        dims = (config.in_dim, *config.hidden)
        for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            params[f"conv{layer}.theta"] = _glorot(rng, d_in, d_out, (d_out, d_in))
            params[f"conv{layer}.attn"] = _glorot(rng, 2 * d_out, 1, (2 * d_out, 1))
            if config.pool_kind == "topk":
                params[f"pool{layer}.w"] = _glorot(rng, d_out, 1, (d_out, 1))
            else:
                params[f"pool{layer}.theta"] = _glorot(rng, d_out, 1, (1, d_out))
                params[f"pool{layer}.attn"] = _glorot(rng, 2, 1, (2, 1))
        widths = (config.hidden[-1], *config.mlp)
        for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"mlp.{i}.weight"] = _glorot(rng, d_in, d_out, (d_in, d_out))
            params[f"mlp.{i}.bias"] = np.zeros((1, d_out))
        return cls(config, params)

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.params.items()}

    def copy(self) -> "PrGnnModel":
        return PrGnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def to_dict(self) -> dict:
        return {"config": asdict(self.config),
                "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                           for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, raw: dict) -> "PrGnnModel":
        cfg = ModelConfig(**raw["config"])
        params = {k: np.array(p["values"], dtype=np.float64).reshape(p["shape"])
                  for k, p in raw["params"].items()}
        return cls(cfg, params)

    def save(self, path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload["run_config"] = extra
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PrGnnModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def block_params(model: PrGnnModel, tensors: dict[str, Tensor], layer: int):
    conv = GatConvParams(tensors[f"conv{layer}.theta"], tensors[f"conv{layer}.attn"])
    kind = model.config.pool_kind
    if kind == "topk":
        pool_p = PoolParams(kind, w=tensors[f"pool{layer}.w"], ratio=model.config.ratio)
    else:
        pool_p = PoolParams(kind, score_conv=GatConvParams(tensors[f"pool{layer}.theta"],
                                                           tensors[f"pool{layer}.attn"]),
                            ratio=model.config.ratio)
    return conv, pool_p


@dataclass
class BatchOutput:
    logits: Tensor  # (B, C)
    scores: list[Tensor]  # per pooling layer, (B, N_l, 1)
    kept_idx: list[np.ndarray]  # per pooling layer, (B, k_l), in that layer's numbering
    kept_original: list[np.ndarray]  # per pooling layer, (B, k_l), original node ids
    z: Tensor  # (B, 1, d)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    scores: list[np.ndarray] = field(default_factory=list)
    kept_idx: list[np.ndarray] = field(default_factory=list)
    kept_original: list[np.ndarray] = field(default_factory=list)
    z: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"logits": self.logits.tolist(), "scores": [s.tolist() for s in self.scores],
                "kept_idx": [k.tolist() for k in self.kept_idx],
                "kept_original": [k.tolist() for k in self.kept_original],
                "z": None if self.z is None else self.z.tolist()}


def stack_graphs(graphs: Sequence[BrainGraph]) -> tuple[np.ndarray, np.ndarray]:
    sizes = {g.n_nodes for g in graphs}
    if len(sizes) != 1:
        raise dc.DimensionError(f"graphs in one batch must share node count, got {sorted(sizes)}")
    return (np.stack([g.features for g in graphs]), np.stack([g.adjacency for g in graphs]))


def forward_batch(model: PrGnnModel, features: np.ndarray, adjacency: np.ndarray,
                  tensors: dict[str, Tensor] | None = None) -> BatchOutput:
    if tensors is None:
        tensors = model.tensors()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features, adjacency = features[None], np.asarray(adjacency)[None]
    if features.shape[-1] != model.config.in_dim:
        raise dc.DimensionError(f"feature dim {features.shape[-1]} != model input {model.config.in_dim}")
    h: Tensor = Tensor(features, _op="const")
    adj = adjacency
    scores, kept, original = [], [], []
    mapping = np.broadcast_to(np.arange(features.shape[1]), features.shape[:2])
    for layer in range(1, len(model.config.hidden) + 1):
        conv, pool_p = block_params(model, tensors, layer)
        h = gat_conv(h, adj, conv)
        s = node_scores(h, adj, pool_p)
        h, adj, idx = pool(h, adj, s, pool_p.ratio)
        mapping = np.take_along_axis(mapping, idx, axis=1)
        scores.append(s)
        kept.append(idx)
        original.append(mapping)
    z = readout_mean(h)
    x = z
    n_layers = len(model.config.mlp)
    for i in range(n_layers):
        x = x @ tensors[f"mlp.{i}.weight"] + tensors[f"mlp.{i}.bias"]
        if i < n_layers - 1:
            x = dc.relu(x)
    logits = dc.reshape(x, (x.shape[0], x.shape[-1]))
    return BatchOutput(logits, scores, kept, original, z)


def traces_from_batch(out: BatchOutput) -> list[ForwardTrace]:
    traces = []
    for b in range(out.logits.shape[0]):
        traces.append(ForwardTrace(
            logits=out.logits.value[b].copy(),
            scores=[s.value[b, :, 0].copy() for s in out.scores],
            kept_idx=[k[b].copy() for k in out.kept_idx],
            kept_original=[m[b].copy() for m in out.kept_original],
            z=out.z.value[b, 0].copy()))
    return traces


def forward(model: PrGnnModel, graph: BrainGraph) -> ForwardTrace:
    out = forward_batch(model, graph.features, graph.adjacency)
    return traces_from_batch(out)[0]


def forward_many(model: PrGnnModel, graphs: Sequence[BrainGraph], chunk: int = 64) -> list[ForwardTrace]:
    traces: list[ForwardTrace] = []
    for start in range(0, len(graphs), chunk):
        feats, adj = stack_graphs(graphs[start:start + chunk])
        traces.extend(traces_from_batch(forward_batch(model, feats, adj)))
    return traces
