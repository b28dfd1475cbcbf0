"""Classification loss and the pooling-score regularizers.

Score-based losses take instance batches as 2-D arrays: one row per
instance. ``a`` holds each instance's top-k scores, ``b`` the rest.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError

DIST_KINDS = ("mmd", "bce")
CLAMP = 1e-7


@dataclass
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    sigma: float = 5.0
    dist_kind: str = "bce"
    n_classes: int = 2

    def __post_init__(self):
        self.dist_kind = self.dist_kind.lower()
        if self.dist_kind not in DIST_KINDS:
            raise ConfigError(f"dist kind must be one of {DIST_KINDS}, got {self.dist_kind!r}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ConfigError("lambdas must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambdas must be >= 0")


@dataclass
class RankedScores:
    a: object  # top-k scores, descending
    b: object  # remaining scores, descending


def rank_split(scores, k: int) -> RankedScores:
    """Split one score vector into its top-k and the remainder, both descending."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 0 < k < s.size:
        raise ValueError(f"k must satisfy 0 < k < {s.size}, got {k}")
    order = np.argsort(-s, kind="stable")
    return RankedScores(s[order[:k]], s[order[k:]])


def split_ranked(scores: Tensor, k: int) -> RankedScores:
    """Differentiable batch version: (M, N) scores -> a (M, k), b (M, N - k)."""
    scores = dc.as_tensor(scores)
    m, n = scores.shape
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < {n}, got {k}")
    order = np.argsort(-scores.value, axis=-1, kind="stable")
    ranked = np.take_along_axis(scores.value, order, axis=-1)
    dc.record_kink("rank_split", order[:, :k].tobytes(), (ranked[:, k - 1] - ranked[:, k]).min())
    col = dc.reshape(scores, (m, n, 1))
    a = dc.reshape(dc.gather_rows(col, order[:, :k]), (m, k))
    b = dc.reshape(dc.gather_rows(col, order[:, k:]), (m, n - k))
    return RankedScores(a, b)


def _as_batch(batch) -> tuple[Tensor, Tensor]:
    if isinstance(batch, RankedScores):
        a, b = batch.a, batch.b
        if not isinstance(a, Tensor):
            a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if not isinstance(b, Tensor):
            b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        return dc.as_tensor(a), dc.as_tensor(b)
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    a = np.stack([np.asarray(r.a, dtype=np.float64).ravel() for r in batch])
    b = np.stack([np.asarray(r.b, dtype=np.float64).ravel() for r in batch])
    return dc.as_tensor(a), dc.as_tensor(b)


def _mean_kernel(x: Tensor, y: Tensor, sigma: float) -> Tensor:
    """Per-row mean of exp(-(x_i - y_j)^2 / sigma) over all (i, j): (M, 1, 1)."""
    m, p = x.shape
    q = y.shape[1]
    diff = dc.reshape(x, (m, p, 1)) - dc.reshape(y, (m, 1, q))
    k = dc.exp(dc.square(diff) * (-1.0 / sigma))
    return dc.sum(dc.sum(k, axis=-1), axis=-2) * (1.0 / (p * q))


def mmd_loss(batch, sigma: float = 5.0) -> Tensor:
    """Negated Gaussian-kernel MMD between kept and dropped scores, averaged over instances."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    a, b = _as_batch(batch)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("mmd_loss needs nonempty kept and dropped groups")
    per = _mean_kernel(a, a, sigma) + _mean_kernel(b, b, sigma) - 2.0 * _mean_kernel(a, b, sigma)
    return dc.neg(dc.mean_all(per))


def bce_score_loss(batch) -> Tensor:
    """Binary cross-entropy pushing kept scores to 1 and dropped scores to 0."""
    a, b = _as_batch(batch)
    m = a.shape[0]
    n = a.shape[1] + b.shape[1]
    a = dc.clip(a, CLAMP, 1.0 - CLAMP)
    b = dc.clip(b, CLAMP, 1.0 - CLAMP)
    total = dc.sum(dc.log(a)) + dc.sum(dc.log(1.0 - b))
    return total * (-1.0 / (m * n))


def glc_loss(score_matrices: Sequence) -> Tensor:
    """Within-class score spread: sum over classes of mean squared pairwise distance.

    Each element is an (M_c, N) matrix of first-layer scores for one class;
    classes with fewer than two instances contribute zero.
    """
    total: Tensor = dc.as_tensor(0.0)
    widths = set()
    for s in score_matrices:
        s = dc.as_tensor(s)
        m, n = s.shape
        widths.add(n)
        if len(widths) > 1:
            raise dc.DimensionError(f"glc_loss: score vectors of different lengths {sorted(widths)}")
        if m < 2:
            continue
        diff = dc.reshape(s, (m, 1, n)) - dc.reshape(s, (1, m, n))
        total = total + dc.sum(dc.square(diff)) * (1.0 / (m * m))
    return total


def cross_entropy(logits, labels) -> Tensor:
    """Mean -log softmax(logits)[label] over rows; a 1-D logit vector is one row."""
    logits = dc.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    return dc.sum(dc.log_softmax(logits) * onehot) * (-1.0 / b)


def dist_loss(batch, cfg: LossConfig) -> Tensor:
    return mmd_loss(batch, cfg.sigma) if cfg.dist_kind == "mmd" else bce_score_loss(batch)


def total_loss(ce, dist: Sequence, glc: Sequence, cfg: LossConfig):
    """ce + lambda1 * sum of per-layer distance losses + lambda2 * sum of per-class GLC."""
    out = ce
    if dist:
        acc = dist[0]
        for d in dist[1:]:
            acc = acc + d
        out = out + cfg.lambda1 * acc
    if glc:
        acc = glc[0]
        for g in glc[1:]:
            acc = acc + g
        out = out + cfg.lambda2 * acc
    return out
