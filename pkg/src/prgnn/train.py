"""Adam training with step-halving learning rate and subject-level cross-validation."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .data import split_by_subject
from .errors import ConfigError
from .graph import BrainGraph
from .losses import LossConfig, cross_entropy, dist_loss, glc_loss, split_ranked, total_loss
from .model import ForwardTrace, ModelConfig, PrGnnModel, forward_batch, forward_many, stack_graphs
from .seeding import rng_for

N_BINS = 20
TABLE1_CELLS = ((0.0, 0.0), (0.1, 0.0), (0.1, 0.1), (0.1, 0.5), (0.1, 1.0))


class NumericAbort(dc.NumericError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 0.001
    halve_every: int = 20
    batch_size: int = 16
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    pool_kind: str = "topk"
    ratio: float = 0.5
    hidden: tuple[int, ...] = (16, 16)
    mlp: tuple[int, ...] = (16, 8, 2)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.halve_every < 1:
            raise ConfigError("epochs, batch_size and halve_every must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")

    def model_config(self, in_dim: int) -> ModelConfig:
        return ModelConfig(in_dim=in_dim, hidden=self.hidden, mlp=self.mlp,
                           pool_kind=self.pool_kind, ratio=self.ratio)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * 0.5 ** (epoch // cfg.halve_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise dc.DimensionError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericAbort(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class EpochReport:
    epoch: int
    lr: float
    ce: float
    dist: list[float]
    glc: float
    total: float
    train_accuracy: float
    val_accuracy: float | None
    histograms: list[list[int]]
    kept_mean: list[float]
    dropped_mean: list[float]

    @property
    def gap(self) -> list[float]:
        return [k - d for k, d in zip(self.kept_mean, self.dropped_mean)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    traces: list[ForwardTrace]
    subject_accuracy: float | None = None


def evaluate(model: PrGnnModel, graphs: Sequence[BrainGraph], subject_vote: bool = False) -> EvalResult:
    """Instance-level accuracy; with ``subject_vote`` also a per-subject majority vote."""
    if not graphs:
        raise ConfigError("evaluate needs at least one graph")
    traces = forward_many(model, graphs)
    logits = np.stack([t.logits for t in traces])
    preds = logits.argmax(axis=1)
    labels = np.array([g.label for g in graphs])
    result = EvalResult(float((preds == labels).mean()), preds, labels, traces)
    if subject_vote:
        result.subject_accuracy = subject_vote_accuracy(graphs, logits)
    return result


def subject_vote_accuracy(graphs: Sequence[BrainGraph], logits: np.ndarray) -> float:
    """Majority vote over each subject's instances; ties fall to the mean softmax."""
    by_subject: dict[str, list[int]] = {}
    for i, g in enumerate(graphs):
        by_subject.setdefault(g.subject_id, []).append(i)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    correct = 0
    for sid, rows in by_subject.items():
        votes = np.bincount(logits[rows].argmax(axis=1), minlength=logits.shape[1])
        winners = np.flatnonzero(votes == votes.max())
        pred = winners[0] if winners.size == 1 else winners[np.argmax(probs[rows][:, winners].mean(axis=0))]
        correct += int(pred == graphs[rows[0]].label)
    return correct / len(by_subject)


def batch_loss(model: PrGnnModel, feats: np.ndarray, adj: np.ndarray, labels: np.ndarray,
               loss_cfg: LossConfig, tensors: dict[str, dc.Tensor] | None = None):
    """Forward one mini-batch; returns (total, parts, forward output, tensors)."""
    if tensors is None:
        tensors = model.tensors()
    out = forward_batch(model, feats, adj, tensors)
    b = feats.shape[0]
    ce = cross_entropy(out.logits, labels)
    dists = []
    for s, idx in zip(out.scores, out.kept_idx):
        n_l, k = s.shape[1], idx.shape[1]
        if 0 < k < n_l:
            dists.append(dist_loss(split_ranked(dc.reshape(s, (b, n_l)), k), loss_cfg))
    first = dc.reshape(out.scores[0], (b, out.scores[0].shape[1]))
    per_class = [dc.gather_rows(first, np.flatnonzero(labels == c))
                 for c in range(loss_cfg.n_classes) if (labels == c).sum() >= 2]
    glc = glc_loss(per_class)
    total = total_loss(ce, dists, [glc], loss_cfg)
    parts = {"ce": ce.item(), "dist": [d.item() for d in dists], "glc": glc.item(), "total": total.item()}
    return total, parts, out, tensors


def train_fold(train: Sequence[BrainGraph], val: Sequence[BrainGraph], cfg: TrainConfig,
               on_epoch: Callable[[EpochReport], None] | None = None,
               model: PrGnnModel | None = None) -> tuple[PrGnnModel, list[EpochReport]]:
    cfg.validate()
    if not train:
        raise ConfigError("empty training set")
    labels_all = np.array([g.label for g in train])
    missing = [c for c in range(cfg.loss.n_classes) if not (labels_all == c).any()]
    if missing:
        raise ConfigError(f"training set has no instances of class {missing[0]}")
    feats_all, adj_all = stack_graphs(train)
    if model is None:
        model = PrGnnModel.initialize(cfg.model_config(feats_all.shape[-1]), cfg.seed)
    state = AdamState()
    reports = []
    n = len(train)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(n)
        sums = {"ce": 0.0, "glc": 0.0, "total": 0.0}
        dist_sum: list[float] = []
        hists: list[np.ndarray] = []
        kept_sum: list[float] = []
        drop_sum: list[float] = []
        kept_cnt: list[int] = []
        drop_cnt: list[int] = []
        correct = 0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            labels = labels_all[rows]
            total, parts, out, tensors = batch_loss(model, feats_all[rows], adj_all[rows], labels, cfg.loss)
            if not np.isfinite(parts["total"]):
                raise NumericAbort(f"non-finite loss at epoch {epoch + 1}")
            total.backward()
            adam_step(model.params, {k: t.grad for k, t in tensors.items()}, state, lr)

            w = len(rows)
            for key in sums:
                sums[key] += parts[key] * w
            if not dist_sum:
                dist_sum = [0.0] * len(parts["dist"])
            for i, d in enumerate(parts["dist"]):
                dist_sum[i] += d * w
            correct += int((out.logits.value.argmax(axis=1) == labels).sum())
            for layer, (s, idx) in enumerate(zip(out.scores, out.kept_idx)):
                sv = s.value[..., 0]
                if len(hists) <= layer:
                    hists.append(np.zeros(N_BINS, dtype=np.int64))
                    kept_sum.append(0.0), drop_sum.append(0.0)
                    kept_cnt.append(0), drop_cnt.append(0)
                hists[layer] += np.histogram(sv, bins=N_BINS, range=(0.0, 1.0))[0]
                kept = np.take_along_axis(sv, idx, axis=1)
                kept_sum[layer] += kept.sum()
                kept_cnt[layer] += kept.size
                drop_sum[layer] += sv.sum() - kept.sum()
                drop_cnt[layer] += sv.size - kept.size
        val_acc = evaluate(model, val).accuracy if val else None
        report = EpochReport(
            epoch=epoch + 1, lr=lr, ce=sums["ce"] / n, dist=[d / n for d in dist_sum],
            glc=sums["glc"] / n, total=sums["total"] / n, train_accuracy=correct / n,
            val_accuracy=val_acc, histograms=[h.tolist() for h in hists],
            kept_mean=[s / max(c, 1) for s, c in zip(kept_sum, kept_cnt)],
            dropped_mean=[s / max(c, 1) for s, c in zip(drop_sum, drop_cnt)])
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
    return model, reports


def window_means(values: Sequence[float], width: int = 20) -> list[float]:
    return [float(np.mean(values[i:i + width])) for i in range(0, len(values), width)]


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}({std:.3f})"


@dataclass
class FoldResult:
    fold: int
    seed: int
    train_subjects: list[str]
    test_subjects: list[str]
    accuracy: float
    subject_accuracy: float | None
    model: PrGnnModel
    reports: list[EpochReport]
    evaluation: EvalResult


@dataclass
class CVResult:
    folds: list[FoldResult]

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def formatted(self) -> str:
        return format_mean_std(self.mean, self.std)

    def summary(self) -> dict:
        out = {"folds": [{"fold": f.fold, "seed": f.seed, "accuracy": f.accuracy,
                          "test_subjects": f.test_subjects} for f in self.folds],
               "accuracy": self.accuracies, "mean": self.mean, "std": self.std,
               "formatted": self.formatted}
        if all(f.subject_accuracy is not None for f in self.folds):
            sub = [f.subject_accuracy for f in self.folds]
            out["subject_accuracy"] = {"folds": sub, "mean": float(np.mean(sub)), "std": float(np.std(sub))}
        return out


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(fold,)).generate_state(1)[0])


def max_threads(requested: int) -> int:
    cap = os.environ.get("PRGNN_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"PRGNN_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


def cross_validate(graphs: Sequence[BrainGraph], k_folds: int, cfg: TrainConfig,
                   parallel: int = 1, subject_vote: bool = False,
                   on_epoch: Callable[[int, EpochReport], None] | None = None) -> CVResult:
    splits = split_by_subject(graphs, k_folds, cfg.seed)

    def run(fold: int) -> FoldResult:
        train_ids, test_ids = splits[fold]
        test_set = set(test_ids)
        train = [g for g in graphs if g.subject_id not in test_set]
        test = [g for g in graphs if g.subject_id in test_set]
        fcfg = TrainConfig(**{**cfg.__dict__, "seed": fold_seed(cfg.seed, fold)})
        cb = (lambda r: on_epoch(fold, r)) if on_epoch else None
        model, reports = train_fold(train, test, fcfg, on_epoch=cb)
        ev = evaluate(model, test, subject_vote=subject_vote)
        return FoldResult(fold, fcfg.seed, train_ids, test_ids, ev.accuracy, ev.subject_accuracy,
                          model, reports, ev)

    workers = max_threads(parallel)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(run, range(k_folds)))
    else:
        folds = [run(f) for f in range(k_folds)]
    return CVResult(folds)


def sweep(graphs: Sequence[BrainGraph], k_folds: int, cfg: TrainConfig,
          cells: Sequence[tuple[float, float]] = TABLE1_CELLS, parallel: int = 1) -> list[dict]:
    """Cross-validate each (lambda1, lambda2) cell; rows carry the mean(std) string."""
    rows = []
    for l1, l2 in cells:
        loss = LossConfig(**{**cfg.loss.__dict__, "lambda1": l1, "lambda2": l2})
        res = cross_validate(graphs, k_folds, TrainConfig(**{**cfg.__dict__, "loss": loss}), parallel)
        rows.append({"cell": f"{l1:g}-{l2:g}", "lambda1": l1, "lambda2": l2,
                     "accuracy": res.accuracies, "mean": res.mean, "std": res.std,
                     "formatted": res.formatted})
    return rows


def write_epoch_log(path, reports: Sequence[EpochReport]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in reports), encoding="utf-8")


def read_epoch_log(path) -> list[EpochReport]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [EpochReport(**json.loads(line)) for line in lines if line.strip()]
