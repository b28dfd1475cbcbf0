"""Built-in verification: gradient checks, closed-form losses, pooling invariants."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import random_graph
from .graph import quota, threshold_edges
from .losses import (LossConfig, RankedScores, bce_score_loss, cross_entropy, glc_loss, mmd_loss)
from .model import (GatConvParams, ModelConfig, PrGnnModel, forward_batch, gat_conv, pool,
                    stack_graphs)
from .seeding import rng_for
from .train import batch_loss


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _positive(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# name -> (function of dict of tensors, input factory)
def primitive_cases() -> dict[str, tuple[Callable, Callable]]:
    w = lambda t: dc.sum(t * np.linspace(0.5, 1.5, t.value.size).reshape(t.shape))  # noqa: E731
    return {
        "matmul": (lambda p: dc.sum(p["a"] @ p["b"]),
                   lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((4, 2))}),
        "matmul_batched": (lambda p: w(p["a"] @ p["b"]),
                           lambda r: {"a": r.standard_normal((2, 3, 4)), "b": r.standard_normal((4, 2))}),
        "add": (lambda p: w(p["a"] + p["b"]),
                lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((1, 4))}),
        "sub": (lambda p: w(p["a"] - p["b"]),
                lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 1))}),
        "mul": (lambda p: w(p["a"] * p["b"]),
                lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 4))}),
        "div": (lambda p: w(p["a"] / p["b"]),
                lambda r: {"a": r.standard_normal((3, 4)), "b": _positive(r, (3, 4))}),
        "neg": (lambda p: w(-p["a"]), lambda r: {"a": r.standard_normal((2, 3))}),
        "relu": (lambda p: w(dc.relu(p["a"])), lambda r: {"a": _away_from_zero(r, (3, 4))}),
        "sigmoid": (lambda p: w(dc.sigmoid(p["a"])), lambda r: {"a": r.standard_normal((3, 4))}),
        "exp": (lambda p: w(dc.exp(p["a"])), lambda r: {"a": r.standard_normal((3, 4))}),
        "log": (lambda p: w(dc.log(p["a"])), lambda r: {"a": _positive(r, (3, 4))}),
        "sqrt": (lambda p: w(dc.sqrt(p["a"])), lambda r: {"a": _positive(r, (3, 4))}),
        "square": (lambda p: w(dc.square(p["a"])), lambda r: {"a": r.standard_normal((3, 4))}),
        "transpose": (lambda p: w(p["a"].T), lambda r: {"a": r.standard_normal((3, 4))}),
        "reshape": (lambda p: w(dc.reshape(p["a"], (2, 6))), lambda r: {"a": r.standard_normal((3, 4))}),
        "sum_axis": (lambda p: w(dc.sum(p["a"], axis=-1)), lambda r: {"a": r.standard_normal((3, 4))}),
        "mean_rows": (lambda p: w(dc.mean_rows(p["a"])), lambda r: {"a": r.standard_normal((3, 4))}),
        "mean_all": (lambda p: dc.mean_all(dc.square(p["a"])), lambda r: {"a": r.standard_normal((3, 4))}),
        "gather_rows": (lambda p: w(dc.gather_rows(p["a"], [1, 1, 3])),
                        lambda r: {"a": r.standard_normal((4, 2))}),
        "gather_rows_batched": (lambda p: w(dc.gather_rows(p["a"], np.array([[2, 0], [1, 1]]))),
                                lambda r: {"a": r.standard_normal((2, 3, 2))}),
        "masked_softmax": (lambda p: w(dc.masked_softmax(p["a"], np.array([[1, 1, 0, 1]] * 3, bool))),
                           lambda r: {"a": r.standard_normal((3, 4))}),
        "log_softmax": (lambda p: w(dc.log_softmax(p["a"])), lambda r: {"a": r.standard_normal((3, 4))}),
        "clip": (lambda p: w(dc.clip(p["a"], -0.5, 0.5)), lambda r: {"a": _away_from_zero(r, (3, 4)) * 0.4}),
    }


def check_primitives(n_points: int = 20, tol: float = 1e-6, seed: int = 0) -> list[Check]:
    out = []
    for name, (f, make) in primitive_cases().items():
        worst = 0.0
        for point in range(n_points):
            rep = dc.grad_check(f, make(rng_for(seed, "test", point)), step=1e-5, tol=tol)
            worst = max(worst, rep.max_rel_error)
        out.append(Check(f"grad:{name}", worst <= tol, f"max rel err {worst:.2e} over {n_points} points"))
    return out


def model_loss_fn(model: PrGnnModel, graphs, loss_cfg: LossConfig) -> Callable:
    feats, adj = stack_graphs(graphs)
    labels = np.array([g.label for g in graphs])

    def f(tensors):
        return batch_loss(model, feats, adj, labels, loss_cfg, tensors)[0]

    return f


def model_grad_check(pool_kind: str, dist_kind: str, n_graphs: int = 10, n_nodes: int = 8,
                     seed: int = 0, tol: float = 1e-4) -> dc.GradCheckReport:
    """End-to-end check of the total loss against every model parameter."""
    rng = rng_for(seed, "test", 99)
    graphs = [random_graph(rng, n_nodes, label=i % 2, subject_id=f"g{i}") for i in range(n_graphs)]
    model = PrGnnModel.initialize(ModelConfig(in_dim=n_nodes, pool_kind=pool_kind), seed)
    # larger attention vectors keep relu arguments active and away from zero
    for k in model.params:
        if k.endswith(".attn"):
            model.params[k] *= 3.0
    cfg = LossConfig(lambda1=0.1, lambda2=0.1, sigma=5.0, dist_kind=dist_kind)
    return dc.grad_check(model_loss_fn(model, graphs, cfg), model.params, step=1e-5, tol=tol)


def check_model_gradients(tol: float = 1e-4) -> list[Check]:
    out = []
    for pool_kind in ("topk", "sage"):
        for dist_kind in ("mmd", "bce"):
            rep = model_grad_check(pool_kind, dist_kind, tol=tol)
            ok = rep.passed and rep.n_checked > 0 and rep.n_excluded <= 0.05 * (rep.n_checked + rep.n_excluded)
            out.append(Check(f"grad:model[{pool_kind}+{dist_kind}]", ok, rep.summary()))
    return out


def check_losses() -> list[Check]:
    out = []
    bce = bce_score_loss([RankedScores([0.5], [0.5])]).item()
    out.append(Check("loss:bce_half", abs(bce - 0.69315) <= 1e-5 and abs(bce - math.log(2)) < 1e-12,
                     f"{bce:.6f}"))
    mmd = mmd_loss([RankedScores([1.0], [0.0])], sigma=5.0).item()
    expected = -(2.0 - 2.0 * math.exp(-0.2))
    out.append(Check("loss:mmd_hand", abs(mmd + 0.36254) <= 1e-4 and abs(mmd - expected) < 1e-12, f"{mmd:.6f}"))
    rng = rng_for(0, "test", 7)
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(2, 8), rng.integers(2, 12)
        s = rng.uniform(0.01, 0.99, size=(m, n))
        lap = m * np.eye(m) - np.ones((m, m))
        trace_form = 2.0 / m ** 2 * np.trace(s.T @ lap @ s)
        worst = max(worst, abs(glc_loss([s]).item() - trace_form))
    out.append(Check("loss:glc_trace_identity", worst <= 1e-10, f"max abs diff {worst:.2e}"))
    same = np.tile(rng.uniform(0.1, 0.9, size=(1, 6)), (4, 1))
    g0 = glc_loss([same]).item()
    out.append(Check("loss:glc_identical_zero", g0 == 0.0, f"{g0}"))
    ce = cross_entropy(np.array([[1.0, 2.0]]), [1]).item()
    out.append(Check("loss:ce_hand", abs(ce - 0.31326) <= 1e-5, f"{ce:.6f}"))
    return out


def check_invariants(seed: int = 0) -> list[Check]:
    out = []
    rng = rng_for(seed, "test", 11)
    g = random_graph(rng, 12)
    d_out = 5
    params = GatConvParams(dc.Tensor(rng.standard_normal((d_out, 12))), dc.Tensor(rng.standard_normal((2 * d_out, 1))))
    _, alpha = gat_conv(g.features, g.adjacency, params, return_attention=True)
    err = np.abs(alpha.value.sum(axis=-1) - 1.0).max()
    out.append(Check("inv:attention_rows_sum_to_one", err <= 1e-12, f"max |row sum - 1| {err:.1e}"))

    sizes = []
    ok = True
    for n in (2, 3, 7, 84):
        s = dc.Tensor(rng.uniform(size=(n, 1)))
        h = dc.Tensor(rng.standard_normal((n, 3)))
        _, _, idx = pool(h, np.zeros((n, n)), s, 0.5)
        sizes.append(len(idx))
        ok &= len(idx) == math.ceil(n / 2) and len(set(idx.tolist())) == len(idx)
    out.append(Check("inv:pool_cardinality", ok, f"kept {sizes} for N=2,3,7,84"))

    model = PrGnnModel.initialize(ModelConfig(in_dim=12), seed)
    perm = rng.permutation(12)
    feats = g.features[perm]
    adj = g.adjacency[np.ix_(perm, perm)]
    a = forward_batch(model, g.features, g.adjacency)
    b = forward_batch(model, feats, adj)
    s1 = a.scores[0].value[0, :, 0]
    distinct = len(np.unique(np.round(s1, 12))) == len(s1)
    drift = np.abs(a.logits.value - b.logits.value).max()
    equiv = np.abs(s1[perm] - b.scores[0].value[0, :, 0]).max()
    out.append(Check("inv:permutation", distinct and drift <= 1e-9 and equiv <= 1e-9,
                     f"logit drift {drift:.1e}, score equivariance {equiv:.1e}"))

    part = rng.uniform(-0.2, 1.0, size=(84, 84))
    part = 0.5 * (part + part.T)
    n_edges = len(threshold_edges(part, 0.1))
    out.append(Check("inv:edge_quota", n_edges == quota(0.1, 84) == 349, f"{n_edges} edges (quota 349)"))
    return out


def run_selftest(corrupt: tuple[str, ...] = ()) -> list[Check]:
    with dc.corrupt_gradient(*corrupt):
        checks = check_primitives() + check_losses() + check_invariants() + check_model_gradients()
    return checks


def format_report(checks: list[Check], elapsed: float | None = None) -> str:
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name:<34} {c.detail}" for c in checks]
    n_fail = sum(not c.passed for c in checks)
    tail = f"{len(checks) - n_fail}/{len(checks)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    return "\n".join(lines + [tail])


def main_selftest(corrupt: tuple[str, ...] = ()) -> tuple[bool, str]:
    t0 = time.perf_counter()
    checks = run_selftest(corrupt)
    return all(c.passed for c in checks), format_report(checks, time.perf_counter() - t0)
