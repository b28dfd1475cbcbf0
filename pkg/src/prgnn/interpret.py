"""Salient-node extraction and cross-instance agreement of pooling selections."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .graph import BrainGraph
from .model import PrGnnModel, forward_many
from .train import N_BINS, EpochReport


@dataclass
class ScoreRecord:
    instance_id: str
    subject_id: str
    label: int
    layer1_scores: np.ndarray
    layer1_kept: np.ndarray
    layer2_kept: np.ndarray  # original node ids

    def kept(self, level: str) -> np.ndarray:
        if level == "layer1":
            return self.layer1_kept
        if level == "layer2":
            return self.layer2_kept
        raise ValueError(f"level must be 'layer1' or 'layer2', got {level!r}")

    def surviving_scores(self) -> list[tuple[int, float]]:
        """Layer-1 scores of the nodes that survive both pooling layers."""
        return [(int(i), float(self.layer1_scores[i])) for i in self.layer2_kept]


@dataclass
class SalientNode:
    node_id: int
    mean_score: float
    rank: int


def collect_scores(model: PrGnnModel, graphs: Sequence[BrainGraph]) -> list[ScoreRecord]:
    traces = forward_many(model, graphs)
    return [ScoreRecord(g.instance_id, g.subject_id, g.label, t.scores[0],
                        t.kept_original[0], t.kept_original[-1])
            for g, t in zip(graphs, traces)]


def salient_nodes(records: Sequence[ScoreRecord], label: int, top_m: int | None = None) -> list[SalientNode]:
    """Nodes ranked by mean layer-1 score over the instances of one class."""
    chosen = [r.layer1_scores for r in records if r.label == label]
    if not chosen:
        raise ValueError(f"no records with label {label}")
    mean = np.mean(chosen, axis=0)
    order = np.argsort(-mean, kind="stable")
    if top_m is not None:
        order = order[:top_m]
    return [SalientNode(int(i), float(mean[i]), rank) for rank, i in enumerate(order, start=1)]


def jaccard(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def overlap(records: Sequence[ScoreRecord], level: str = "layer2") -> tuple[np.ndarray, float]:
    """Pairwise Jaccard matrix of kept-node sets and its mean over distinct pairs."""
    if len(records) < 2:
        raise ValueError("overlap needs at least two records")
    sets = [r.kept(level) for r in records]
    n = len(sets)
    mat = np.eye(n)
    for i, j in combinations(range(n), 2):
        mat[i, j] = mat[j, i] = jaccard(sets[i], sets[j])
    iu = np.triu_indices(n, 1)
    return mat, float(mat[iu].mean())


def planted_recovery(ranking: Sequence[SalientNode], planted: Sequence[int]) -> dict:
    ids = [s.node_id for s in ranking]
    hits = sorted(set(ids) & set(planted))
    return {"top_m": len(ids), "n_planted": len(planted), "hits": len(hits), "hit_ids": hits,
            "planted_ranks": {int(p): ids.index(p) + 1 for p in planted if p in ids}}


def score_histogram_series(reports: Sequence[EpochReport]) -> list[tuple[int, int, float, float, int]]:
    """Rows of (epoch, layer, bin_low, bin_high, count), layers numbered from 1."""
    if not reports:
        raise ValueError("no epoch reports")
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    rows = []
    for r in reports:
        for layer, counts in enumerate(r.histograms, start=1):
            for b, c in enumerate(counts):
                rows.append((r.epoch, layer, float(edges[b]), float(edges[b + 1]), int(c)))
    return rows


def read_label_map(path) -> dict[int, str]:
    """Optional node_id -> name CSV (header row optional)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if len(row) < 2:
                continue
            try:
                out[int(row[0])] = row[1]
            except ValueError:
                continue
    return out


def write_ranked_csv(path, ranking: Sequence[SalientNode], names: Mapping[int, str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "mean_score", "rank"] + (["name"] if names else []))
        for s in ranking:
            row = [s.node_id, repr(s.mean_score), s.rank]
            if names:
                row.append(names.get(s.node_id, ""))
            w.writerow(row)


def write_overlap_csv(path, records: Sequence[ScoreRecord], matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_i", "instance_j", "jaccard"])
        for i, j in combinations(range(len(records)), 2):
            w.writerow([records[i].instance_id, records[j].instance_id, repr(float(matrix[i, j]))])


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "layer", "bin_low", "bin_high", "count"])
        for epoch, layer, lo, hi, count in rows:
            w.writerow([epoch, layer, f"{lo:.2f}", f"{hi:.2f}", count])


def write_records_csv(path, records: Sequence[ScoreRecord]) -> None:
    """Per-instance surviving nodes with their layer-1 scores (one row per node)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "subject_id", "label", "node_id", "layer1_score"])
        for r in records:
            for node, score in r.surviving_scores():
                w.writerow([r.instance_id, r.subject_id, r.label, node, repr(score)])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
