"""Brain graphs built from connectivity matrices.

Edges come from the strongest positive partial correlations; node features
are rows of the Pearson correlation matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REPAIR_FLOOR = 1e-6


class GraphValidationError(ValueError):
    pass


class MatrixFormatError(OSError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class BrainGraph:
    features: np.ndarray
    adjacency: np.ndarray
    label: int
    subject_id: str
    instance_id: str = ""

    def __post_init__(self):
        for name in ("features", "adjacency"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))


def quota(top_frac: float, n: int) -> int:
    """Number of upper-triangle edges kept by thresholding.

    Nearest integer, halves rounding up, at least one: 84 nodes at 0.1 give
    349 (348.6), 3 nodes at 0.34 give 1 (1.02).
    """
    # round first so products like 0.25 * 4 * 3 / 2 do not pick up float fuzz
    return max(1, math.floor(round(top_frac * n * (n - 1) / 2, 9) + 0.5))


def _check_square_symmetric(name: str, m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise GraphValidationError(f"{name} must be square, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise GraphValidationError(f"{name} contains non-finite values")
    asym = np.abs(m - m.T).max(initial=0.0)
    if asym > 1e-9:
        i, j = np.unravel_index(np.argmax(np.abs(m - m.T)), m.shape)
        raise GraphValidationError(f"{name} not symmetric: |m[{i},{j}] - m[{j},{i}]| = {asym:.3g}")


def threshold_edges(partial: np.ndarray, top_frac: float) -> list[tuple[int, int]]:
    """Upper-triangle pairs kept by the top-fraction rule, strongest first.

    Only strictly positive entries qualify; ties go to the smaller (i, j).
    """
    n = partial.shape[0]
    iu, ju = np.triu_indices(n, 1)
    vals = partial[iu, ju]
    order = np.lexsort((ju, iu, -vals))
    order = order[vals[order] > 0][: quota(top_frac, n)]
    return [(int(iu[o]), int(ju[o])) for o in order]


def build_graph(pearson, partial, top_frac: float = 0.1, label: int = 0,
                subject_id: str = "", instance_id: str = "") -> BrainGraph:
    pearson = np.asarray(pearson, dtype=np.float64)
    partial = np.asarray(partial, dtype=np.float64)
    _check_square_symmetric("pearson", pearson)
    _check_square_symmetric("partial", partial)
    if pearson.shape != partial.shape:
        raise GraphValidationError(f"shape mismatch: pearson {pearson.shape} vs partial {partial.shape}")
    n = partial.shape[0]
    if n < 2:
        raise GraphValidationError(f"need at least 2 nodes, got {n}")
    if not 0 < top_frac < 1:
        raise GraphValidationError(f"top_frac must lie in (0, 1), got {top_frac}")

    adj = np.zeros((n, n))
    for i, j in threshold_edges(partial, top_frac):
        adj[i, j] = adj[j, i] = partial[i, j]

    isolated = np.flatnonzero(~(adj > 0).any(axis=1))
    off = partial.copy()
    np.fill_diagonal(off, -np.inf)
    for i in isolated:
        j = int(np.argmax(off[i]))  # first maximum -> smaller index on ties
        w = max(partial[i, j], REPAIR_FLOOR)
        adj[i, j] = adj[j, i] = max(adj[i, j], w)

    return BrainGraph(features=pearson.copy(), adjacency=adj, label=int(label),
                      subject_id=str(subject_id), instance_id=str(instance_id))


def validate(graph: BrainGraph) -> list[str]:
    """Return every invariant violation (empty list when the graph is valid)."""
    problems = []
    adj, feats = graph.adjacency, graph.features
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        return [f"adjacency not square: {adj.shape}"]
    n = adj.shape[0]
    if feats.ndim != 2 or feats.shape[0] != n:
        problems.append(f"features have {feats.shape[0] if feats.ndim == 2 else '?'} rows, expected {n}")
    if not np.isfinite(adj).all() or not np.isfinite(feats).all():
        problems.append("non-finite values present")
    for i, j in zip(*np.nonzero(np.abs(adj - adj.T) > 1e-12)):
        if i < j:
            problems.append(f"asymmetric edge: e[{i},{j}]={adj[i, j]} != e[{j},{i}]={adj[j, i]}")
    for i in np.flatnonzero(np.diag(adj) != 0):
        problems.append(f"nonzero diagonal at node {i}")
    for i, j in zip(*np.nonzero(adj < 0)):
        problems.append(f"negative weight e[{i},{j}]={adj[i, j]}")
    for i in np.flatnonzero(~(adj > 0).any(axis=1)):
        problems.append(f"isolated node {i}")
    return problems


def write_matrix(path, m: np.ndarray) -> None:
    """Write N comma-separated decimals per line; '.17g' round-trips exactly."""
    lines = (",".join(format(float(x), ".17g") for x in row) for row in np.asarray(m))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MatrixFormatError(path, None, "file not found") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise MatrixFormatError(path, lineno, "malformed number") from None
        if len(rows[-1]) != len(rows[0]):
            raise MatrixFormatError(path, lineno, f"expected {len(rows[0])} values, got {len(rows[-1])}")
    if not rows:
        raise MatrixFormatError(path, None, "empty matrix file")
    if len(rows) != len(rows[0]):
        raise MatrixFormatError(path, len(rows), f"matrix is {len(rows)}x{len(rows[0])}, expected square")
    return np.array(rows, dtype=np.float64)
