"""Synthetic connectome cohorts, dataset files and subject-level folds."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .graph import BrainGraph, MatrixFormatError, build_graph, read_matrix, write_matrix
from .seeding import rng_for


@dataclass
class CohortConfig:
    seed: int = 7
    n_subjects_per_class: int | tuple[int, ...] = 40
    n_nodes: int = 84
    planted_set: tuple[int, ...] = tuple(range(0, 80, 8))
    effect_size: float = 1.5
    n_timepoints: int = 150
    n_augment: int = 10
    top_frac: float = 0.1
    # shared modular loadings (atlas-like structure); 0 gives i.i.d. Gaussian loadings
    n_modules: int = 6
    module_noise: float = 0.5

    def __post_init__(self):
        self.planted_set = tuple(int(i) for i in self.planted_set)
        if isinstance(self.n_subjects_per_class, (list, tuple)):
            self.n_subjects_per_class = tuple(int(n) for n in self.n_subjects_per_class)

    @property
    def class_sizes(self) -> tuple[int, ...]:
        n = self.n_subjects_per_class
        return n if isinstance(n, tuple) else (int(n), int(n))

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise ConfigError(f"n_nodes must be >= 2, got {self.n_nodes}")
        if len(set(self.planted_set)) != len(self.planted_set):
            raise ConfigError(f"planted_set has duplicates: {self.planted_set}")
        bad = [i for i in self.planted_set if not 0 <= i < self.n_nodes]
        if bad:
            raise ConfigError(f"planted index {bad[0]} out of range for {self.n_nodes} nodes")
        if self.effect_size < 0:
            raise ConfigError(f"effect_size must be >= 0, got {self.effect_size}")
        if min(self.class_sizes) < 1 or self.n_augment < 1:
            raise ConfigError("need at least one subject per class and one augmentation")
        if self.n_timepoints < 2:
            raise ConfigError("n_timepoints must be >= 2")
        if not 0 < self.top_frac < 1:
            raise ConfigError(f"top_frac must lie in (0, 1), got {self.top_frac}")
        if not 0 <= self.n_modules <= self.n_nodes or self.module_noise < 0:
            raise ConfigError("n_modules must lie in [0, n_nodes] and module_noise must be >= 0")


@dataclass
class ManifestEntry:
    subject_id: str
    label: int
    pearson: str
    partial: str
    instance_id: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    n_classes: int = 2
    provenance: dict | str = "external"
    top_frac: float = 0.1
    root: Path = field(default=Path("."), repr=False)

    def subjects(self) -> dict[str, int]:
        return _subject_labels((e.subject_id, e.label) for e in self.entries)


@dataclass
class CohortInstance:
    subject_id: str
    label: int
    instance_id: str
    pearson: np.ndarray
    partial: np.ndarray


def partial_correlation(cov: np.ndarray, ridge_scale: float = 1e-3) -> np.ndarray:
    """Partial correlations from the ridge-regularised precision matrix."""
    n = cov.shape[0]
    ridge = ridge_scale * np.trace(cov) / n
    prec = np.linalg.inv(cov + ridge * np.eye(n))
    prec = 0.5 * (prec + prec.T)
    d = np.sqrt(np.diag(prec))
    rho = -prec / np.outer(d, d)
    np.fill_diagonal(rho, 1.0)
    return rho


def loadings(rng: np.random.Generator, config: CohortConfig) -> np.ndarray:
    """Per-subject Gaussian loading matrix A, so that cov = A A^T + N I.

    With modules, A has a fixed population mean (node i loads on module
    i mod r with weight sqrt(N)) plus subject-specific Gaussian jitter.
    """
    n, r = config.n_nodes, config.n_modules
    if r == 0:
        return rng.standard_normal((n, n))
    mean = np.zeros((n, r))
    mean[np.arange(n), np.arange(n) % r] = np.sqrt(n)
    return mean + config.module_noise * np.sqrt(n / r) * rng.standard_normal((n, r))


def subject_covariance(rng: np.random.Generator, config: CohortConfig, label: int) -> np.ndarray:
    n = config.n_nodes
    a = loadings(rng, config)
    sigma = a @ a.T + n * np.eye(n)
    if label == 1 and config.effect_size > 0 and config.planted_set:
        p = np.array(config.planted_set)
        sd = np.sqrt(np.diag(sigma))
        # effect in units of the marginal std, so effect_size is scale-free
        sigma[np.ix_(p, p)] += config.effect_size * np.outer(sd[p], sd[p])
    sigma = 0.5 * (sigma + sigma.T)
    lo = np.linalg.eigvalsh(sigma)[0]
    if lo <= 1e-10 * abs(sigma).max():
        sigma += (1e-6 * abs(sigma).max() - lo) * np.eye(n)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by the shift above
        raise RuntimeError("subject covariance is not SPD after projection") from exc
    return sigma


def iter_cohort(config: CohortConfig) -> Iterator[CohortInstance]:
    """Yield every augmented instance (Pearson and partial matrices) in order."""
    config.validate()
    index = 0
    for label, size in enumerate(config.class_sizes):
        for _ in range(size):
            rng = rng_for(config.seed, "data", index)
            sid = f"s{index:03d}"
            sigma = subject_covariance(rng, config, label)
            chol = np.linalg.cholesky(sigma)
            for aug in range(config.n_augment):
                x = rng.standard_normal((config.n_timepoints, config.n_nodes)) @ chol.T
                cov = np.cov(x, rowvar=False)
                cov = 0.5 * (cov + cov.T)
                sd = np.sqrt(np.diag(cov))
                pearson = np.clip(cov / np.outer(sd, sd), -1.0, 1.0)
                np.fill_diagonal(pearson, 1.0)
                yield CohortInstance(sid, label, f"{sid}_a{aug:02d}", pearson,
                                     partial_correlation(cov))
            index += 1


def random_graph(rng: np.random.Generator, n_nodes: int, label: int = 0, top_frac: float = 0.3,
                 n_timepoints: int = 40, subject_id: str = "r") -> BrainGraph:
    """Small random graph for checks: correlations of Gaussian samples."""
    a = rng.standard_normal((n_nodes, n_nodes))
    chol = np.linalg.cholesky(a @ a.T + n_nodes * np.eye(n_nodes))
    x = rng.standard_normal((n_timepoints, n_nodes)) @ chol.T
    cov = np.cov(x, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    sd = np.sqrt(np.diag(cov))
    pearson = cov / np.outer(sd, sd)
    np.fill_diagonal(pearson, 1.0)
    return build_graph(pearson, partial_correlation(cov), top_frac, label, subject_id, subject_id)


def generate_cohort(config: CohortConfig) -> list[BrainGraph]:
    return [build_graph(inst.pearson, inst.partial, config.top_frac, inst.label,
                        inst.subject_id, inst.instance_id)
            for inst in iter_cohort(config)]


def save_dataset(instances: Sequence[CohortInstance], out_dir, *, n_classes: int = 2,
                 provenance: dict | str = "external", top_frac: float = 0.1) -> Path:
    """Write matrices as CSV plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    mat_dir = out_dir / "matrices"
    mat_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for inst in instances:
        pear = f"matrices/{inst.instance_id}_pearson.csv"
        part = f"matrices/{inst.instance_id}_partial.csv"
        write_matrix(out_dir / pear, inst.pearson)
        write_matrix(out_dir / part, inst.partial)
        entries.append({"subject_id": inst.subject_id, "label": int(inst.label),
                        "instance_id": inst.instance_id, "pearson": pear, "partial": part})
    manifest = {"n_classes": n_classes, "top_frac": top_frac,
                "provenance": provenance, "entries": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def write_cohort(config: CohortConfig, out_dir) -> Path:
    prov = asdict(config)
    prov["planted_set"] = list(config.planted_set)
    return save_dataset(list(iter_cohort(config)), out_dir, n_classes=2,
                        provenance=prov, top_frac=config.top_frac)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MatrixFormatError(path, None, "manifest not found") from None
    except json.JSONDecodeError as exc:
        raise MatrixFormatError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    try:
        entries = [ManifestEntry(str(e["subject_id"]), int(e["label"]), str(e["pearson"]),
                                 str(e["partial"]), str(e.get("instance_id", "")))
                   for e in raw["entries"]]
        manifest = DatasetManifest(entries, int(raw["n_classes"]), raw.get("provenance", "external"),
                                   float(raw.get("top_frac", 0.1)), path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise MatrixFormatError(path, None, f"malformed manifest: {exc}") from None
    manifest.subjects()
    return manifest


def load_dataset(path) -> list[BrainGraph]:
    manifest = load_manifest(path)
    graphs = []
    for k, e in enumerate(manifest.entries):
        pearson = read_matrix(manifest.root / e.pearson)
        partial = read_matrix(manifest.root / e.partial)
        graphs.append(build_graph(pearson, partial, manifest.top_frac, e.label,
                                  e.subject_id, e.instance_id or f"{e.subject_id}_{k}"))
    return graphs


def _subject_labels(pairs) -> dict[str, int]:
    labels: dict[str, int] = {}
    for sid, label in pairs:
        if labels.setdefault(sid, label) != label:
            raise ConfigError(f"subject {sid!r} appears under labels {labels[sid]} and {label}")
    return labels


def split_by_subject(items, k_folds: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Stratified subject-level folds as (train subject ids, test subject ids).

    ``items`` is a :class:`DatasetManifest` or any sequence of objects with
    ``subject_id`` and ``label`` (e.g. BrainGraphs).
    """
    if isinstance(items, DatasetManifest):
        labels = items.subjects()
    else:
        labels = _subject_labels((g.subject_id, g.label) for g in items)
    if k_folds < 2:
        raise ConfigError(f"k_folds must be >= 2, got {k_folds}")
    by_class: dict[int, list[str]] = {}
    for sid, label in sorted(labels.items()):
        by_class.setdefault(label, []).append(sid)
    folds: list[list[str]] = [[] for _ in range(k_folds)]
    offset = 0
    for label in sorted(by_class):
        sids = by_class[label]
        if len(sids) < k_folds:
            raise ConfigError(f"class {label} has {len(sids)} subjects, fewer than {k_folds} folds")
        perm = rng_for(seed, "split", label).permutation(len(sids))
        for pos, p in enumerate(perm):
            folds[(pos + offset) % k_folds].append(sids[p])
        offset += len(sids)
    everyone = sorted(labels)
    out = []
    for test in folds:
        test_set = set(test)
        out.append(([s for s in everyone if s not in test_set], sorted(test)))
    return out
