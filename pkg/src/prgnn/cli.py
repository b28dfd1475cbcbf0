"""Command-line entry point: ``prgnn {gen-data,train,eval,interpret,sweep,selftest}``.

Configuration precedence: built-in defaults, then the JSON file given by
``--config`` (flat dotted keys such as ``loss.lambda1``), then explicit flags.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import CohortConfig, load_dataset, load_manifest, write_cohort
from .diffcore import NumericError
from .errors import ConfigError
from .graph import GraphValidationError
from .interpret import (collect_scores, ensure_dir, overlap, planted_recovery, read_label_map,
                        salient_nodes, score_histogram_series, write_histogram_csv, write_overlap_csv,
                        write_ranked_csv, write_records_csv)
from .losses import LossConfig
from .model import PrGnnModel
from .train import (TABLE1_CELLS, TrainConfig, cross_validate, evaluate, read_epoch_log, sweep,
                    write_epoch_log)

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULTS: dict[str, object] = {
    "seed": 7,
    "cohort.n_subjects_per_class": 40,
    "cohort.n_nodes": 84,
    "cohort.planted_set": list(range(0, 80, 8)),
    "cohort.effect_size": 1.5,
    "cohort.n_timepoints": 150,
    "cohort.n_augment": 10,
    "cohort.top_frac": 0.1,
    "cohort.n_modules": 6,
    "cohort.module_noise": 0.5,
    "train.epochs": 100,
    "train.base_lr": 0.001,
    "train.halve_every": 20,
    "train.batch_size": 16,
    "train.pool_kind": "topk",
    "train.ratio": 0.5,
    "train.hidden": [16, 16],
    "train.mlp": [16, 8, 2],
    "loss.lambda1": 0.1,
    "loss.lambda2": 0.1,
    "loss.sigma": 5.0,
    "loss.dist_kind": "bce",
    "cv.folds": 5,
    "cv.parallel_folds": 1,
    "cv.subject_vote": False,
    "paths.manifest": "",
    "paths.out": "out",
    "paths.checkpoint": "",
    "paths.label_map": "",
}

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed", "pool": "train.pool_kind", "dist": "loss.dist_kind",
    "lambda1": "loss.lambda1", "lambda2": "loss.lambda2", "sigma": "loss.sigma",
    "folds": "cv.folds", "epochs": "train.epochs", "out": "paths.out",
    "manifest": "paths.manifest", "checkpoint": "paths.checkpoint",
    "label_map": "paths.label_map", "parallel_folds": "cv.parallel_folds",
    "effect_size": "cohort.effect_size",
}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if key == "cohort.n_subjects_per_class":
                return list(value)
            return [int(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot use value {value!r}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        for k, v in raw.items():
            cfg[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    if isinstance(cfg["cohort.n_subjects_per_class"], list):
        cfg["cohort.n_subjects_per_class"] = [int(v) for v in cfg["cohort.n_subjects_per_class"]]
    return cfg


def cohort_config(cfg: dict) -> CohortConfig:
    n = cfg["cohort.n_subjects_per_class"]
    out = CohortConfig(
        seed=cfg["seed"], n_subjects_per_class=tuple(n) if isinstance(n, list) else n,
        n_nodes=cfg["cohort.n_nodes"], planted_set=tuple(cfg["cohort.planted_set"]),
        effect_size=cfg["cohort.effect_size"], n_timepoints=cfg["cohort.n_timepoints"],
        n_augment=cfg["cohort.n_augment"], top_frac=cfg["cohort.top_frac"],
        n_modules=cfg["cohort.n_modules"], module_noise=cfg["cohort.module_noise"])
    out.validate()
    return out


def train_config(cfg: dict) -> TrainConfig:
    loss = LossConfig(lambda1=cfg["loss.lambda1"], lambda2=cfg["loss.lambda2"],
                      sigma=cfg["loss.sigma"], dist_kind=cfg["loss.dist_kind"])
    if cfg["train.pool_kind"] not in ("topk", "sage"):
        raise ConfigError(f"pool kind must be topk or sage, got {cfg['train.pool_kind']!r}")
    out = TrainConfig(epochs=cfg["train.epochs"], base_lr=cfg["train.base_lr"],
                      halve_every=cfg["train.halve_every"], batch_size=cfg["train.batch_size"],
                      seed=cfg["seed"], loss=loss, pool_kind=cfg["train.pool_kind"],
                      ratio=cfg["train.ratio"], hidden=tuple(cfg["train.hidden"]),
                      mlp=tuple(cfg["train.mlp"]))
    out.validate()
    if cfg["cv.folds"] < 2:
        raise ConfigError(f"cv.folds must be >= 2, got {cfg['cv.folds']}")
    return out


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def echo_config(out_dir, cfg: dict, command: str) -> Path:
    return write_json(Path(out_dir) / f"config_{command}.json", cfg)


def _require(cfg: dict, key: str, flag: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"{flag} (or config key {key}) is required")
    return cfg[key]


def _planted_from_manifest(manifest_path) -> list[int]:
    prov = load_manifest(manifest_path).provenance
    if isinstance(prov, dict) and "planted_set" in prov:
        return [int(i) for i in prov["planted_set"]]
    return []


# commands --------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    cohort = cohort_config(cfg)
    out = ensure_dir(cfg["paths.out"])
    path = write_cohort(cohort, out)
    echo_config(out, cfg, "gen-data")
    print(path)
    return EXIT_OK


def _fold_outputs(out: Path, fold) -> None:
    from .plotting import plot_score_histograms, plot_training_curves
    fdir = ensure_dir(out / f"fold{fold.fold}")
    fold.model.save(fdir / "checkpoint.json", extra={"fold": fold.fold, "seed": fold.seed,
                                                      "test_subjects": fold.test_subjects})
    write_epoch_log(fdir / "epochs.jsonl", fold.reports)
    write_histogram_csv(fdir / "score_histograms.csv", score_histogram_series(fold.reports))
    plot_score_histograms(fold.reports, fdir / "score_histograms.png")
    plot_training_curves(fold.reports, fdir / "training_curves.png")


def cmd_train(cfg: dict, do_sweep: bool = False) -> int:
    if do_sweep:
        return cmd_sweep(cfg)
    tcfg = train_config(cfg)
    graphs = load_dataset(_require(cfg, "paths.manifest", "--manifest"))
    out = ensure_dir(cfg["paths.out"])
    echo_config(out, cfg, "train")
    res = cross_validate(graphs, cfg["cv.folds"], tcfg, parallel=cfg["cv.parallel_folds"],
                         subject_vote=cfg["cv.subject_vote"])
    for fold in res.folds:
        _fold_outputs(out, fold)
    write_json(out / "summary.json", res.summary())
    for fold in res.folds:
        print(f"fold {fold.fold}: accuracy {fold.accuracy:.3f}")
    print(f"mean(std) accuracy: {res.formatted}")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    from .plotting import plot_sweep
    tcfg = train_config(cfg)
    graphs = load_dataset(_require(cfg, "paths.manifest", "--manifest"))
    out = ensure_dir(cfg["paths.out"])
    echo_config(out, cfg, "sweep")
    rows = sweep(graphs, cfg["cv.folds"], tcfg, TABLE1_CELLS, cfg["cv.parallel_folds"])
    write_json(out / "sweep.json", rows)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("lambda1,lambda2,mean,std,formatted\n")
        for r in rows:
            fh.write(f"{r['lambda1']:g},{r['lambda2']:g},{r['mean']!r},{r['std']!r},{r['formatted']}\n")
    plot_sweep(rows, out / "sweep.png")
    name = f"{tcfg.pool_kind.upper()}+{tcfg.loss.dist_kind.upper()}"
    print(" | ".join(["setting"] + [r["cell"] for r in rows]))
    print(" | ".join([name] + [r["formatted"] for r in rows]))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    model = PrGnnModel.load(_require(cfg, "paths.checkpoint", "--checkpoint"))
    graphs = load_dataset(_require(cfg, "paths.manifest", "--manifest"))
    ev = evaluate(model, graphs, subject_vote=True)
    out = ensure_dir(cfg["paths.out"])
    echo_config(out, cfg, "eval")
    write_json(out / "eval.json", {"n_instances": len(graphs), "accuracy": ev.accuracy,
                                   "subject_accuracy": ev.subject_accuracy,
                                   "predictions": ev.predictions.tolist()})
    with open(out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("instance_id,subject_id,label,prediction\n")
        for g, p in zip(graphs, ev.predictions):
            fh.write(f"{g.instance_id},{g.subject_id},{g.label},{int(p)}\n")
    print(f"accuracy {ev.accuracy:.3f} (subject vote {ev.subject_accuracy:.3f}) on {len(graphs)} instances")
    return EXIT_OK


def _interpret_one(model_path, graphs, label: int, out: Path, names, planted) -> dict:
    from .plotting import plot_overlap, plot_salient_nodes
    model = PrGnnModel.load(model_path)
    records = collect_scores(model, graphs)
    ranking = salient_nodes(records, label)
    write_ranked_csv(out / "ranked_nodes.csv", ranking, names)
    write_records_csv(out / "surviving_nodes.csv", records)
    chosen = [r for r in records if r.label == label]
    result: dict = {"checkpoint": str(model_path), "label": label, "n_records": len(chosen),
                    "top_nodes": [s.node_id for s in ranking[:21]]}
    if len(chosen) >= 2:
        mat, mean = overlap(chosen, "layer2")
        write_overlap_csv(out / "overlap.csv", chosen, mat)
        plot_overlap(mat, out / "overlap.png", f"layer-2 overlap, class {label}: mean {mean:.3f}")
        result["overlap_mean"] = mean
        result["overlap_mean_layer1"] = overlap(chosen, "layer1")[1]
    plot_salient_nodes(ranking[:21], out / "salient_nodes.png", planted, names)
    if planted:
        result["planted_recovery"] = planted_recovery(ranking[:21], planted)
    log = Path(model_path).with_name("epochs.jsonl")
    if log.exists():
        write_histogram_csv(out / "score_histograms.csv", score_histogram_series(read_epoch_log(log)))
    write_json(out / "interpret.json", result)
    return result


def cmd_interpret(cfg: dict, label: int = 1, compare: str | None = None) -> int:
    ckpt = _require(cfg, "paths.checkpoint", "--checkpoint")
    manifest = _require(cfg, "paths.manifest", "--manifest")
    for p in [ckpt] + ([compare] if compare else []):
        if not Path(p).is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    graphs = load_dataset(manifest)
    names = None
    if cfg["paths.label_map"]:
        if Path(cfg["paths.label_map"]).is_file():
            names = read_label_map(cfg["paths.label_map"])
        else:
            print(f"label map {cfg['paths.label_map']} not found; using node ids", file=sys.stderr)
    planted = _planted_from_manifest(manifest)
    out = ensure_dir(cfg["paths.out"])
    echo_config(out, cfg, "interpret")
    runs = [("a", ckpt)] + ([("b", compare)] if compare else [])
    results = {}
    for tag, path in runs:
        sub = ensure_dir(out / tag) if compare else out
        results[tag] = _interpret_one(path, graphs, label, sub, names, planted)
    for tag, r in results.items():
        line = f"[{tag}] class {label} top nodes: {r['top_nodes'][:10]}"
        if "overlap_mean" in r:
            line += f"; layer-2 overlap {r['overlap_mean']:.3f}"
        if "planted_recovery" in r:
            line += f"; planted in top 21: {r['planted_recovery']['hits']}/{len(planted)}"
        print(line)
    if compare and all("overlap_mean" in r for r in results.values()):
        diff = results["b"]["overlap_mean"] - results["a"]["overlap_mean"]
        write_json(out / "compare.json", {"a": results["a"]["overlap_mean"],
                                          "b": results["b"]["overlap_mean"], "b_minus_a": diff})
        print(f"overlap difference (b - a): {diff:+.3f}")
    return EXIT_OK


def cmd_selftest(corrupt: tuple[str, ...] = ()) -> int:
    from .selftest import main_selftest
    ok, report = main_selftest(corrupt)
    print(report)
    return EXIT_OK if ok else EXIT_SELFTEST


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--manifest", help="dataset manifest.json")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--pool", choices=("topk", "sage"))
    model.add_argument("--dist", choices=("mmd", "bce"))
    model.add_argument("--lambda1", type=float)
    model.add_argument("--lambda2", type=float)
    model.add_argument("--sigma", type=float)
    model.add_argument("--folds", type=int)
    model.add_argument("--epochs", type=int)
    model.add_argument("--parallel-folds", dest="parallel_folds", type=int)

    p = argparse.ArgumentParser(prog="prgnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic cohort")
    g.add_argument("--effect-size", dest="effect_size", type=float)
    t = sub.add_parser("train", parents=[common, model], help="subject-level cross-validation")
    t.add_argument("--sweep", action="store_true", help="run the five lambda cells instead")
    sub.add_parser("sweep", parents=[common, model], help="cross-validate the five lambda cells")
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint")
    i = sub.add_parser("interpret", parents=[common], help="salient nodes and overlap")
    i.add_argument("--checkpoint")
    i.add_argument("--compare", help="second checkpoint for a paired overlap comparison")
    i.add_argument("--label-map", dest="label_map", help="CSV of node_id,name")
    i.add_argument("--label", type=int, default=1, help="class whose salient nodes are reported")
    s = sub.add_parser("selftest", help="gradient checks and invariants")
    s.add_argument("--corrupt", action="append", default=[], help=argparse.SUPPRESS)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest(tuple(args.corrupt))
    overrides = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS}
    cfg = load_config(args.config, overrides)
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.sweep)
    if args.command == "sweep":
        return cmd_sweep(cfg)
    if args.command == "eval":
        return cmd_eval(cfg)
    return cmd_interpret(cfg, args.label, args.compare)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, GraphValidationError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
