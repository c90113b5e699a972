"""Command-line entry point ``funcad``.

Every stage of the pipeline is also available on its own, reading and
writing the same files as a full run. ``--seed``, ``--config`` and
``--out`` may appear before or after the subcommand.

Exit codes: 0 success, 1 unexpected error, 2 bad input or arguments,
3 missing file or artifact, 4 output directory locked, 5 numerical
failure or size cap.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import INPUT_SPACES, KMeansParams, cluster, select_k, silhouette_score
from .config import PRESETS, load_config
from .dataset import CsvSchema, load_csv, load_labels, write_csv, write_labels
from .datagen import generate
from .errors import (
    ArgumentError,
    CapacityError,
    DependencyError,
    FuncadError,
    LockError,
    NumericError,
    StageError,
)
from .evaluation import DEFAULT_BETAS, MAPPING_RULES, format_table, two_step_evaluate
from .features import apply_standardizer, extract, fit_standardizer, read_matrix_csv, write_matrix_csv
from .iforest import ForestModel, ForestParams, fit, score, threshold, train_test_split
from .pipeline import (
    check_additivity,
    cmd_export_plots,
    cmd_pipeline,
    read_clusters,
    read_scores,
    tree_document,
    write_clusters,
    write_importances_csv,
    write_scores,
    write_silhouette,
)
from .shapley import read_attributions, shapley_exact, write_attributions
from .tree import TreeParams, fit_tree, repeated_importances

SPACE_ALIASES = {"shap": "shap", "features": "standardized_features"}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, LockError):
        return 4
    if isinstance(exc, DependencyError) or isinstance(exc, FileNotFoundError):
        return 3
    if isinstance(exc, (NumericError, CapacityError)):
        return 5
    if isinstance(exc, (FuncadError, ValueError)):
        return 2
    return 1


def _config(args):
    name = getattr(args, "config", None)
    return load_config(name if name is not None else "dataset1")


def _seed(args, config=None) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return config.seed if config is not None else 0


def _need_out(args) -> Path:
    if getattr(args, "out", None) is None:
        raise ArgumentError("--out is required for this command")
    return Path(args.out)


# subcommands ----------------------------------------------------------------


def run_generate(args) -> int:
    out = _need_out(args)
    ds = generate(args.dataset, seed=_seed(args))
    write_csv(ds, out)
    if args.labels:
        write_labels(ds.ids, ds.labels, args.labels)
    print(f"wrote {len(ds)} series to {out}")
    return 0


def run_featurize(args) -> int:
    config = _config(args)
    out = _need_out(args)
    ds = load_csv(args.input, CsvSchema(id_column=args.id_column, time_column=args.time_column))
    config.features.validate_for(ds.length, ds.channel_names)
    F = extract(ds, config.features)
    write_matrix_csv(F, out)
    print(f"wrote {F.shape[0]} x {F.shape[1]} features to {out}")
    return 0


def run_score(args) -> int:
    config = _config(args)
    out = _need_out(args)
    F = read_matrix_csv(args.features)
    seed = _seed(args, config)
    fc = config.forest
    train_mask = None
    if args.fit:
        fraction = args.train_fraction if args.train_fraction is not None else fc.train_fraction
        train, _ = train_test_split(len(F.series_ids), fraction, seed)
        model = fit(F.rows(train), ForestParams(fc.n_trees, fc.subsample, fc.max_depth, seed), args.jobs)
        model.save(args.model)
        train_mask = np.zeros(len(F.series_ids), dtype=bool)
        train_mask[train] = True
    else:
        if not Path(args.model).is_file():
            raise DependencyError(f"model {args.model} not found (use --fit to train one)")
        model = ForestModel.load(args.model)
    sv = score(model, F)
    q = args.quantile if args.quantile is not None else fc.threshold_quantile
    th = threshold(sv, q)
    labels = None
    if args.labels:
        mapping = load_labels(args.labels)
        labels = [mapping[s] for s in F.series_ids]
    write_scores(out, F.series_ids, sv.path_length, sv.score, th.alarms, train_mask, labels)
    print(f"{int(th.alarms.sum())} of {len(th.alarms)} series above the {q:g} quantile ({th.cutoff:.6g})")
    return 0


def run_shap(args) -> int:
    config = _config(args)
    out = _need_out(args)
    F = read_matrix_csv(args.features)
    if not Path(args.model).is_file():
        raise DependencyError(f"model {args.model} not found")
    model = ForestModel.load(args.model)
    attribs = shapley_exact(model, F, args.method or config.shap.method, config.shap.max_features, args.jobs)
    err = check_additivity(attribs, model.mean_path_length(F.values))
    sidecar = write_attributions(attribs, out)
    print(f"wrote attributions to {out} and {sidecar} (max additivity error {err:.3g})")
    return 0


def _matrix_for(space: str, args):
    if space == "shap":
        if not args.shap:
            raise ArgumentError("--shap is required for --input shap")
        a = read_attributions(args.shap)
        return a.phi, a.series_ids, a.feature_names
    if not args.features:
        raise ArgumentError("--features is required for --input features")
    F = read_matrix_csv(args.features)
    Z = apply_standardizer(F, fit_standardizer(F))
    return Z.values, Z.series_ids, Z.feature_names


def run_cluster(args) -> int:
    config = _config(args)
    out = _need_out(args)
    space = SPACE_ALIASES[args.input]
    X, ids, _ = _matrix_for(space, args)
    params = KMeansParams(config.cluster.restarts, config.cluster.max_iter, config.cluster.tol, _seed(args, config))
    algorithm = args.algorithm or config.cluster.algorithm
    if args.k == "auto":
        k_max = min(args.k_max, len(X) - 1)
        sel = select_k(X, range(args.k_min, k_max + 1), algorithm, params, space)
        res, sil = sel.results[sel.best_k], sel.scores
        inertia = {k: r.inertia for k, r in sel.results.items()}
    else:
        try:
            k = int(args.k)
        except ValueError:
            raise ArgumentError(f"--k must be an integer or 'auto', got {args.k!r}") from None
        res = cluster(X, k, algorithm, params, space)
        sil = {k: silhouette_score(X, res.labels)} if k > 1 else {}
        inertia = {k: res.inertia}
    write_clusters(out, ids, res.labels)
    if args.silhouette:
        write_silhouette(args.silhouette, sil, inertia)
    print(f"k = {res.k}" + (f", silhouette {sil[res.k]:.4f}" if res.k in sil else ""))
    return 0


def run_tree(args) -> int:
    config = _config(args)
    out = _need_out(args)
    space = SPACE_ALIASES[args.input]
    X, ids, names = _matrix_for(space, args)
    cids, labels = read_clusters(args.clusters)
    if cids != tuple(ids):
        raise ArgumentError("cluster labels and matrix list different series")
    tc = config.tree
    params = TreeParams(args.max_depth if args.max_depth is not None else tc.max_depth, tc.min_samples_leaf, _seed(args, config))
    model = fit_tree(X, labels, params)
    reps = args.repetitions if args.repetitions is not None else tc.repetitions
    report = repeated_importances(X, labels, reps, tc.subsample_fraction, params, names, n_jobs=args.jobs)
    doc = tree_document(model, names, report)
    Path(out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.importances:
        write_importances_csv(args.importances, report)
    sys.stdout.write(doc["rules"])
    return 0


def run_evaluate(args) -> int:
    config = _config(args)
    ids, pred = read_clusters(args.clusters)
    truth_map = load_labels(args.labels)
    missing = [s for s in ids if s not in truth_map]
    if missing:
        raise ArgumentError(f"no label for {len(missing)} series, e.g. {missing[0]!r}")
    truth = np.array([truth_map[s] for s in ids])
    scores = None
    if args.scores:
        df = read_scores(args.scores)
        if tuple(df["series_id"]) != ids:
            raise ArgumentError("scores and clusters list different series")
        scores = df["score"].to_numpy(dtype=float)
    betas = tuple(args.beta) if args.beta else config.evaluate.betas
    report = two_step_evaluate(pred, truth, betas, scores, args.mapping or config.evaluate.mapping)
    doc = report.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if report.roc_auc is not None:
        print(f"ROC AUC {report.roc_auc:.4f}")
    sys.stdout.write(format_table(report))
    return 0


def run_pipeline(args) -> int:
    config = _config(args).with_overrides(seed=args.seed, out=args.out, n_jobs=args.jobs)
    manifest = cmd_pipeline(config)
    out = Path(config.out or "run")
    for note in manifest.notes:
        print(note)
    ev = out / "evaluation.json"
    if ev.is_file():
        doc = json.loads(ev.read_text(encoding="utf-8"))
        print(f"k = {doc['k']}, ROC AUC {doc['roc_auc']:.4f}, {doc['alarms']} alarms")
        if "table" in doc:
            sys.stdout.write(doc["table"])
    print(f"{len(manifest.artifacts)} artifacts in {out}")
    return 0


def run_export_plots(args) -> int:
    run_dir = args.run_dir or getattr(args, "out", None)
    if run_dir is None:
        raise ArgumentError("give the run directory")
    for p in cmd_export_plots(run_dir):
        print(p)
    return 0


# parser ---------------------------------------------------------------------


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="root seed (overrides the config)")
    parser.add_argument(
        "--config", default=default, help=f"preset name ({', '.join(PRESETS)}) or path to a TOML config"
    )
    parser.add_argument("--out", default=default, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funcad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"funcad {__version__}")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("generate", run_generate, "write a synthetic dataset as CSV")
    p.add_argument("--dataset", type=int, choices=(1, 2), required=True)
    p.add_argument("--labels", help="also write series_id,group labels here")

    p = add("featurize", run_featurize, "turn series into feature vectors")
    p.add_argument("--input", required=True, help="long-format series CSV")
    p.add_argument("--id-column", default="series_id")
    p.add_argument("--time-column", default="t")

    p = add("score", run_score, "isolation forest scores and alarms")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True, help="model JSON (written with --fit, read otherwise)")
    p.add_argument("--fit", action="store_true", help="train a new model on a random split")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--quantile", type=float)
    p.add_argument("--labels", help="copy ground-truth groups into the scores file")
    p.add_argument("--jobs", type=int, default=1)

    p = add("shap", run_shap, "exact Shapley attributions of the mean path length")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("paths", "enumerate"))
    p.add_argument("--jobs", type=int, default=1)

    p = add("cluster", run_cluster, "K-means or PAM on attributions or features")
    p.add_argument("--input", choices=tuple(SPACE_ALIASES), default="shap")
    p.add_argument("--shap")
    p.add_argument("--features")
    p.add_argument("--k", default="auto", help="cluster count or 'auto' (silhouette)")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=12)
    p.add_argument("--algorithm", choices=("kmeans", "kmedoids"))
    p.add_argument("--silhouette", help="write k,silhouette,inertia here")

    p = add("tree", run_tree, "decision tree rules and importances for the clusters")
    p.add_argument("--input", choices=tuple(SPACE_ALIASES), default="shap")
    p.add_argument("--shap")
    p.add_argument("--features")
    p.add_argument("--clusters", required=True)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--importances", help="write feature,mean_importance,sd here")
    p.add_argument("--jobs", type=int, default=1)

    p = add("evaluate", run_evaluate, "two-step weighted F-beta of a clustering")
    p.add_argument("--clusters", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--scores", help="scores CSV for the ROC AUC")
    p.add_argument("--beta", type=float, action="append", help=f"repeatable; default {DEFAULT_BETAS}")
    p.add_argument("--mapping", choices=MAPPING_RULES)

    p = add("pipeline", run_pipeline, "run every stage and write a manifest")
    p.add_argument("--jobs", type=int, default=None)

    p = add("export-plots", run_export_plots, "plot-ready CSV tables from a run directory")
    p.add_argument("run_dir", nargs="?")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"funcad {args.command}: stage {exc.stage!r} failed: {exc.cause}", file=sys.stderr)
        return exit_code(exc)
    except (FuncadError, ValueError, FileNotFoundError) as exc:
        print(f"funcad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
