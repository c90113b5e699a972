"""End-to-end batch run and plot-table export.

A run writes its artifacts into one output directory. Files are first
written with a ``.partial`` suffix and renamed once every stage has
succeeded; a failed run leaves the partial files in place. A lock file
(``.funcad.lock``, created exclusively) keeps two runs out of the same
directory. ``manifest.json`` lists every artifact with its SHA-256, the
config snapshot and per-stage wall-clock timings. Everything except the
timings is a pure function of the config.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .cluster import KMeansParams, cluster, select_k, silhouette_score
from .config import PipelineConfig
from .dataset import CsvSchema, FunctionalDataset, load_csv, load_labels
from .datagen import generate
from .errors import ArgumentError, DependencyError, FuncadError, LockError, NumericError, SchemaError, StageError
from .evaluation import format_table, two_step_evaluate
from .features import FeatureMatrix, apply_standardizer, extract, fit_standardizer, write_matrix_csv
from .iforest import ForestParams, fit, score, threshold, train_test_split
from .shapley import SUMMARY_FIELDS, AttributionMatrix, group_shap_summary, read_attributions, shapley_exact, write_attributions
from .tree import TreeParams, fit_tree, render_rules, repeated_importances

ADDITIVITY_TOL = 1e-6
LOCK_NAME = ".funcad.lock"
PLOTS_DIR = "plots"

ARTIFACTS = (
    "features.csv",
    "model.json",
    "scores.csv",
    "shap.csv",
    "shap.json",
    "clusters.csv",
    "silhouette.csv",
    "tree.json",
    "evaluation.json",
)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _num(v) -> str:
    return repr(float(v))


# artifact writers shared with the per-stage commands ------------------------


def write_scores(path, series_ids, path_length, scores, alarms, train_mask=None, labels=None) -> None:
    header = ["series_id"] + (["group"] if labels is not None else []) + (["train"] if train_mask is not None else [])
    header += ["path_length", "score", "alarm"]
    rows = []
    for i, sid in enumerate(series_ids):
        row = [sid]
        if labels is not None:
            row.append(int(labels[i]))
        if train_mask is not None:
            row.append(int(bool(train_mask[i])))
        row += [_num(path_length[i]), _num(scores[i]), int(bool(alarms[i]))]
        rows.append(row)
    _write_rows(Path(path), header, rows)


def read_scores(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"missing artifact {path}")
    df = pd.read_csv(path, dtype={"series_id": str}, float_precision="round_trip")
    for col in ("series_id", "score", "alarm"):
        if col not in df.columns:
            raise SchemaError(f"{path}: missing column {col!r}")
    return df


def write_clusters(path, series_ids, labels) -> None:
    _write_rows(Path(path), ["series_id", "cluster"], ([s, int(c)] for s, c in zip(series_ids, labels)))


def read_clusters(path) -> tuple[tuple[str, ...], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"missing artifact {path}")
    df = pd.read_csv(path, dtype={"series_id": str})
    if list(df.columns[:2]) != ["series_id", "cluster"]:
        raise SchemaError(f"{path}: expected columns series_id,cluster")
    return tuple(df["series_id"]), df["cluster"].to_numpy(dtype=np.int64)


def write_silhouette(path, scores: dict[int, float], inertia: dict[int, float] | None = None) -> None:
    rows = [[k, _num(v)] + ([_num(inertia[k])] if inertia else []) for k, v in sorted(scores.items())]
    _write_rows(Path(path), ["k", "silhouette"] + (["inertia"] if inertia else []), rows)


def tree_document(model, feature_names, report) -> dict:
    return {
        "feature_names": list(feature_names),
        "structure": model.to_dict(),
        "rules": render_rules(model, feature_names),
        "importances": [
            {"feature": n, "mean_importance": float(m), "sd": float(s), "single_run": float(r)}
            for n, m, s, r in zip(report.feature_names, report.mean, report.sd, report.single_run)
        ],
        "repetitions": int(report.repetitions.shape[0]),
    }


def write_importances_csv(path, report) -> None:
    _write_rows(Path(path), ["feature", "mean_importance", "sd"], ([n, _num(m), _num(s)] for n, m, s in report.rows()))


def check_additivity(attribs: AttributionMatrix, mean_path_length: np.ndarray, tol: float = ADDITIVITY_TOL) -> float:
    err = float(np.max(np.abs(attribs.output - mean_path_length))) if len(mean_path_length) else 0.0
    if not err <= tol:
        raise NumericError(f"attributions do not add up to the mean path length (max error {err:.3g})")
    return err


# run bookkeeping ------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    artifacts: list[dict] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "tool": "funcad",
            "version": self.version,
            "config": self.config,
            "artifacts": self.artifacts,
            "stages": self.stages,
            "notes": self.notes,
        }

    def hashes(self) -> dict[str, str]:
        return {a["name"]: a["sha256"] for a in self.artifacts}


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class _Run:
    def __init__(self, out: Path, manifest: RunManifest):
        self.out = out
        self.manifest = manifest
        self.staged: list[str] = []

    def partial(self, name: str) -> Path:
        self.staged.append(name)
        return self.out / f"{name}.partial"

    def stage(self, name: str, fn: Callable):
        t0 = time.perf_counter()
        try:
            result = fn()
        except FuncadError as exc:
            raise StageError(name, exc) from exc
        except (ValueError, ArithmeticError, OSError, KeyError) as exc:
            raise StageError(name, exc) from exc
        self.manifest.stages.append({"name": name, "seconds": round(time.perf_counter() - t0, 6)})
        return result

    def commit(self) -> None:
        for name in self.staged:
            (self.out / f"{name}.partial").replace(self.out / name)
        for name in self.staged:
            p = self.out / name
            self.manifest.artifacts.append({"name": name, "bytes": p.stat().st_size, "sha256": sha256_file(p)})


def load_source(config: PipelineConfig) -> FunctionalDataset:
    d = config.data
    if d.source == "generated":
        return generate(d.dataset, seed=config.seed, **dict(d.generator))
    ds = load_csv(d.path, CsvSchema(id_column=d.id_column, time_column=d.time_column))
    if d.labels:
        ds = ds.with_labels(load_labels(d.labels))
    return ds


def _cluster_input(space: str, attribs: AttributionMatrix | None, standardized: FeatureMatrix) -> np.ndarray:
    return attribs.phi if space == "shap" else standardized.values


def _run_clustering(X: np.ndarray, cfg, seed: int):
    params = KMeansParams(restarts=cfg.restarts, max_iter=cfg.max_iter, tol=cfg.tol, seed=seed)
    if cfg.k is not None:
        res = cluster(X, cfg.k, cfg.algorithm, params, cfg.input_space)
        sil = {cfg.k: silhouette_score(X, res.labels)} if len(np.unique(res.labels)) > 1 else {}
        return res, sil, {cfg.k: res.inertia}
    k_max = min(cfg.k_max, len(X) - 1)
    if k_max < cfg.k_min:
        raise ArgumentError(f"too few rows ({len(X)}) for k in {cfg.k_min}..{cfg.k_max}")
    sel = select_k(X, range(cfg.k_min, k_max + 1), cfg.algorithm, params, cfg.input_space)
    return sel.results[sel.best_k], sel.scores, {k: r.inertia for k, r in sel.results.items()}


def cmd_pipeline(config: PipelineConfig, out: str | Path | None = None) -> RunManifest:
    """Run every stage and write the artifacts listed in the manifest."""
    out_dir = Path(out if out is not None else (config.out or "run"))
    manifest = RunManifest(config.to_dict())
    seed = config.seed
    with run_lock(out_dir):
        run = _Run(out_dir, manifest)
        ds = run.stage("data", lambda: load_source(config))
        labels = np.asarray(ds.labels) if ds.labels is not None else None

        def featurize():
            config.features.validate_for(ds.length, ds.channel_names)
            F = extract(ds, config.features)
            write_matrix_csv(F, run.partial("features.csv"))
            return F

        F = run.stage("featurize", featurize)

        def detect():
            fc = config.forest
            train, _ = train_test_split(len(F.series_ids), fc.train_fraction, seed)
            model = fit(F.rows(train), ForestParams(fc.n_trees, fc.subsample, fc.max_depth, seed), config.n_jobs)
            model.save(run.partial("model.json"))
            sv = score(model, F)
            th = threshold(sv, fc.threshold_quantile)
            mask = np.zeros(len(F.series_ids), dtype=bool)
            mask[train] = True
            write_scores(run.partial("scores.csv"), F.series_ids, sv.path_length, sv.score, th.alarms, mask, labels)
            return model, sv, th

        model, sv, th = run.stage("detect", detect)

        attribs = None
        if config.shap.enabled:

            def explain():
                a = shapley_exact(model, F, config.shap.method, config.shap.max_features, config.n_jobs)
                err = check_additivity(a, sv.path_length)
                p = run.partial("shap.csv")
                write_attributions(a, p, sidecar=run.partial("shap.json"))
                return a, err

            attribs, additivity = run.stage("shap", explain)
            manifest.notes.append(f"max additivity error {additivity:.3g}")
        else:
            manifest.notes.append("shap: disabled by config")

        standardized = apply_standardizer(F, fit_standardizer(F))

        def group():
            X = _cluster_input(config.cluster.input_space, attribs, standardized)
            res, sil, inertia = _run_clustering(X, config.cluster, seed)
            write_clusters(run.partial("clusters.csv"), F.series_ids, res.labels)
            write_silhouette(run.partial("silhouette.csv"), sil, inertia)
            return res

        clustering = run.stage("cluster", group)

        def explain_tree():
            tc = config.tree
            X = _cluster_input(tc.input_space, attribs, standardized)
            params = TreeParams(tc.max_depth, tc.min_samples_leaf, seed)
            tree = fit_tree(X, clustering.labels, params)
            report = repeated_importances(
                X, clustering.labels, tc.repetitions, tc.subsample_fraction, params, F.feature_names, n_jobs=config.n_jobs
            )
            _write_json(run.partial("tree.json"), tree_document(tree, F.feature_names, report))

        run.stage("tree", explain_tree)

        if labels is not None and np.any(labels != 0) and np.any(labels == 0):

            def evaluate():
                ev = config.evaluate
                primary = two_step_evaluate(clustering.labels, labels, ev.betas, sv.score, ev.mapping)
                doc = {
                    "k": clustering.k,
                    "alarms": int(th.alarms.sum()),
                    "threshold": {"quantile": th.quantile, "cutoff": th.cutoff},
                    config.cluster.input_space: primary.to_dict(),
                }
                other = None
                if ev.compare_features:
                    space = "standardized_features" if config.cluster.input_space == "shap" else "shap"
                    if space == "standardized_features" or attribs is not None:
                        X = _cluster_input(space, attribs, standardized)
                        params = KMeansParams(config.cluster.restarts, config.cluster.max_iter, config.cluster.tol, seed)
                        alt = cluster(X, clustering.k, config.cluster.algorithm, params, space)
                        other = two_step_evaluate(alt.labels, labels, ev.betas, sv.score, ev.mapping)
                        doc[space] = other.to_dict()
                shap_rep, feat_rep = (primary, other) if config.cluster.input_space == "shap" else (other, primary)
                if shap_rep is not None:
                    doc["table"] = format_table(shap_rep, feat_rep)
                doc["roc_auc"] = primary.roc_auc
                _write_json(run.partial("evaluation.json"), doc)

            run.stage("evaluate", evaluate)
        else:
            manifest.notes.append("evaluate: skipped, no ground-truth labels with both normal and anomalous series")

        run.commit()
        _write_json(out_dir / "manifest.json", manifest.to_dict())
    return manifest


# plot tables ----------------------------------------------------------------


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DependencyError(f"missing artifact {path}")
    return path


def _quartile_rows(values: np.ndarray) -> list[str]:
    q = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return [len(values)] + [_num(v) for v in q]


def cmd_export_plots(run_dir: str | Path) -> list[Path]:
    """Write plot-ready CSV tables into ``<run_dir>/plots``.

    * ``score_quartiles.csv``: ``grouping,group,n,min,q25,median,q75,max`` of
      the anomaly score per true group, or per alarm flag when the run has no
      labels (``grouping`` says which).
    * ``shap_summary.csv``: per cluster and feature the attribution summary,
      columns ``cluster,rank,feature,mean,min,q25,median,q75,max``.
    * ``silhouette.csv``: ``k,silhouette``.
    * ``contingency.csv``: ``true_class,cluster,count`` (only with labels).
    * ``confusion_step1.csv`` / ``confusion_step2.csv``:
      ``true_class,predicted_class,count`` after cluster-to-class mapping
      (only with an evaluation).
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DependencyError(f"run directory {run_dir} not found")
    scores = read_scores(_require(run_dir / "scores.csv"))
    ids, clusters = read_clusters(_require(run_dir / "clusters.csv"))
    attribs = read_attributions(_require(run_dir / "shap.csv"), _require(run_dir / "shap.json"))
    silhouette = pd.read_csv(_require(run_dir / "silhouette.csv"))
    if tuple(scores["series_id"]) != ids or tuple(attribs.series_ids) != ids:
        raise SchemaError("scores, clusters and attributions list different series")

    plots = run_dir / PLOTS_DIR
    plots.mkdir(exist_ok=True)
    written = []

    s = scores["score"].to_numpy(dtype=float)
    if "group" in scores.columns:
        grouping, groups = "group", scores["group"].to_numpy(dtype=np.int64)
    else:
        grouping, groups = "alarm", scores["alarm"].to_numpy(dtype=np.int64)
    rows = [[grouping, int(g)] + _quartile_rows(s[groups == g]) for g in np.unique(groups)]
    p = plots / "score_quartiles.csv"
    _write_rows(p, ["grouping", "group", "n", "min", "q25", "median", "q75", "max"], rows)
    written.append(p)

    summary = group_shap_summary(attribs, clusters)
    rows = []
    for c, feats in summary.items():
        for f in feats:
            rows.append([f.cluster, f.rank, f.feature] + [_num(getattr(f, k)) for k in SUMMARY_FIELDS[3:]])
    p = plots / "shap_summary.csv"
    _write_rows(p, SUMMARY_FIELDS, rows)
    written.append(p)

    p = plots / "silhouette.csv"
    _write_rows(p, ["k", "silhouette"], ([int(k), _num(v)] for k, v in zip(silhouette["k"], silhouette["silhouette"])))
    written.append(p)

    if "group" in scores.columns:
        table = pd.crosstab(scores["group"].to_numpy(), clusters)
        rows = [[int(g), int(c), int(table.loc[g, c])] for g in table.index for c in table.columns]
        p = plots / "contingency.csv"
        _write_rows(p, ["true_class", "cluster", "count"], rows)
        written.append(p)

    ev_path = run_dir / "evaluation.json"
    if ev_path.is_file():
        doc = json.loads(ev_path.read_text(encoding="utf-8"))
        space = next(k for k in ("shap", "standardized_features") if k in doc)
        for step in ("step1", "step2"):
            cm = doc[space][step]["confusion"]
            cls = cm["classes"]
            rows = [[t, q, cm["counts"][i][j]] for i, t in enumerate(cls) for j, q in enumerate(cls)]
            p = plots / f"confusion_{step}.csv"
            _write_rows(p, ["true_class", "predicted_class", "count"], rows)
            written.append(p)
    return written


__all__ = [
    "ARTIFACTS",
    "RunManifest",
    "check_additivity",
    "cmd_export_plots",
    "cmd_pipeline",
    "load_source",
    "sha256_file",
]
