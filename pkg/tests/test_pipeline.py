import json
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from funcad.config import load_config, parse_config
from funcad.dataset import write_csv, write_labels
from funcad.datagen import generate
from funcad.errors import DependencyError, LockError, StageError
from funcad.pipeline import ARTIFACTS, LOCK_NAME, cmd_export_plots, cmd_pipeline, sha256_file

GOLDEN = Path(__file__).parent / "golden"
SMALL_GENERATOR = {"n_normal": 40, "T": 400, "anomaly_plan": [[1, 3], [2, 3], [3, 3], [4, 3]]}


def small_config(seed=1, **data):
    raw = {
        "seed": seed,
        "data": {"dataset": 2, "generator": SMALL_GENERATOR} if not data else data,
        "features": {"preset": "dataset2"},
        "forest": {"n_trees": 20, "subsample": 32, "threshold_quantile": 0.8},
        "cluster": {"k_max": 6},
        "tree": {"repetitions": 5},
    }
    return parse_config(raw)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, cmd_pipeline(small_config(), out)


def test_writes_the_nine_artifacts(small_run):
    out, manifest = small_run
    assert sorted(manifest.hashes()) == sorted(ARTIFACTS)
    for name, digest in manifest.hashes().items():
        assert sha256_file(out / name) == digest
    assert not list(out.glob("*.partial"))
    assert not (out / LOCK_NAME).exists()
    doc = json.loads((out / "manifest.json").read_text())
    assert [s["name"] for s in doc["stages"]] == ["data", "featurize", "detect", "shap", "cluster", "tree", "evaluate"]
    assert doc["config"] == json.loads(json.dumps(small_config().to_dict()))


def test_additivity_and_score_file(small_run):
    out, _ = small_run
    scores = pd.read_csv(out / "scores.csv")
    shap = pd.read_csv(out / "shap.csv").set_index("series_id")
    base = json.loads((out / "shap.json").read_text())["base_value"]
    total = base + shap.sum(axis=1).to_numpy()
    np.testing.assert_allclose(total, scores["path_length"], atol=1e-6)
    assert list(scores.columns) == ["series_id", "group", "train", "path_length", "score", "alarm"]
    assert scores["train"].sum() == round(0.7 * len(scores))


def test_hashes_do_not_depend_on_threads(small_run, tmp_path):
    _, first = small_run
    again = cmd_pipeline(small_config().with_overrides(n_jobs=3), tmp_path / "b")
    assert again.hashes() == first.hashes()
    other_seed = cmd_pipeline(small_config(seed=2), tmp_path / "c")
    assert other_seed.hashes()["features.csv"] != first.hashes()["features.csv"]


def test_lock_blocks_a_second_run(tmp_path):
    (tmp_path / LOCK_NAME).write_text("123\n")
    with pytest.raises(LockError):
        cmd_pipeline(small_config(), tmp_path)
    assert (tmp_path / LOCK_NAME).exists()


def test_failed_stage_releases_lock_without_manifest(tmp_path):
    # series of length 4 are too short for the lag-4 PACF
    ds = generate(2, seed=0, n_normal=5, T=400, anomaly_plan=[[1, 1]])
    short = ds.__class__(tuple(s.__class__(s.id, s.values[:4], s.channel_names) for s in ds.series))
    write_csv(short, tmp_path / "short.csv")
    with pytest.raises(StageError) as info:
        cmd_pipeline(small_config(source="csv", path=str(tmp_path / "short.csv")), tmp_path / "out")
    assert info.value.stage == "featurize"
    assert not (tmp_path / "out" / LOCK_NAME).exists()
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_csv_without_labels_skips_evaluation(tmp_path):
    ds = generate(2, seed=3, **{k: v for k, v in SMALL_GENERATOR.items()})
    write_csv(ds, tmp_path / "data.csv")
    manifest = cmd_pipeline(small_config(source="csv", path=str(tmp_path / "data.csv")), tmp_path / "out")
    assert "evaluation.json" not in manifest.hashes()
    assert any(n.startswith("evaluate: skipped") for n in manifest.notes)
    written = {p.name for p in cmd_export_plots(tmp_path / "out")}
    assert written == {"score_quartiles.csv", "shap_summary.csv", "silhouette.csv"}
    quart = pd.read_csv(tmp_path / "out" / "plots" / "score_quartiles.csv")
    assert set(quart["grouping"]) == {"alarm"}
    assert quart["n"].sum() == 52


def test_csv_with_labels_matches_generated_run(tmp_path, small_run):
    ds = generate(2, seed=1, **SMALL_GENERATOR)
    write_csv(ds, tmp_path / "data.csv")
    write_labels([s.id for s in ds.series], ds.labels, tmp_path / "labels.csv")
    cfg = small_config(source="csv", path=str(tmp_path / "data.csv"), labels=str(tmp_path / "labels.csv"))
    manifest = cmd_pipeline(cfg, tmp_path / "out")
    _, generated = small_run
    for name in ("features.csv", "scores.csv", "shap.csv", "clusters.csv"):
        assert manifest.hashes()[name] == generated.hashes()[name]


@pytest.mark.parametrize("name", ["score_quartiles.csv", "silhouette.csv", "contingency.csv", "confusion_step1.csv"])
def test_export_plots_golden(small_run, name):
    out, _ = small_run
    cmd_export_plots(out)
    assert (out / "plots" / name).read_text() == (GOLDEN / f"plots_{name}").read_text()


def test_export_plots_tables(small_run):
    out, _ = small_run
    cmd_export_plots(out)
    summary = pd.read_csv(out / "plots" / "shap_summary.csv")
    n_clusters = pd.read_csv(out / "clusters.csv")["cluster"].nunique()
    assert len(summary) == n_clusters * 13
    assert set(summary["rank"]) == set(range(1, 14))
    with pytest.raises(DependencyError):
        cmd_export_plots(out / "missing")


def test_presets_meet_the_runtime_budget(tmp_path):
    manifest = cmd_pipeline(load_config("dataset1"), tmp_path / "d1")
    seconds = sum(s["seconds"] for s in manifest.stages)
    assert seconds < 30
    assert os.path.exists(tmp_path / "d1" / "evaluation.json")
