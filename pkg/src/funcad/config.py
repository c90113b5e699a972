"""Pipeline configuration read from TOML files and shipped presets.

A config names its data source, the feature catalogue (inline or another
preset's), and the parameters of every stage. ``seed`` is mandatory so that
no run depends on hidden state. Relative paths resolve against the config
file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cluster import INPUT_SPACES
from .errors import DependencyError, SchemaError
from .evaluation import DEFAULT_BETAS, MAPPING_RULES
from .features import FeatureSpec
from .shapley import DEFAULT_MAX_FEATURES

PRESETS = ("dataset1", "dataset2")


@dataclass(frozen=True)
class DataConfig:
    source: str = "generated"
    dataset: int | None = None
    path: str | None = None
    labels: str | None = None
    id_column: str = "series_id"
    time_column: str = "t"
    generator: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        if self.source == "generated":
            if self.dataset not in (1, 2):
                raise SchemaError("generated data needs dataset = 1 or 2")
        elif self.source == "csv":
            if not self.path:
                raise SchemaError("csv data needs a path")
        else:
            raise SchemaError(f"unknown data source {self.source!r}")


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    subsample: int = 256
    max_depth: int | None = None
    train_fraction: float = 0.7
    threshold_quantile: float = 0.9


@dataclass(frozen=True)
class ShapConfig:
    enabled: bool = True
    method: str = "paths"
    max_features: int = DEFAULT_MAX_FEATURES


@dataclass(frozen=True)
class ClusterConfig:
    algorithm: str = "kmeans"
    input_space: str = "shap"
    k: int | None = None
    k_min: int = 2
    k_max: int = 12
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6

    def __post_init__(self):
        if self.algorithm not in ("kmeans", "kmedoids"):
            raise SchemaError(f"unknown clustering algorithm {self.algorithm!r}")
        if self.input_space not in INPUT_SPACES:
            raise SchemaError(f"input_space must be one of {INPUT_SPACES}")
        if self.k is None and not 2 <= self.k_min <= self.k_max:
            raise SchemaError(f"bad k range {self.k_min}..{self.k_max}")


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int | None = 5
    min_samples_leaf: int = 2
    repetitions: int = 100
    subsample_fraction: float = 0.8
    input_space: str = "shap"


@dataclass(frozen=True)
class EvalConfig:
    betas: tuple[float, ...] = DEFAULT_BETAS
    mapping: str = "hungarian"
    # also cluster standardised features for the C3/C4 columns
    compare_features: bool = True

    def __post_init__(self):
        if self.mapping not in MAPPING_RULES:
            raise SchemaError(f"mapping must be one of {MAPPING_RULES}")
        if not self.betas or any(not b > 0 for b in self.betas):
            raise SchemaError("betas must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    data: DataConfig
    features: FeatureSpec
    forest: ForestConfig = ForestConfig()
    shap: ShapConfig = ShapConfig()
    cluster: ClusterConfig = ClusterConfig()
    tree: TreeConfig = TreeConfig()
    evaluate: EvalConfig = EvalConfig()
    out: str | None = None
    n_jobs: int = 1
    preset: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.shap.enabled and "shap" in (self.cluster.input_space, self.tree.input_space):
            raise SchemaError("attributions are disabled but clustering or the tree uses them")
        if self.n_jobs < 1:
            raise SchemaError("n_jobs must be >= 1")

    def with_overrides(self, seed: int | None = None, out: str | None = None, n_jobs: int | None = None) -> "PipelineConfig":
        return replace(
            self,
            seed=self.seed if seed is None else int(seed),
            out=self.out if out is None else str(out),
            n_jobs=self.n_jobs if n_jobs is None else int(n_jobs),
        )

    def to_dict(self) -> dict:
        """Snapshot for the manifest; excludes ``out`` and ``n_jobs``, which
        do not change results."""
        data = asdict(self.data)
        data["generator"] = dict(self.data.generator)
        return {
            "seed": self.seed,
            "data": data,
            "features": self.features.to_mapping(),
            "forest": asdict(self.forest),
            "shap": asdict(self.shap),
            "cluster": asdict(self.cluster),
            "tree": asdict(self.tree),
            "evaluate": {**asdict(self.evaluate), "betas": list(self.evaluate.betas)},
        }


def preset_path(name: str):
    if name not in PRESETS:
        raise DependencyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("funcad") / "presets" / f"{name}.preset"


def _read_toml(source) -> dict:
    try:
        return tomllib.loads(source.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{source}: {exc}") from None


def _section(raw: Mapping, name: str, cls, drop=()):
    table = dict(raw.get(name, {}))
    for key in drop:
        table.pop(key, None)
    try:
        return cls(**table)
    except TypeError as exc:
        raise SchemaError(f"[{name}]: {exc}") from None


def _resolve(base: Path | None, value: str | None) -> str | None:
    if value is None or base is None:
        return value
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def parse_config(raw: Mapping, base_dir: Path | None = None, preset: str | None = None) -> PipelineConfig:
    if "seed" not in raw:
        raise SchemaError("config needs an explicit seed")
    features = raw.get("features")
    if features is None:
        raise SchemaError("config needs a [features] table")
    if "preset" in features and "channels" not in features:
        features = _read_toml(preset_path(features["preset"]))["features"]
    data_raw = dict(raw.get("data", {}))
    generator = tuple(sorted(dict(data_raw.pop("generator", {})).items()))
    generator = tuple((k, tuple(map(tuple, v)) if isinstance(v, list) else v) for k, v in generator)
    try:
        data = DataConfig(**data_raw, generator=generator)
    except TypeError as exc:
        raise SchemaError(f"[data]: {exc}") from None
    data = replace(data, path=_resolve(base_dir, data.path), labels=_resolve(base_dir, data.labels))
    cluster_raw = dict(raw.get("cluster", {}))
    if cluster_raw.get("k") in ("auto", None):
        cluster_raw["k"] = None
    ev = dict(raw.get("evaluate", {}))
    if "betas" in ev:
        ev["betas"] = tuple(float(b) for b in ev["betas"])
    try:
        return PipelineConfig(
            seed=int(raw["seed"]),
            data=data,
            features=FeatureSpec.from_mapping(features),
            forest=_section(raw, "forest", ForestConfig),
            shap=_section(raw, "shap", ShapConfig),
            cluster=ClusterConfig(**cluster_raw),
            tree=_section(raw, "tree", TreeConfig),
            evaluate=EvalConfig(**ev),
            out=_resolve(base_dir, raw.get("out")),
            n_jobs=int(raw.get("n_jobs", 1)),
            preset=preset,
        )
    except TypeError as exc:
        raise SchemaError(f"config: {exc}") from None


def load_config(name_or_path: str | Path) -> PipelineConfig:
    """Load a shipped preset by name or a TOML file by path."""
    key = str(name_or_path)
    if key in PRESETS:
        return parse_config(_read_toml(preset_path(key)), None, key)
    path = Path(name_or_path)
    if not path.is_file():
        raise DependencyError(f"config file {path} not found")
    return parse_config(_read_toml(path), path.parent.resolve())
