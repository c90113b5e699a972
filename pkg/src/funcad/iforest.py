"""Isolation Forest on feature vectors.

Each tree is grown on a subsample of ``psi`` training rows drawn without
replacement. At every node a feature is picked uniformly among those that
are not constant on the node's slice and a split value is drawn uniformly
on the open interval ``(min, max)``; rows with ``x < value`` go left.
Growth stops at ``max_depth``, at singletons and at all-duplicate slices.

The path length of ``x`` in one tree is the number of edges to the
terminating external node plus ``c(size)``, the expected path length of an
unsuccessful search in a binary search tree built on ``size`` points.
The anomaly score is ``s(x) = 2 ** (-E[h(x)] / c(psi))``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError, SchemaError
from .features import FeatureMatrix
from .rng import substream

EULER_GAMMA = 0.5772156649
FORMAT = "funcad-isolation-forest"


def average_path_length(k):
    """``c(k) = 2 H(k-1) - 2 (k-1)/k`` with ``H(i) = ln(i) + gamma``; ``c(k<=1) = 0``."""
    k_arr = np.asarray(k, dtype=float)
    safe = np.where(k_arr > 1, k_arr, 2.0)
    c = 2.0 * (np.log(safe - 1.0) + EULER_GAMMA) - 2.0 * (safe - 1.0) / safe
    out = np.where(k_arr > 1, c, 0.0)
    return float(out) if np.ndim(k) == 0 else out


@dataclass(frozen=True)
class IsolationTree:
    """Node arrays in depth-first preorder; ``feature == -1`` marks an
    external node. ``size`` is the number of subsample rows reaching each
    node (used by the Shapley computations)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    psi: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def leaf_value(self) -> np.ndarray:
        """``depth + c(size)`` per node (meaningful on external nodes)."""
        return self.depth + average_path_length(self.size)

    def used_features(self) -> list[int]:
        return sorted(set(self.feature[self.feature >= 0].tolist()))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the external node reached by each row."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, self.feature[nd]] < self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def path_length(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "size": self.size.tolist(),
            "depth": self.depth.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, psi: int) -> "IsolationTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            size=np.asarray(d["size"], dtype=np.int64),
            depth=np.asarray(d["depth"], dtype=np.int64),
            psi=int(psi),
        )


def _splittable(col_min: np.ndarray, col_max: np.ndarray) -> np.ndarray:
    # there must be a representable float strictly between min and max
    return np.nextafter(col_min, np.inf) < col_max


def build_tree(X: np.ndarray, max_depth: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def grow(rows: np.ndarray, d: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(len(rows))
        depth.append(d)
        if d >= max_depth or len(rows) <= 1:
            return node
        block = X[rows]
        lo, hi = block.min(axis=0), block.max(axis=0)
        candidates = np.flatnonzero(_splittable(lo, hi))
        if candidates.size == 0:
            return node
        j = int(candidates[rng.integers(candidates.size)])
        value = rng.uniform(lo[j], hi[j])
        while not lo[j] < value < hi[j]:
            value = rng.uniform(lo[j], hi[j])
        mask = block[:, j] < value
        feature[node] = j
        threshold[node] = float(value)
        left[node] = grow(rows[mask], d + 1)
        right[node] = grow(rows[~mask], d + 1)
        return node

    grow(np.arange(len(X)), 0)
    return IsolationTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        size=np.asarray(size, dtype=np.int64),
        depth=np.asarray(depth, dtype=np.int64),
        psi=len(X),
    )


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    subsample: int = 256
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ArgumentError("n_trees must be >= 1")
        if self.subsample < 2:
            raise ArgumentError("subsample must be >= 2")
        if self.max_depth is not None and self.max_depth < 0:
            raise ArgumentError("max_depth must be >= 0")


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[IsolationTree, ...]
    psi: int
    max_depth: int
    feature_names: tuple[str, ...]
    seed: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def c_psi(self) -> float:
        return average_path_length(self.psi)

    def check_names(self, matrix: FeatureMatrix) -> None:
        if tuple(matrix.feature_names) != self.feature_names:
            raise SchemaError(
                f"feature names {list(matrix.feature_names)} do not match model {list(self.feature_names)}"
            )

    def mean_path_length(self, X: np.ndarray) -> np.ndarray:
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.path_length(X)
        return total / self.n_trees

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": 1,
            "psi": self.psi,
            "max_depth": self.max_depth,
            "c_psi": self.c_psi,
            "seed": self.seed,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != FORMAT:
            raise SchemaError(f"not a {FORMAT} document")
        psi = int(d["psi"])
        return cls(
            trees=tuple(IsolationTree.from_dict(t, psi) for t in d["trees"]),
            psi=psi,
            max_depth=int(d["max_depth"]),
            feature_names=tuple(d["feature_names"]),
            seed=int(d["seed"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit(matrix: FeatureMatrix, params: ForestParams | None = None, n_jobs: int = 1) -> ForestModel:
    """Grow ``params.n_trees`` isolation trees on the rows of ``matrix``.

    Tree ``k`` uses its own substream ``(seed, "forest", k)``, so the model
    does not depend on ``n_jobs``.
    """
    params = params or ForestParams()
    X = matrix.values
    n = X.shape[0]
    if n < 2:
        raise ArgumentError(f"need at least 2 rows to fit, got {n}")
    psi = min(params.subsample, n)
    max_depth = params.max_depth if params.max_depth is not None else math.ceil(math.log2(psi))

    def one(k: int) -> IsolationTree:
        rng = substream(params.seed, "forest", k)
        rows = rng.choice(n, size=psi, replace=False)
        return build_tree(X[rows], max_depth, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = tuple(pool.map(one, range(params.n_trees)))
    else:
        trees = tuple(one(k) for k in range(params.n_trees))
    return ForestModel(trees, psi, max_depth, tuple(matrix.feature_names), params.seed)


@dataclass(frozen=True)
class ScoreVector:
    series_ids: tuple[str, ...]
    path_length: np.ndarray
    score: np.ndarray


def score(model: ForestModel, matrix: FeatureMatrix) -> ScoreVector:
    model.check_names(matrix)
    h = model.mean_path_length(matrix.values)
    return ScoreVector(tuple(matrix.series_ids), h, anomaly_score(h, model.psi))


def anomaly_score(mean_path_length, psi: int) -> np.ndarray:
    return np.power(2.0, -np.asarray(mean_path_length, dtype=float) / average_path_length(psi))


@dataclass(frozen=True)
class Threshold:
    quantile: float
    cutoff: float
    alarms: np.ndarray


def threshold(scores: ScoreVector | Sequence[float], quantile: float) -> Threshold:
    """Alarm where the score is strictly above its empirical ``quantile``."""
    s = scores.score if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ArgumentError("no scores")
    if not 0 < quantile < 1:
        raise ArgumentError(f"quantile must be in (0, 1), got {quantile}")
    cutoff = float(np.quantile(s, quantile))
    return Threshold(quantile, cutoff, s > cutoff)


def train_test_split(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(train, all)`` indices; ``train`` is sorted."""
    if not 0 < train_fraction <= 1:
        raise ArgumentError(f"train_fraction must be in (0, 1], got {train_fraction}")
    k = int(math.floor(train_fraction * n + 0.5))
    k = min(max(k, 1), n)
    rng = substream(seed, "split")
    train = np.sort(rng.choice(n, size=k, replace=False))
    return train, np.arange(n)
