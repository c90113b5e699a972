"""CART classification tree on cluster labels, Gini importances and rules.

Splits send ``x <= threshold`` left. Thresholds are midpoints of
consecutive distinct values seen at the node. The best split minimises the
weighted Gini impurity of the children; ties go to the lower feature index,
then to the lower threshold, so the fitted tree does not depend on row order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, ValidationError
from .rng import substream

_EPS = 1e-12


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = 5
    min_samples_leaf: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ArgumentError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ArgumentError("min_samples_leaf must be >= 1")


@dataclass(frozen=True)
class DecisionTreeModel:
    """Node arrays in preorder; ``feature == -1`` marks a leaf.

    ``counts[i]`` holds the class counts of the training rows reaching node
    ``i`` in the order of ``classes``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    classes: np.ndarray
    n_features: int
    params: TreeParams

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def impurity(self) -> np.ndarray:
        return np.array([gini(c) for c in self.counts])

    @property
    def n_samples(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            r = np.flatnonzero(active)
            nd = node[r]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        leaf = self.apply(X)
        return self.classes[np.argmax(self.counts[leaf], axis=1)]

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
            "classes": self.classes.tolist(),
            "n_features": self.n_features,
            "params": {"max_depth": self.params.max_depth, "min_samples_leaf": self.params.min_samples_leaf, "seed": self.params.seed},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTreeModel":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            counts=np.asarray(d["counts"], dtype=np.int64).reshape(len(d["feature"]), -1),
            classes=np.asarray(d["classes"]),
            n_features=int(d["n_features"]),
            params=TreeParams(**d["params"]),
        )


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n <= 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def _midpoint(a: float, b: float) -> float:
    mid = a + (b - a) / 2.0
    # adjacent floats: the midpoint may round up onto b
    return mid if mid < b else a


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int):
    """Return ``(feature, threshold, weighted child impurity)`` or None."""
    n = len(y)
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[order]] = 1.0
        left = np.cumsum(onehot, axis=0)[:-1]
        total = left[-1] + onehot[-1]
        right = total - left
        n_left = np.arange(1, n, dtype=float)
        n_right = n - n_left
        valid = xs[1:] > xs[:-1]
        valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        g_left = 1.0 - np.sum(left * left, axis=1) / (n_left * n_left)
        g_right = 1.0 - np.sum(right * right, axis=1) / (n_right * n_right)
        weighted = (n_left * g_left + n_right * g_right) / n
        weighted[~valid] = np.inf
        i = int(np.argmin(weighted))
        if best is None or weighted[i] < best[2] - _EPS:
            best = (j, _midpoint(float(xs[i]), float(xs[i + 1])), float(weighted[i]))
    return best


def fit_tree(matrix, labels, params: TreeParams | None = None) -> DecisionTreeModel:
    """Greedy CART on weighted Gini impurity.

    Needs at least two classes. Growth stops at ``max_depth``,
    at pure nodes and when no split leaves ``min_samples_leaf`` rows on each
    side.
    """
    params = params or TreeParams()
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ArgumentError("matrix and labels disagree in length")
    if len(X) == 0:
        raise ArgumentError("no rows to fit")
    classes, y = np.unique(labels, return_inverse=True)
    k = len(classes)
    if k < 2:
        raise ArgumentError(f"need at least 2 classes, got {k}")
    limit = math.inf if params.max_depth is None else params.max_depth

    feature, threshold, left, right, counts = [], [], [], [], []

    def grow(rows: np.ndarray, d: int) -> int:
        node = len(feature)
        c = np.bincount(y[rows], minlength=k)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        impurity = gini(c)
        if d >= limit or impurity <= 0.0 or len(rows) < 2 * params.min_samples_leaf:
            return node
        split = _best_split(X[rows], y[rows], k, params.min_samples_leaf)
        # a zero-gain split is still taken on an impure node (parity patterns
        # such as XOR need it to reach purity further down)
        if split is None or split[2] > impurity + _EPS:
            return node
        j, t, _ = split
        mask = X[rows, j] <= t
        feature[node] = j
        threshold[node] = t
        left[node] = grow(rows[mask], d + 1)
        right[node] = grow(rows[~mask], d + 1)
        return node

    grow(np.arange(len(X)), 0)
    return DecisionTreeModel(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        counts=np.vstack(counts).astype(np.int64),
        classes=classes,
        n_features=X.shape[1],
        params=params,
    )


def gini_importances(model: DecisionTreeModel) -> np.ndarray:
    """Impurity decrease per feature, weighted by node share, normalised to 1.

    A single-leaf model gives all zeros.
    """
    out = np.zeros(model.n_features)
    n_total = model.counts[0].sum()
    imp = model.impurity
    n = model.n_samples
    for i in np.flatnonzero(model.feature >= 0):
        l, r = model.left[i], model.right[i]
        decrease = n[i] * imp[i] - n[l] * imp[l] - n[r] * imp[r]
        out[model.feature[i]] += decrease / n_total
    total = out.sum()
    return out / total if total > 0 else out


@dataclass(frozen=True)
class ImportanceReport:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    repetitions: np.ndarray
    single_run: np.ndarray

    def rows(self) -> list[tuple[str, float, float]]:
        return [(n, float(m), float(s)) for n, m, s in zip(self.feature_names, self.mean, self.sd)]


def _subsample(y: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    classes = np.unique(y)
    take = {c: int(math.floor(fraction * np.sum(y == c) + 0.5)) for c in classes}
    if all(v >= 1 for v in take.values()):
        picks = [rng.choice(np.flatnonzero(y == c), size=take[c], replace=False) for c in classes]
        return np.sort(np.concatenate(picks))
    # some class is too small to stratify; plain draw of the overall share
    k = max(1, int(math.floor(fraction * len(y) + 0.5)))
    return np.sort(rng.choice(len(y), size=k, replace=False))


def repeated_importances(
    matrix,
    labels,
    R: int = 100,
    subsample_fraction: float = 0.8,
    params: TreeParams | None = None,
    feature_names: Sequence[str] | None = None,
    max_retries: int = 20,
    n_jobs: int = 1,
) -> ImportanceReport:
    """Fit ``R`` trees on class-stratified subsamples and summarise importances.

    Repetition ``r`` draws from ``substream(seed, "tree", r, attempt)``; a draw
    that loses a class is repeated up to ``max_retries`` times.
    """
    params = params or TreeParams()
    if R < 1:
        raise ArgumentError("R must be >= 1")
    if not 0 < subsample_fraction <= 1:
        raise ArgumentError(f"subsample_fraction must be in (0, 1], got {subsample_fraction}")
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    y = np.asarray(labels)
    names = tuple(feature_names if feature_names is not None else getattr(matrix, "feature_names", range(X.shape[1])))
    names = tuple(str(n) for n in names)
    n_classes = len(np.unique(y))

    def one(r: int) -> np.ndarray:
        for attempt in range(max_retries + 1):
            rows = _subsample(y, subsample_fraction, substream(params.seed, "tree", r, attempt))
            if len(np.unique(y[rows])) == n_classes:
                return gini_importances(fit_tree(X[rows], y[rows], params))
        raise ValidationError(f"repetition {r}: a class was absent from every one of {max_retries + 1} subsamples")

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reps = list(pool.map(one, range(R)))
    else:
        reps = [one(r) for r in range(R)]
    reps = np.vstack(reps)
    single = gini_importances(fit_tree(X, y, params))
    return ImportanceReport(names, reps.mean(axis=0), reps.std(axis=0), reps, single)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _leaf_text(model: DecisionTreeModel, i: int) -> str:
    c = model.counts[i]
    label = model.classes[int(np.argmax(c))]
    dist = ", ".join(f"{cls}: {int(n)}" for cls, n in zip(model.classes, c))
    return f"class {label} [{dist}]"


def render_rules(model: DecisionTreeModel, feature_names: Sequence[str] | None = None, indent: str = "  ") -> str:
    """Indented ``if name <= t`` / ``else`` rules with leaf class counts."""
    lines: list[str] = []

    def name(j: int) -> str:
        return str(feature_names[j]) if feature_names is not None else f"x[{j}]"

    def walk(i: int, level: int) -> None:
        pad = indent * level
        if model.feature[i] < 0:
            lines.append(pad + _leaf_text(model, i))
            return
        f, t = name(int(model.feature[i])), _fmt(float(model.threshold[i]))
        lines.append(f"{pad}if {f} <= {t}:")
        walk(int(model.left[i]), level + 1)
        lines.append(f"{pad}else:  # {f} > {t}")
        walk(int(model.right[i]), level + 1)

    walk(0, 0)
    return "\n".join(lines) + "\n"
