"""Exact Shapley attributions of an Isolation Forest.

The explained output is the mean path length ``E[h(x)]`` over trees, not
the exponentiated score. Attributions are additive::

    base_value + phi[i].sum() == model.mean_path_length(x_i)

and negative values push an observation towards "anomalous" (shorter
paths). The value of a coalition ``S`` in one tree is the path-dependent
conditional expectation: splits on features in ``S`` follow ``x``, splits
on other features average both children weighted by the training rows
that reached them.

Two exact routes are offered:

``method="enumerate"``
    For every tree, enumerate all subsets of the features the tree uses
    and apply the Shapley formula directly. Cost grows as ``2**u`` with
    ``u`` used features, so ``u`` is capped by ``max_features``.
``method="paths"`` (default)
    Write the tree value as a sum over external nodes of products of
    per-feature factors and solve each product game in closed form from
    its polynomial coefficients. Same numbers, polynomial cost.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ArgumentError, CapacityError, SchemaError
from .features import FeatureMatrix
from .iforest import ForestModel, IsolationTree

EXPLAINED_OUTPUT = "mean_path_length"
DEFAULT_MAX_FEATURES = 20


@dataclass(frozen=True)
class AttributionMatrix:
    phi: np.ndarray
    base_value: float
    feature_names: tuple[str, ...]
    series_ids: tuple[str, ...]
    explained_output: str = EXPLAINED_OUTPUT

    @property
    def output(self) -> np.ndarray:
        """Model output reconstructed from the attributions."""
        return self.base_value + self.phi.sum(axis=1)

    def as_matrix(self) -> FeatureMatrix:
        return FeatureMatrix(self.phi, self.feature_names, self.series_ids)

    def rows(self, index) -> "AttributionMatrix":
        index = np.asarray(index, dtype=int)
        return AttributionMatrix(
            self.phi[index], self.base_value, self.feature_names,
            tuple(self.series_ids[i] for i in index), self.explained_output,
        )


def tree_conditional_expectation(tree: IsolationTree, x: np.ndarray, S) -> float:
    """Expected path length of ``x`` in ``tree`` when only features in ``S`` are known."""
    known = set(int(j) for j in S)

    def walk(node: int) -> float:
        j = tree.feature[node]
        if j < 0:
            return float(tree.leaf_value[node])
        l, r = tree.left[node], tree.right[node]
        if j in known:
            return walk(l) if x[j] < tree.threshold[node] else walk(r)
        return (tree.size[l] * walk(l) + tree.size[r] * walk(r)) / tree.size[node]

    return walk(0)


def _conditional_expectation_rows(tree: IsolationTree, X: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Vectorised conditional expectation for all rows of ``X``; ``known``
    is a boolean mask over features."""

    def walk(node: int) -> np.ndarray:
        j = tree.feature[node]
        if j < 0:
            return np.full(len(X), float(tree.leaf_value[node]))
        l, r = tree.left[node], tree.right[node]
        if known[j]:
            return np.where(X[:, j] < tree.threshold[node], walk(l), walk(r))
        return (tree.size[l] * walk(l) + tree.size[r] * walk(r)) / tree.size[node]

    return walk(0)


def tree_base_value(tree: IsolationTree) -> float:
    leaves = np.flatnonzero(tree.is_leaf)
    return float(np.sum(tree.leaf_value[leaves] * tree.size[leaves]) / tree.size[0])


def shapley_weights(d: int) -> np.ndarray:
    """``w[k] = k! (d-k-1)! / d!`` for coalitions of size ``k`` out of ``d`` players."""
    return np.array([math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d) for k in range(d)])


def _tree_shap_enumerate(tree: IsolationTree, X: np.ndarray, p: int, max_features: int) -> np.ndarray:
    used = tree.used_features()
    u = len(used)
    phi = np.zeros((len(X), p))
    if u == 0:
        return phi
    if u > max_features:
        raise CapacityError(
            f"tree uses {u} features, above the enumeration cap of {max_features}; "
            "lower max_depth/subsample or use method='paths'"
        )
    values = np.empty((1 << u, len(X)))
    known = np.zeros(p, dtype=bool)
    for mask in range(1 << u):
        known[:] = False
        for b, j in enumerate(used):
            if mask >> b & 1:
                known[j] = True
        values[mask] = _conditional_expectation_rows(tree, X, known)
    w = shapley_weights(u)
    sizes = np.array([bin(m).count("1") for m in range(1 << u)])
    for b, j in enumerate(used):
        bit = 1 << b
        without = np.array([m for m in range(1 << u) if not m & bit])
        coeff = w[sizes[without]]
        phi[:, j] = coeff @ (values[without | bit] - values[without])
    return phi


@dataclass(frozen=True)
class _LeafGames:
    """Per-tree decomposition into leaf product games.

    For leaf ``l`` and slot ``s`` (one distinct feature on the root-to-leaf
    path) the factor is ``a`` if the feature is known and ``b`` otherwise,
    where ``b`` is the product of training fractions along the path on that
    feature and ``a`` flags that ``x`` follows every split on it.
    """

    slot_feature: np.ndarray  # (L, D), -1 for padding
    b: np.ndarray  # (L, D), 1 for padding
    value: np.ndarray  # (L,)
    n_players: np.ndarray  # (L,)
    step_node: np.ndarray  # internal node of each path step
    step_left: np.ndarray  # direction taken at that step
    step_column: np.ndarray  # flat (l * D + s) column of that step


def _leaf_games(tree: IsolationTree) -> _LeafGames:
    leaves, slots, bs, steps = [], [], [], []

    def walk(node, path):
        j = tree.feature[node]
        if j < 0:
            feats, fracs = [], []
            for (f, _, _, frac) in path:
                if f in feats:
                    fracs[feats.index(f)] *= frac
                else:
                    feats.append(f)
                    fracs.append(frac)
            l_index = len(leaves)
            leaves.append(node)
            slots.append(feats)
            bs.append(fracs)
            for (f, nd, go_left, _) in path:
                steps.append((nd, go_left, l_index, feats.index(f)))
            return
        n = tree.size[node]
        l, r = tree.left[node], tree.right[node]
        walk(l, path + [(int(j), node, True, tree.size[l] / n)])
        walk(r, path + [(int(j), node, False, tree.size[r] / n)])

    walk(0, [])
    L = len(leaves)
    D = max((len(s) for s in slots), default=0)
    slot_feature = np.full((L, D), -1, dtype=np.int64)
    b = np.ones((L, D))
    for i, (s, f) in enumerate(zip(slots, bs)):
        slot_feature[i, : len(s)] = s
        b[i, : len(f)] = f
    steps_arr = np.array(steps, dtype=np.int64).reshape(-1, 4)
    leaves_arr = np.asarray(leaves, dtype=np.int64)
    return _LeafGames(
        slot_feature=slot_feature,
        b=b,
        value=tree.leaf_value[leaves_arr].astype(float),
        n_players=np.array([len(s) for s in slots], dtype=np.int64),
        step_node=steps_arr[:, 0],
        step_left=steps_arr[:, 1].astype(bool),
        step_column=steps_arr[:, 2] * D + steps_arr[:, 3],
    )


def _tree_shap_paths(tree: IsolationTree, X: np.ndarray, p: int) -> np.ndarray:
    n = len(X)
    phi = np.zeros((n, p))
    games = _leaf_games(tree)
    L, D = games.slot_feature.shape
    if D == 0:
        return phi

    # a[:, l, s]: row satisfies every split on slot s's feature along leaf l's path
    followed = (X[:, tree.feature[games.step_node]] < tree.threshold[games.step_node]) == games.step_left
    order = np.argsort(games.step_column, kind="stable")
    cols = games.step_column[order]
    starts = np.flatnonzero(np.r_[True, cols[1:] != cols[:-1]])
    fails = np.add.reduceat((~followed[:, order]).astype(np.int64), starts, axis=1)
    a = np.ones((n, L * D))
    a[:, cols[starts]] = (fails == 0).astype(float)
    a = a.reshape(n, L, D)
    pad = games.slot_feature < 0
    a[:, pad] = 0.0

    b = games.b
    # Q(z) = prod_s (b_s + a_s z); coefficient index on the first axis
    Q = np.zeros((D + 1, n, L))
    Q[0] = 1.0
    for s in range(D):
        a_s, b_s = a[..., s], b[None, :, s]
        Q[1:] = b_s * Q[1:] + a_s * Q[:-1]
        Q[0] *= b_s

    W = np.zeros((D + 1, D))
    for d in range(1, D + 1):
        W[d, :d] = shapley_weights(d)
    Wl = W[games.n_players].T  # (D, L): weight of coalition size k in leaf l

    # sum_k Q_k w_k, reused for every player whose factor is the constant b_s
    QW = np.einsum("knl,kl->nl", Q[:D], Wl)
    contrib = np.zeros((n, L, D))
    for s in range(D):
        b_s = b[None, :, s]
        a_s = a[..., s]
        # a_s = 1: divide Q by (b_s + z) from the top coefficient down
        pk = Q[D]
        acc = pk * Wl[D - 1]
        for k in range(D - 1, 0, -1):
            pk = Q[k] - b_s * pk
            acc += pk * Wl[k - 1]
        weighted = np.where(a_s > 0, acc, QW / b_s)
        contrib[..., s] = games.value[None, :] * (a_s - b_s) * weighted
    contrib[:, pad] = 0.0

    flat = contrib.reshape(n, L * D)
    feat = games.slot_feature.reshape(-1)
    keep = np.flatnonzero(feat >= 0)
    order = keep[np.argsort(feat[keep], kind="stable")]
    fsorted = feat[order]
    starts = np.flatnonzero(np.r_[True, fsorted[1:] != fsorted[:-1]])
    phi[:, fsorted[starts]] = np.add.reduceat(flat[:, order], starts, axis=1)
    return phi


def tree_shap(tree: IsolationTree, X: np.ndarray, method: str = "paths", max_features: int = DEFAULT_MAX_FEATURES) -> np.ndarray:
    """Attributions of one tree's path length for every row of ``X``."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if method == "paths":
        return _tree_shap_paths(tree, X, p)
    if method == "enumerate":
        return _tree_shap_enumerate(tree, X, p, max_features)
    raise ArgumentError(f"unknown method {method!r}; expected 'paths' or 'enumerate'")


def shapley_exact(
    model: ForestModel,
    matrix: FeatureMatrix,
    method: str = "paths",
    max_features: int = DEFAULT_MAX_FEATURES,
    n_jobs: int = 1,
) -> AttributionMatrix:
    """Exact Shapley values of ``E[h(x)]`` for every row of ``matrix``.

    Per-tree attributions are summed in tree order and divided by the tree
    count, so the result does not depend on ``n_jobs``.
    """
    model.check_names(matrix)
    X = matrix.values

    def one(tree):
        return tree_shap(tree, X, method, max_features)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(one, model.trees))
    else:
        parts = [one(t) for t in model.trees]
    phi = np.zeros_like(X)
    for part in parts:
        phi += part
    phi /= model.n_trees
    base = float(np.mean([tree_base_value(t) for t in model.trees]))
    return AttributionMatrix(phi, base, tuple(matrix.feature_names), tuple(matrix.series_ids))


@dataclass(frozen=True)
class FeatureSummary:
    cluster: int
    rank: int
    feature: str
    mean: float
    min: float
    q25: float
    median: float
    q75: float
    max: float


SUMMARY_FIELDS = ("cluster", "rank", "feature", "mean", "min", "q25", "median", "q75", "max")


def group_shap_summary(
    attribs: AttributionMatrix,
    labels: Sequence[int],
    clusters: Sequence[int] | None = None,
) -> dict[int, list[FeatureSummary]]:
    """Per cluster, the distribution of each feature's attributions,
    ranked by ``|mean|`` (descending, ties by feature name).

    ``clusters`` lists the expected cluster ids; ids without any row are
    dropped with a warning.
    """
    labels = np.asarray(labels)
    if len(labels) != attribs.phi.shape[0]:
        raise ArgumentError(f"{len(labels)} labels for {attribs.phi.shape[0]} rows")
    ids = sorted(set(labels.tolist())) if clusters is None else list(clusters)
    out = {}
    for c in ids:
        rows = attribs.phi[labels == c]
        if rows.shape[0] == 0:
            warnings.warn(f"cluster {c} is empty; excluded from the summary", stacklevel=2)
            continue
        mean = rows.mean(axis=0)
        q = np.quantile(rows, [0.0, 0.25, 0.5, 0.75, 1.0], axis=0)
        order = sorted(range(len(mean)), key=lambda j: (-abs(mean[j]), attribs.feature_names[j]))
        out[int(c)] = [
            FeatureSummary(int(c), r + 1, attribs.feature_names[j], float(mean[j]), *map(float, q[:, j]))
            for r, j in enumerate(order)
        ]
    return out


def write_attributions(attribs: AttributionMatrix, path: str | Path, sidecar: str | Path | None = None) -> Path:
    """Write ``series_id,<features>`` and a one-line JSON sidecar
    (``<path>.json`` with the ``.csv`` suffix replaced by default)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", *attribs.feature_names])
        for sid, row in zip(attribs.series_ids, attribs.phi.tolist()):
            writer.writerow([sid, *map(repr, row)])
    sidecar = Path(sidecar) if sidecar is not None else path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"base_value": attribs.base_value, "explained_output": attribs.explained_output}) + "\n",
        encoding="utf-8",
    )
    return sidecar


def read_attributions(path: str | Path, sidecar: str | Path | None = None) -> AttributionMatrix:
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    df = pd.read_csv(path, dtype={"series_id": str}, float_precision="round_trip")
    if df.columns[0] != "series_id":
        raise SchemaError(f"{path}: first column must be 'series_id'")
    names = tuple(df.columns[1:])
    return AttributionMatrix(
        df[list(names)].to_numpy(dtype=float),
        float(meta["base_value"]),
        names,
        tuple(df["series_id"]),
        meta.get("explained_output", EXPLAINED_OUTPUT),
    )
