"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np


def tree_value(tree, x, known):
    """Path-dependent expectation of one tree, written from the definition:
    follow ``x`` on known features, otherwise weight children by size."""
    node = 0
    stack = [(0, 1.0)]
    total = 0.0
    while stack:
        node, w = stack.pop()
        j = int(tree.feature[node])
        if j < 0:
            total += w * (tree.depth[node] + _c(tree.size[node]))
            continue
        l, r = int(tree.left[node]), int(tree.right[node])
        if j in known:
            stack.append((l if x[j] < tree.threshold[node] else r, w))
        else:
            n = tree.size[node]
            stack.append((l, w * tree.size[l] / n))
            stack.append((r, w * tree.size[r] / n))
    return total


def _c(k):
    if k <= 1:
        return 0.0
    return 2.0 * (math.log(k - 1) + 0.5772156649) - 2.0 * (k - 1) / k


def forest_value(model, x, known):
    return float(np.mean([tree_value(t, x, known) for t in model.trees]))


def brute_force_shapley(model, x):
    """Shapley formula over every subset of all features, applied to the
    whole-forest coalition value."""
    p = len(model.feature_names)
    players = range(p)
    phi = np.zeros(p)
    for i in players:
        others = [j for j in players if j != i]
        for size in range(p):
            w = math.factorial(size) * math.factorial(p - size - 1) / math.factorial(p)
            for S in itertools.combinations(others, size):
                phi[i] += w * (forest_value(model, x, set(S) | {i}) - forest_value(model, x, set(S)))
    return phi


def brute_force_assignment(table):
    """Best total of a one-to-one cluster-to-class assignment by enumeration."""
    table = np.asarray(table)
    r, c = table.shape
    best = 0
    if r <= c:
        for cols in itertools.permutations(range(c), r):
            best = max(best, sum(table[i, cols[i]] for i in range(r)))
    else:
        for rows in itertools.permutations(range(r), c):
            best = max(best, sum(table[rows[j], j] for j in range(c)))
    return int(best)


def gini_importance_by_node(model):
    """Importances by direct per-node accounting (count weighted decrease)."""
    imp = np.zeros(model.n_features)
    counts = np.asarray(model.counts, dtype=float)
    n_root = counts[0].sum()

    def gini(c):
        n = c.sum()
        return 1.0 - np.sum((c / n) ** 2) if n > 0 else 0.0

    for node in range(len(model.feature)):
        j = model.feature[node]
        if j < 0:
            continue
        l, r = model.left[node], model.right[node]
        n, nl, nr = counts[node].sum(), counts[l].sum(), counts[r].sum()
        imp[j] += (n * gini(counts[node]) - nl * gini(counts[l]) - nr * gini(counts[r])) / n_root
    total = imp.sum()
    return imp / total if total > 0 else imp


def silhouette_by_hand(points, labels):
    points = np.asarray(points, dtype=float).reshape(len(points), -1)
    labels = np.asarray(labels)
    s = []
    for i in range(len(points)):
        d = np.linalg.norm(points - points[i], axis=1)
        own = labels == labels[i]
        if own.sum() == 1:
            s.append(0.0)
            continue
        a = d[own].sum() / (own.sum() - 1)
        b = min(d[labels == c].mean() for c in set(labels.tolist()) if c != labels[i])
        s.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(s))
