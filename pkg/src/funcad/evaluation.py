"""ROC AUC, cluster-to-class matching, weighted F-beta and the two-step protocol.

F-beta uses the standard form ``(1 + b^2) P R / (b^2 P + R)``; a small
``beta`` weighs precision more, so false positives cost more. Undefined
precision or recall (empty denominator) counts as 0.

Two-step evaluation, after mapping clusters to classes:

1. normal versus anomalous, both sides binarised;
2. only rows whose true class is an anomaly, scored over anomaly classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import ArgumentError

OTHER = -1
DEFAULT_BETAS = (0.5, 1.0, 2.0)
MAPPING_RULES = ("hungarian", "majority")


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truth).astype(bool)
    if s.shape != t.shape:
        raise ArgumentError("scores and truth differ in length")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ArgumentError("roc_auc needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed by (true class, predicted class) over ``classes``."""

    counts: np.ndarray
    classes: tuple[int, ...]

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != len(self.classes):
            raise ArgumentError("confusion matrix must be square over its classes")
        if np.any(c < 0):
            raise ArgumentError("negative count in confusion matrix")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def precision_recall(self) -> tuple[np.ndarray, np.ndarray]:
        tp = np.diag(self.counts).astype(float)
        pred = self.counts.sum(axis=0).astype(float)
        true = self.counts.sum(axis=1).astype(float)
        p = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
        r = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
        return p, r

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def confusion_matrix(truth, pred, classes: Sequence[int] | None = None) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ArgumentError("truth and pred differ in length")
    cls = tuple(sorted(set(truth.tolist()) | set(pred.tolist()))) if classes is None else tuple(classes)
    index = {c: i for i, c in enumerate(cls)}
    counts = np.zeros((len(cls), len(cls)), dtype=np.int64)
    try:
        np.add.at(counts, ([index[v] for v in truth.tolist()], [index[v] for v in pred.tolist()]), 1)
    except KeyError as exc:
        raise ArgumentError(f"label {exc.args[0]} not among classes {list(cls)}") from None
    return ConfusionMatrix(counts, cls)


def f_beta_per_class(cm: ConfusionMatrix, beta: float) -> np.ndarray:
    if not beta > 0:
        raise ArgumentError(f"beta must be > 0, got {beta}")
    p, r = cm.precision_recall()
    b2 = beta * beta
    den = b2 * p + r
    return np.divide((1.0 + b2) * p * r, den, out=np.zeros_like(p), where=den > 0)


def f_beta_weighted(cm: ConfusionMatrix, beta: float) -> float:
    """Support-weighted mean over true classes of the per-class F-beta."""
    f = f_beta_per_class(cm, beta)
    support = cm.support().astype(float)
    if support.sum() <= 0:
        raise ArgumentError("empty confusion matrix")
    return float(np.sum(f * support) / support.sum())


def contingency(pred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(clusters, classes, table)`` with ``table[i, j]`` the number of
    rows in cluster ``clusters[i]`` whose true class is ``classes[j]``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    clusters, pi = np.unique(pred, return_inverse=True)
    classes, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return clusters, classes, table


def map_clusters(pred, truth, rule: str = "hungarian") -> dict[int, int]:
    """Map cluster ids to class ids.

    ``hungarian`` maximises the total matched count under a one-to-one
    assignment; clusters left over map to ``OTHER``. ``majority`` sends each
    cluster to its most frequent class (ties to the smaller class id) and
    need not be injective.
    """
    if len(pred) == 0:
        raise ArgumentError("no labels to map")
    clusters, classes, table = contingency(pred, truth)
    if rule == "majority":
        return {int(c): int(classes[np.argmax(row)]) for c, row in zip(clusters, table)}
    if rule != "hungarian":
        raise ArgumentError(f"unknown mapping rule {rule!r}")
    rows, cols = linear_sum_assignment(table, maximize=True)
    mapping = {int(c): OTHER for c in clusters}
    for r, c in zip(rows, cols):
        mapping[int(clusters[r])] = int(classes[c])
    return mapping


def matched_count(pred, truth, mapping: Mapping[int, int]) -> int:
    mapped = apply_mapping(pred, mapping)
    return int(np.sum(mapped == np.asarray(truth)))


def apply_mapping(pred, mapping: Mapping[int, int]) -> np.ndarray:
    return np.array([mapping.get(int(p), OTHER) for p in np.asarray(pred)], dtype=np.int64)


@dataclass(frozen=True)
class StepResult:
    confusion: ConfusionMatrix
    f_beta: dict[float, float]

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.to_dict(), "f_beta": {f"{b:g}": v for b, v in self.f_beta.items()}}


@dataclass(frozen=True)
class EvaluationReport:
    step1: StepResult
    step2: StepResult
    cluster_to_class: dict[int, int]
    rule: str = "hungarian"
    roc_auc: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        out = {
            "f_beta_form": "(1+beta^2)*P*R/(beta^2*P+R), support-weighted over true classes",
            "mapping_rule": self.rule,
            "cluster_to_class": {str(k): v for k, v in sorted(self.cluster_to_class.items())},
            "step1": self.step1.to_dict(),
            "step2": self.step2.to_dict(),
        }
        if self.roc_auc is not None:
            out["roc_auc"] = self.roc_auc
        out.update(self.extra)
        return out


def _step(truth, pred, betas) -> StepResult:
    cm = confusion_matrix(truth, pred)
    return StepResult(cm, {float(b): f_beta_weighted(cm, b) for b in betas})


def two_step_evaluate(
    pred,
    truth,
    betas: Sequence[float] = DEFAULT_BETAS,
    scores=None,
    rule: str = "hungarian",
) -> EvaluationReport:
    """Class 0 is normal. Clusters mapped to ``OTHER`` count as anomalous
    in step 1 and as a wrong class in step 2."""
    pred = np.asarray(pred)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ArgumentError("pred and truth differ in length")
    anomalous = truth != 0
    if not anomalous.any():
        raise ArgumentError("truth has no anomaly class")
    for b in betas:
        if not b > 0:
            raise ArgumentError(f"beta must be > 0, got {b}")
    mapping = map_clusters(pred, truth, rule)
    mapped = apply_mapping(pred, mapping)
    step1 = _step(anomalous.astype(np.int64), (mapped != 0).astype(np.int64), betas)
    step2 = _step(truth[anomalous], mapped[anomalous], betas)
    auc = roc_auc(scores, anomalous) if scores is not None and (~anomalous).any() else None
    return EvaluationReport(step1, step2, mapping, rule, auc)


def format_table(shap: EvaluationReport, features: EvaluationReport | None = None) -> str:
    """Aligned text table, one row per beta.

    C1/C2 are steps 1/2 for clustering on attributions, C3/C4 the same for
    clustering on standardised features.
    """
    betas = list(shap.step1.f_beta)
    cols = ["C1", "C2"] + (["C3", "C4"] if features is not None else [])
    lines = ["beta   " + "  ".join(f"{c:>6s}" for c in cols)]
    for b in betas:
        vals = [shap.step1.f_beta[b], shap.step2.f_beta[b]]
        if features is not None:
            vals += [features.step1.f_beta[b], features.step2.f_beta[b]]
        lines.append(f"{b:<5g}  " + "  ".join(f"{v:6.3f}" for v in vals))
    return "\n".join(lines) + "\n"
