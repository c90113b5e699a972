"""Explainable multi-class anomaly detection on multivariate functional data.

Series are summarised by feature vectors, scored with an Isolation Forest,
explained with exact Shapley values of the mean path length, grouped by
K-means (or PAM) and described by a CART tree trained on the cluster
labels.
"""

__version__ = "0.1.0"
