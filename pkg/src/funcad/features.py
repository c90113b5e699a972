"""Series-to-vector transformation.

Each channel of each series is summarised by a list of named features; the
per-channel vectors are concatenated into one row of a :class:`FeatureMatrix`.
Column names are ``"{channel}.{feature}"``, e.g. ``X1.pacf_2``.

Feature catalogue (config key ``feature``; parameters in brackets):

================  ==========================  ===========================
key               parameters                  value
================  ==========================  ===========================
mean, std         -                           sample moments (std: ddof 0)
min, max          -
skewness          -                           m3 / m2^1.5
kurtosis          -                           m4 / m2^2 - 3 (excess)
acf               lag                         biased autocorrelation
pacf              lag                         Durbin-Levinson PACF
fft               bin                         ``|rfft(x)[bin]|``
psd_band          f_lo, f_hi                  Welch power in [f_lo, f_hi)
welch             bin                         Welch PSD value at ``bin``
adf               lag (default 1)             augmented Dickey-Fuller t
================  ==========================  ===========================

Frequencies are in cycles per sample. Correlation-type features, moments
of order 3 and 4 and the ADF statistic are defined as 0 on a constant
channel; such entries are flagged in ``FeatureMatrix.degenerate``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import signal

from .dataset import FunctionalDataset
from .errors import ArgumentError, NumericError, SchemaError

KINDS = ("mean", "std", "min", "max", "skewness", "kurtosis", "acf", "pacf", "fft", "psd_band", "welch", "adf")
_PARAMS = {
    "acf": ("lag",),
    "pacf": ("lag",),
    "fft": ("bin",),
    "welch": ("bin",),
    "psd_band": ("f_lo", "f_hi"),
    "adf": ("lag",),
}
# definitions that fall back to 0 on a constant channel
_DEGENERATE_ZERO = {"skewness", "kurtosis", "acf", "pacf", "adf"}


@dataclass(frozen=True)
class FeatureDescriptor:
    kind: str
    lag: int | None = None
    bin: int | None = None
    f_lo: float | None = None
    f_hi: float | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown feature {self.kind!r}; known: {', '.join(KINDS)}")
        if self.kind == "adf" and self.lag is None:
            object.__setattr__(self, "lag", 1)
        for p in _PARAMS.get(self.kind, ()):
            if getattr(self, p) is None:
                raise ArgumentError(f"feature {self.kind!r} needs parameter {p!r}")
        if self.kind in ("acf", "pacf") and self.lag < 1:
            raise ArgumentError(f"{self.kind} lag must be >= 1")
        if self.kind == "adf" and self.lag < 0:
            raise ArgumentError("adf lag order must be >= 0")
        if self.kind in ("fft", "welch") and self.bin < 0:
            raise ArgumentError(f"{self.kind} bin must be >= 0")
        if self.kind == "psd_band" and not 0 <= self.f_lo < self.f_hi:
            raise ArgumentError("psd_band needs 0 <= f_lo < f_hi")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind in ("acf", "pacf", "adf"):
            return f"{self.kind}_{self.lag}"
        if self.kind in ("fft", "welch"):
            return f"{self.kind}_{self.bin}"
        if self.kind == "psd_band":
            return f"psd_{self.f_lo:g}_{self.f_hi:g}"
        return self.kind

    @classmethod
    def from_mapping(cls, entry: Mapping) -> "FeatureDescriptor":
        entry = dict(entry)
        try:
            kind = entry.pop("feature")
        except KeyError:
            raise SchemaError(f"feature entry {entry} has no 'feature' key") from None
        label = entry.pop("name", None)
        allowed = set(_PARAMS.get(kind, ()))
        unknown = set(entry) - allowed
        if unknown:
            raise SchemaError(f"feature {kind!r}: unknown keys {sorted(unknown)}")
        return cls(kind=kind, label=label, **entry)

    def to_mapping(self) -> dict:
        out = {"feature": self.kind}
        for p in _PARAMS.get(self.kind, ()):
            out[p] = getattr(self, p)
        if self.label:
            out["name"] = self.label
        return out


@dataclass(frozen=True)
class WelchParams:
    nperseg: int = 256
    overlap: float = 0.5
    window: str = "hann"

    def __post_init__(self):
        if self.nperseg < 2:
            raise ArgumentError("welch nperseg must be >= 2")
        if not 0 <= self.overlap < 1:
            raise ArgumentError("welch overlap must be in [0, 1)")


@dataclass(frozen=True)
class FeatureSpec:
    """Ordered ``channel -> descriptors`` mapping plus Welch settings."""

    channels: tuple[tuple[str, tuple[FeatureDescriptor, ...]], ...]
    welch: WelchParams = field(default_factory=WelchParams)

    def __post_init__(self):
        channels = tuple((str(c), tuple(d)) for c, d in self.channels)
        object.__setattr__(self, "channels", channels)
        names = self.feature_names
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ArgumentError(f"duplicate feature names: {sorted(dupes)}")

    @property
    def feature_names(self) -> list[str]:
        return [f"{c}.{d.name}" for c, descs in self.channels for d in descs]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @classmethod
    def from_mapping(cls, table: Mapping) -> "FeatureSpec":
        """Build from a parsed config table::

            [features.welch]
            nperseg = 256

            [features.channels]
            X1 = [{feature = "std"}, {feature = "pacf", lag = 2}]
        """
        if "channels" not in table:
            raise SchemaError("feature config needs a 'channels' table")
        channels = tuple(
            (name, tuple(FeatureDescriptor.from_mapping(e) for e in entries))
            for name, entries in table["channels"].items()
        )
        welch = WelchParams(**table.get("welch", {}))
        return cls(channels, welch)

    def to_mapping(self) -> dict:
        return {
            "welch": {"nperseg": self.welch.nperseg, "overlap": self.welch.overlap, "window": self.welch.window},
            "channels": {c: [d.to_mapping() for d in descs] for c, descs in self.channels},
        }

    def validate_for(self, T: int, channel_names: Sequence[str]) -> None:
        nperseg = min(self.welch.nperseg, T)
        for channel, descs in self.channels:
            if channel not in channel_names:
                raise SchemaError(f"feature spec refers to unknown channel {channel!r}")
            for d in descs:
                if d.kind in ("acf", "pacf") and d.lag >= T:
                    raise ArgumentError(f"{channel}.{d.name}: lag {d.lag} >= series length {T}")
                if d.kind == "adf" and T <= d.lag + 2:
                    raise ArgumentError(f"{channel}.{d.name}: series length {T} too short for lag {d.lag}")
                if d.kind == "fft" and d.bin > T // 2:
                    raise ArgumentError(f"{channel}.{d.name}: bin {d.bin} beyond Nyquist bin {T // 2}")
                if d.kind == "welch" and d.bin > nperseg // 2:
                    raise ArgumentError(f"{channel}.{d.name}: bin {d.bin} beyond Welch bin {nperseg // 2}")
                if d.kind == "psd_band" and d.f_lo > 0.5:
                    raise ArgumentError(f"{channel}.{d.name}: band starts above Nyquist")


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    feature_names: tuple[str, ...]
    series_ids: tuple[str, ...]
    degenerate: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise SchemaError("feature matrix must be 2-D")
        n, p = values.shape
        if len(self.feature_names) != p or len(self.series_ids) != n:
            raise SchemaError(f"matrix {values.shape} does not match {len(self.series_ids)} ids x {len(self.feature_names)} names")
        if len(set(self.feature_names)) != p:
            raise SchemaError("feature names are not unique")
        if not np.all(np.isfinite(values)):
            raise NumericError("feature matrix contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "series_ids", tuple(self.series_ids))
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", np.zeros((n, p), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def rows(self, index: Sequence[int]) -> "FeatureMatrix":
        index = np.asarray(index, dtype=int)
        return FeatureMatrix(
            self.values[index],
            self.feature_names,
            tuple(self.series_ids[i] for i in index),
            self.degenerate[index],
        )

    def replace_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(values, self.feature_names, self.series_ids, self.degenerate)


# per-series computations ---------------------------------------------------


def autocovariance(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased (divisor T) autocovariances ``gamma_0 .. gamma_max_lag``."""
    x = np.asarray(x, dtype=float)
    T = len(x)
    d = x - x.mean()
    return np.array([np.dot(d[: T - k], d[k:]) / T for k in range(max_lag + 1)])


def durbin_levinson(gamma: np.ndarray) -> np.ndarray:
    """PACF at lags ``1..len(gamma)-1`` from autocovariances.

    Raises :class:`NumericError` when the innovation variance of the
    recursion reaches zero (singular autocovariance matrix).
    """
    gamma = np.asarray(gamma, dtype=float)
    K = len(gamma) - 1
    pacf = np.zeros(K)
    if K == 0:
        return pacf
    if gamma[0] <= 0:
        raise NumericError("zero variance: autocovariance matrix is singular")
    phi = np.zeros(0)
    v = gamma[0]
    for k in range(1, K + 1):
        a = (gamma[k] - np.dot(phi, gamma[k - 1 : 0 : -1])) / v
        phi = np.concatenate([phi - a * phi[::-1], [a]])
        v *= 1.0 - a * a
        pacf[k - 1] = a
        if v <= 0 and k < K:
            raise NumericError(f"Durbin-Levinson breakdown at lag {k} (innovation variance {v:.3g})")
    return pacf


def pacf(x: np.ndarray, max_lag: int) -> np.ndarray:
    return durbin_levinson(autocovariance(x, max_lag))


def welch_psd(x: np.ndarray, params: WelchParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Welch PSD (density scaling, unit sampling rate)."""
    params = params or WelchParams()
    nperseg = min(params.nperseg, len(x))
    return signal.welch(
        np.asarray(x, dtype=float),
        fs=1.0,
        window=params.window,
        nperseg=nperseg,
        noverlap=int(nperseg * params.overlap),
        detrend="constant",
        scaling="density",
        average="mean",
    )


def band_power(freqs: np.ndarray, psd: np.ndarray, f_lo: float, f_hi: float) -> float:
    df = freqs[1] - freqs[0]
    mask = (freqs >= f_lo) & (freqs < f_hi)
    return float(psd[mask].sum() * df)


def adf_statistic(series: np.ndarray, lag_order: int = 1) -> float:
    """t-statistic of ``gamma`` in the augmented Dickey-Fuller regression

    ``dy_t = alpha + gamma * y_{t-1} + sum_{j=1..q} beta_j dy_{t-j} + e_t``

    fitted by ordinary least squares (constant, no trend).
    """
    y = np.asarray(series, dtype=float)
    q = int(lag_order)
    if q < 0:
        raise ArgumentError("lag order must be >= 0")
    if len(y) <= q + 2:
        raise ArgumentError(f"series of length {len(y)} is too short for lag order {q}")
    dy = np.diff(y)
    target = dy[q:]
    cols = [np.ones_like(target), y[q:-1]]
    cols += [dy[q - j : len(dy) - j] for j in range(1, q + 1)]
    X = np.column_stack(cols)
    n_obs, k = X.shape
    if n_obs <= k:
        raise NumericError(f"ADF regression has {n_obs} rows for {k} regressors")
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericError(f"singular ADF design (condition number {cond:.3g})")
    beta, _, _, _ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ beta
    sigma2 = resid @ resid / (n_obs - k)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(cov[1, 1])
    if se == 0:
        # perfect fit: the statistic is unbounded
        raise NumericError("ADF regression fits exactly; standard error is zero")
    return float(beta[1] / se)


class _ChannelFeatures:
    """Lazily computed intermediates shared across features of one channel."""

    def __init__(self, x: np.ndarray, welch: WelchParams, max_lag: int):
        self.x = x
        self.welch = welch
        self.constant = bool(np.ptp(x) == 0)
        self._max_lag = max_lag
        self._gamma = None
        self._pacf = None
        self._psd = None
        self._fft = None

    @property
    def gamma(self):
        if self._gamma is None:
            self._gamma = autocovariance(self.x, self._max_lag)
        return self._gamma

    @property
    def pacf(self):
        if self._pacf is None:
            self._pacf = durbin_levinson(self.gamma)
        return self._pacf

    @property
    def psd(self):
        if self._psd is None:
            self._psd = welch_psd(self.x, self.welch)
        return self._psd

    @property
    def fft(self):
        if self._fft is None:
            self._fft = np.abs(np.fft.rfft(self.x))
        return self._fft

    def value(self, d: FeatureDescriptor) -> tuple[float, bool]:
        x = self.x
        if self.constant and d.kind in _DEGENERATE_ZERO:
            return 0.0, True
        k = d.kind
        if k == "mean":
            return float(x.mean()), False
        if k == "std":
            return float(x.std()), False
        if k == "min":
            return float(x.min()), False
        if k == "max":
            return float(x.max()), False
        if k in ("skewness", "kurtosis"):
            c = x - x.mean()
            m2 = np.mean(c**2)
            if m2 == 0:
                return 0.0, True
            if k == "skewness":
                return float(np.mean(c**3) / m2**1.5), False
            return float(np.mean(c**4) / m2**2 - 3.0), False
        if k == "acf":
            return float(self.gamma[d.lag] / self.gamma[0]), False
        if k == "pacf":
            try:
                return float(self.pacf[d.lag - 1]), False
            except NumericError:
                return 0.0, True
        if k == "fft":
            return float(self.fft[d.bin]), False
        if k == "welch":
            return float(self.psd[1][d.bin]), False
        if k == "psd_band":
            return band_power(*self.psd, d.f_lo, d.f_hi), False
        if k == "adf":
            try:
                return adf_statistic(x, d.lag), False
            except NumericError:
                return 0.0, True
        raise AssertionError(k)


def extract_series(values: np.ndarray, channel_names: Sequence[str], spec: FeatureSpec) -> tuple[list[float], list[bool]]:
    row, flags = [], []
    for channel, descs in spec.channels:
        lags = [d.lag for d in descs if d.kind in ("acf", "pacf")]
        cf = _ChannelFeatures(values[:, list(channel_names).index(channel)], spec.welch, max(lags, default=0))
        for d in descs:
            v, flag = cf.value(d)
            row.append(v)
            flags.append(flag)
    return row, flags


def extract(dataset: FunctionalDataset, spec: FeatureSpec) -> FeatureMatrix:
    """Row ``i`` holds the features of series ``i``, columns in spec order."""
    spec.validate_for(dataset.length, dataset.channel_names)
    rows, flags = [], []
    for s in dataset.series:
        r, f = extract_series(s.values, s.channel_names, spec)
        rows.append(r)
        flags.append(f)
    values = np.array(rows, dtype=float).reshape(len(dataset), spec.n_features)
    return FeatureMatrix(values, tuple(spec.feature_names), tuple(dataset.ids), np.array(flags, dtype=bool).reshape(values.shape))


# standardisation -----------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray

    def apply(self, matrix: FeatureMatrix) -> FeatureMatrix:
        return apply_standardizer(matrix, self)

    def inverse(self, matrix: FeatureMatrix) -> FeatureMatrix:
        self._check(matrix)
        sd = np.where(self.constant, 0.0, self.sd)
        return matrix.replace_values(matrix.values * sd + self.mean)

    def _check(self, matrix: FeatureMatrix) -> None:
        if tuple(matrix.feature_names) != self.feature_names:
            raise SchemaError(
                f"feature names {list(matrix.feature_names)} do not match standardizer {list(self.feature_names)}"
            )

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "constant": self.constant.tolist(),
        }


def fit_standardizer(matrix: FeatureMatrix, rows: Iterable[int] | None = None) -> Standardizer:
    """Per-feature mean and sample sd (divisor n-1) over ``rows``."""
    index = np.arange(matrix.shape[0]) if rows is None else np.asarray(list(rows), dtype=int)
    if index.size == 0:
        raise ArgumentError("cannot fit a standardizer on an empty subset")
    block = matrix.values[index]
    mean = block.mean(axis=0)
    sd = block.std(axis=0, ddof=1) if index.size > 1 else np.zeros(block.shape[1])
    constant = ~(sd > 0)
    return Standardizer(tuple(matrix.feature_names), mean, np.where(constant, 0.0, sd), constant)


def apply_standardizer(matrix: FeatureMatrix, s: Standardizer) -> FeatureMatrix:
    """``z = (x - mean) / sd``; constant features map to 0."""
    s._check(matrix)
    safe_sd = np.where(s.constant, 1.0, s.sd)
    z = (matrix.values - s.mean) / safe_sd
    z[:, s.constant] = 0.0
    return matrix.replace_values(z)


# CSV -----------------------------------------------------------------------


def write_matrix_csv(matrix: FeatureMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", *matrix.feature_names])
        for sid, row in zip(matrix.series_ids, matrix.values.tolist()):
            writer.writerow([sid, *map(repr, row)])


def read_matrix_csv(path: str | Path) -> FeatureMatrix:
    try:
        df = pd.read_csv(path, dtype={"series_id": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: file is empty") from None
    if df.columns.empty or df.columns[0] != "series_id":
        raise SchemaError(f"{path}: first column must be 'series_id'")
    names = tuple(df.columns[1:])
    return FeatureMatrix(df[list(names)].to_numpy(dtype=float), names, tuple(df["series_id"]))
