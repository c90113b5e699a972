"""Seeded generators for the two simulated benchmark datasets.

Dataset 1 is periodic: channel X1 is ``0.5 sin(pi t/40)`` and X2 is
``sin(pi t/40) + 0.5 cos(pi t/10)``, each with Gaussian noise. Anomalous
series apply one behaviour to X1 and/or X2, following ``DATASET1_COMBINATIONS``.

Dataset 2 is autoregressive: X1 is an AR(4) process driven by Gaussian
innovations and X2 is ``X1 + 0.5 sin(pi t/40)``. Anomalies are applied to X1
and therefore show up on both channels.

Each series ``i`` draws from its own substream ``(seed, "generation",
dataset, i)``. The normal realisation is always drawn first, so a local
anomaly leaves the samples outside its window untouched.

Free parameters that are not pinned by the generative description and their
chosen defaults:

* local noise: noise sd multiplied by ``local_noise_factor`` (5) inside a
  300-sample window;
* white noise: zero-mean Gaussian with the marginal sd of the normal channel;
* constant: the mean of the normal realisation;
* local function change: ``cos(pi t/5)`` of amplitude 1 mixed in over
  200 samples;
* full function change: every frequency of the normal function doubled;
* Dataset 2 type 3 uses coefficients ``(0.4, 0.3, -0.2, -0.05)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .dataset import FunctionalDataset, FunctionalSeries
from .errors import ArgumentError
from .rng import substream

CHANNELS = ("X1", "X2")

LOCAL_NOISE = "local_noise"
WHITE_NOISE = "white_noise"
CONSTANT = "constant"
LOCAL_CHANGE = "local_change"
FULL_CHANGE = "full_change"

# combination id -> behaviour per channel
DATASET1_COMBINATIONS: dict[int, dict[str, str]] = {
    1: {"X1": LOCAL_NOISE},
    2: {"X1": WHITE_NOISE},
    3: {"X1": CONSTANT},
    4: {"X1": LOCAL_CHANGE},
    5: {"X2": LOCAL_NOISE},
    6: {"X2": CONSTANT},
    7: {"X2": LOCAL_CHANGE},
    8: {"X1": WHITE_NOISE, "X2": WHITE_NOISE},
    9: {"X1": FULL_CHANGE, "X2": FULL_CHANGE},
}

DATASET1_PLAN = ((1, 6), (2, 6), (3, 6), (4, 6), (5, 6), (6, 5), (7, 5), (8, 5), (9, 5))

AR4_NORMAL = (0.4, 0.3, 0.2, 0.05)
AR4_CHANGED = (0.4, 0.3, -0.2, -0.05)
AR1_ONLY = (0.4, 0.0, 0.0, 0.0)

DATASET2_TYPES = {1: LOCAL_NOISE, 2: WHITE_NOISE, 3: "changed_coefficients", 4: "ar1"}

DATASET2_PLAN = ((1, 18), (2, 18), (3, 17), (4, 17))


def _check_plan(plan, valid_ids) -> tuple[tuple[int, int], ...]:
    plan = tuple((int(a), int(c)) for a, c in plan)
    for anomaly, count in plan:
        if anomaly not in valid_ids:
            raise ArgumentError(f"unknown anomaly id {anomaly}; valid ids are {sorted(valid_ids)}")
        if count < 0:
            raise ArgumentError(f"negative count for anomaly {anomaly}")
    return plan


@dataclass(frozen=True)
class Dataset1Spec:
    n_normal: int = 450
    T: int = 1000
    anomaly_plan: tuple[tuple[int, int], ...] = DATASET1_PLAN
    seed: int = 0
    noise_sd: tuple[float, float] = (0.5, 0.1)
    local_noise_factor: float = 5.0
    local_noise_length: int = 300
    local_change_length: int = 200
    local_change_amplitude: float = 1.0
    # None matches the channel's marginal sd
    white_noise_sd: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "anomaly_plan", _check_plan(self.anomaly_plan, DATASET1_COMBINATIONS))
        object.__setattr__(self, "noise_sd", tuple(float(v) for v in self.noise_sd))
        if self.n_normal < 0:
            raise ArgumentError("n_normal must be >= 0")
        if self.T < 2:
            raise ArgumentError("T must be >= 2")
        if min(self.noise_sd) < 0:
            raise ArgumentError("noise standard deviations must be >= 0")
        if self.white_noise_sd is not None and self.white_noise_sd < 0:
            raise ArgumentError("white_noise_sd must be >= 0")


@dataclass(frozen=True)
class Dataset2Spec:
    n_normal: int = 450
    T: int = 1000
    anomaly_plan: tuple[tuple[int, int], ...] = DATASET2_PLAN
    innovation_sd: float = 0.1
    seed: int = 0
    local_noise_factor: float = 5.0
    local_noise_length: int = 300
    burn_in: int = 200

    def __post_init__(self):
        object.__setattr__(self, "anomaly_plan", _check_plan(self.anomaly_plan, DATASET2_TYPES))
        if self.n_normal < 0:
            raise ArgumentError("n_normal must be >= 0")
        if self.T < 5:
            raise ArgumentError("T must be >= 5")
        if not self.innovation_sd > 0:
            raise ArgumentError("innovation_sd must be > 0")


@dataclass(frozen=True)
class AnomalyWindow:
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def draw_window(rng: np.random.Generator, T: int, length: int) -> AnomalyWindow:
    """Uniform start so that the window fits inside ``[0, T)``."""
    if length > T:
        raise ArgumentError(f"anomaly window of {length} samples does not fit in T={T}")
    return AnomalyWindow(int(rng.integers(0, T - length + 1)), length)


def _labels_from_plan(n_normal, plan) -> list[int]:
    return [0] * n_normal + [a for a, count in plan for _ in range(count)]


def dataset1_functions(t: np.ndarray, changed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic parts of X1 and X2 (all frequencies doubled if ``changed``)."""
    k = 2.0 if changed else 1.0
    f1 = 0.5 * np.sin(k * np.pi * t / 40)
    f2 = np.sin(k * np.pi * t / 40) + 0.5 * np.cos(k * np.pi * t / 10)
    return f1, f2


def _dataset1_series(spec: Dataset1Spec, index: int, group: int) -> tuple[np.ndarray, dict]:
    rng = substream(spec.seed, "generation", 1, index)
    T = spec.T
    t = np.arange(T, dtype=float)
    base = dataset1_functions(t)
    changed = dataset1_functions(t, changed=True)
    noise = [rng.standard_normal(T), rng.standard_normal(T)]
    x = [base[c] + spec.noise_sd[c] * noise[c] for c in range(2)]

    meta = {"group": group, "anomalies": {}}
    behaviours = DATASET1_COMBINATIONS.get(group, {})
    for c, name in enumerate(CHANNELS):
        kind = behaviours.get(name)
        if kind is None:
            continue
        sd = spec.noise_sd[c]
        info = {"type": kind}
        if kind == LOCAL_NOISE:
            w = draw_window(rng, T, spec.local_noise_length)
            z = rng.standard_normal(w.length)
            x[c][w.start : w.stop] = base[c][w.start : w.stop] + spec.local_noise_factor * sd * z
            info.update(start=w.start, length=w.length)
        elif kind == WHITE_NOISE:
            wn_sd = spec.white_noise_sd
            if wn_sd is None:
                wn_sd = np.sqrt(np.var(base[c]) + sd**2)
            x[c] = wn_sd * rng.standard_normal(T)
        elif kind == CONSTANT:
            x[c] = np.full(T, x[c].mean())
        elif kind == LOCAL_CHANGE:
            w = draw_window(rng, T, spec.local_change_length)
            tw = t[w.start : w.stop]
            x[c][w.start : w.stop] += spec.local_change_amplitude * np.cos(np.pi * tw / 5)
            info.update(start=w.start, length=w.length)
        elif kind == FULL_CHANGE:
            x[c] = changed[c] + sd * noise[c]
        meta["anomalies"][name] = info
    return np.column_stack(x), meta


def generate_dataset1(spec: Dataset1Spec | None = None) -> FunctionalDataset:
    """Periodic two-channel dataset; labels are combination ids (0 = normal)."""
    spec = spec or Dataset1Spec()
    labels = _labels_from_plan(spec.n_normal, spec.anomaly_plan)
    series, meta = [], []
    for i, g in enumerate(labels):
        values, info = _dataset1_series(spec, i, g)
        series.append(FunctionalSeries(f"s{i:04d}", values, CHANNELS))
        meta.append(info)
    return FunctionalDataset(tuple(series), tuple(labels), tuple(meta))


def simulate_ar(
    coefs,
    n: int,
    innovation_sd: float,
    rng: np.random.Generator | None = None,
    innovations: np.ndarray | None = None,
    initial_state=None,
) -> np.ndarray:
    """Simulate ``x_t = sum_j coefs[j] x_{t-1-j} + e_t``.

    ``initial_state`` lists the pre-sample values ``x_{-1}, x_{-2}, ...``
    (most recent first); the default is a zero state. Innovations are
    ``innovation_sd * N(0, 1)`` drawn from ``rng`` unless given explicitly.
    """
    coefs = np.asarray(coefs, dtype=float)
    if innovations is None:
        if rng is None:
            raise ArgumentError("need rng or innovations")
        innovations = innovation_sd * rng.standard_normal(n)
    a = np.concatenate([[1.0], -coefs])
    if initial_state is not None:
        zi = signal.lfiltic([1.0], a, y=np.asarray(initial_state, dtype=float))
        out, _ = signal.lfilter([1.0], a, innovations, zi=zi)
        return out
    return signal.lfilter([1.0], a, innovations)


def ar_stationary_variance(coefs, innovation_sd: float) -> float:
    """Marginal variance of a stationary AR(p) process (Yule-Walker system)."""
    coefs = np.asarray(coefs, dtype=float)
    p = len(coefs)
    # unknowns gamma_0..gamma_p; gamma_k - sum_j a_j gamma_|k-j| = sigma^2 [k == 0]
    A = np.zeros((p + 1, p + 1))
    b = np.zeros(p + 1)
    for k in range(p + 1):
        A[k, k] += 1.0
        for j in range(1, p + 1):
            A[k, abs(k - j)] -= coefs[j - 1]
    b[0] = innovation_sd**2
    return float(np.linalg.solve(A, b)[0])


def _dataset2_series(spec: Dataset2Spec, index: int, group: int) -> tuple[np.ndarray, dict]:
    rng = substream(spec.seed, "generation", 2, index)
    T = spec.T
    t = np.arange(T, dtype=float)
    e = spec.innovation_sd * rng.standard_normal(spec.burn_in + T)
    kind = DATASET2_TYPES.get(group)
    coefs = {"changed_coefficients": AR4_CHANGED, "ar1": AR1_ONLY}.get(kind, AR4_NORMAL)
    x1 = simulate_ar(coefs, len(e), spec.innovation_sd, innovations=e)[spec.burn_in :]

    meta = {"group": group, "anomalies": {}}
    if kind is not None:
        info = {"type": kind}
        if kind == LOCAL_NOISE:
            w = draw_window(rng, T, spec.local_noise_length)
            x1[w.start : w.stop] += spec.local_noise_factor * spec.innovation_sd * rng.standard_normal(w.length)
            info.update(start=w.start, length=w.length)
        elif kind == WHITE_NOISE:
            sd = np.sqrt(ar_stationary_variance(AR4_NORMAL, spec.innovation_sd))
            x1 = sd * rng.standard_normal(T)
        else:
            info["coefficients"] = list(coefs)
        meta["anomalies"]["X1"] = info
    x2 = x1 + 0.5 * np.sin(np.pi * t / 40)
    return np.column_stack([x1, x2]), meta


def generate_dataset2(spec: Dataset2Spec | None = None) -> FunctionalDataset:
    """Autoregressive two-channel dataset; labels are anomaly types 0-4."""
    spec = spec or Dataset2Spec()
    labels = _labels_from_plan(spec.n_normal, spec.anomaly_plan)
    series, meta = [], []
    for i, g in enumerate(labels):
        values, info = _dataset2_series(spec, i, g)
        series.append(FunctionalSeries(f"s{i:04d}", values, CHANNELS))
        meta.append(info)
    return FunctionalDataset(tuple(series), tuple(labels), tuple(meta))


def generate(kind: int, seed: int = 0, **overrides) -> FunctionalDataset:
    if kind == 1:
        return generate_dataset1(Dataset1Spec(seed=seed, **overrides))
    if kind == 2:
        return generate_dataset2(Dataset2Spec(seed=seed, **overrides))
    raise ArgumentError(f"unknown dataset {kind!r}; expected 1 or 2")
