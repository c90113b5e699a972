import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.tsa.stattools import adfuller

from funcad.dataset import FunctionalDataset, FunctionalSeries
from funcad.errors import ArgumentError, NumericError, SchemaError
from funcad.features import (
    FeatureDescriptor,
    FeatureSpec,
    WelchParams,
    adf_statistic,
    apply_standardizer,
    autocovariance,
    band_power,
    durbin_levinson,
    extract,
    fit_standardizer,
    pacf,
    read_matrix_csv,
    welch_psd,
    write_matrix_csv,
)

from conftest import matrix


def _spec(channel_features, welch=None):
    return FeatureSpec.from_mapping({"channels": channel_features, **({"welch": welch} if welch else {})})


def _dataset(*arrays):
    """One series per array; a 2-D array gives channels X1, X2, ..."""
    series = []
    for i, a in enumerate(arrays):
        a = np.asarray(a, dtype=float).reshape(len(a), -1)
        series.append(FunctionalSeries(f"s{i}", a, tuple(f"X{c + 1}" for c in range(a.shape[1]))))
    return FunctionalDataset(tuple(series))


def pacf_regression(x, lag):
    """Oracle: last coefficient of the least-squares AR(lag) fit."""
    x = np.asarray(x, float) - np.mean(x)
    T = len(x)
    X = np.column_stack([x[lag - j - 1 : T - j - 1] for j in range(lag)])
    beta, *_ = np.linalg.lstsq(X, x[lag:], rcond=None)
    return beta[-1]


def test_constant_series_mean_std():
    F = extract(_dataset(np.full(50, 2.0)), _spec({"X1": [{"feature": "mean"}, {"feature": "std"}]}))
    np.testing.assert_array_equal(F.values, [[2.0, 0.0]])
    assert F.feature_names == ("X1.mean", "X1.std")


def test_constant_series_flags_degenerate_features():
    spec = _spec({"X1": [{"feature": "pacf", "lag": 1}, {"feature": "kurtosis"}, {"feature": "adf"}, {"feature": "max"}]})
    F = extract(_dataset(np.full(50, 3.0)), spec)
    np.testing.assert_array_equal(F.values, [[0.0, 0.0, 0.0, 3.0]])
    np.testing.assert_array_equal(F.degenerate, [[True, True, True, False]])


def test_fft_argmax_is_the_sine_bin():
    t = np.arange(1000)
    x = np.sin(2 * np.pi * t / 50)
    spec = _spec({"X1": [{"feature": "fft", "bin": b} for b in range(501)]})
    F = extract(_dataset(x), spec)
    assert int(np.argmax(F.values[0])) == 20
    # oracle: direct DFT sum at bin 20
    direct = abs(np.sum(x * np.exp(-2j * np.pi * 20 * t / 1000)))
    assert F.values[0, 20] == pytest.approx(direct, rel=1e-9)


def test_ar1_pacf():
    rng = np.random.default_rng(0)
    e = rng.standard_normal(100_000)
    x = np.zeros_like(e)
    for t in range(1, len(e)):
        x[t] = 0.5 * x[t - 1] + e[t]
    p = pacf(x, 2)
    assert abs(p[0] - 0.5) < 0.05
    assert abs(p[1]) < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_pacf_matches_regression_oracle_on_long_series(seed, lag):
    rng = np.random.default_rng(seed)
    coefs = rng.uniform(-0.3, 0.3, size=3)
    e = rng.standard_normal(20_000)
    x = np.zeros_like(e)
    for t in range(3, len(e)):
        x[t] = coefs @ x[t - 3 : t][::-1] + e[t]
    # Durbin-Levinson (Yule-Walker) and least squares agree asymptotically
    assert pacf(x, lag)[-1] == pytest.approx(pacf_regression(x, lag), abs=0.02)


def test_durbin_levinson_matches_yule_walker_solve():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(500).cumsum() * 0.01 + rng.standard_normal(500)
    gamma = autocovariance(x, 6)
    dl = durbin_levinson(gamma)
    for k in range(1, 7):
        R = np.array([[gamma[abs(i - j)] for j in range(k)] for i in range(k)])
        phi = np.linalg.solve(R, gamma[1 : k + 1])
        assert dl[k - 1] == pytest.approx(phi[-1], abs=1e-10)


def test_durbin_levinson_singular():
    with pytest.raises(NumericError):
        durbin_levinson(np.array([0.0, 0.0, 0.0]))


def test_welch_parseval_on_white_noise():
    x = np.random.default_rng(1).standard_normal(10_000)
    f, p = welch_psd(x)
    assert band_power(f, p, 0.0, 0.5 + 1e-9) == pytest.approx(np.var(x), rel=0.05)


def test_band_power_is_additive():
    x = np.random.default_rng(2).standard_normal(4096)
    f, p = welch_psd(x, WelchParams(nperseg=128))
    whole = band_power(f, p, 0.0, 0.6)
    parts = band_power(f, p, 0.0, 0.2) + band_power(f, p, 0.2, 0.6)
    assert whole == pytest.approx(parts, rel=1e-12)


def test_adf_matches_statsmodels():
    rng = np.random.default_rng(3)
    for q in (0, 1, 3):
        y = rng.standard_normal(400).cumsum()
        ref = adfuller(y, maxlag=q, regression="c", autolag=None)[0]
        assert adf_statistic(y, q) == pytest.approx(ref, rel=1e-9)


def test_adf_mean_reverting_strongly_negative():
    rng = np.random.default_rng(4)
    e = rng.standard_normal(5000)
    y = np.zeros_like(e)
    for t in range(1, len(e)):
        y[t] = -0.9 * y[t - 1] + e[t]
    assert adf_statistic(y, 1) < -10


def test_adf_random_walk_follows_dickey_fuller_law():
    # with a constant in the regression the null law is tau_mu, whose mass
    # above -2 is about 0.71 (MacKinnon response surface), not 0.9
    from statsmodels.tsa.adfvalues import mackinnonp

    stats = np.array([adf_statistic(np.random.default_rng(1000 + s).standard_normal(1000).cumsum(), 1) for s in range(100)])
    expected = 1.0 - mackinnonp(-2.0, "c", 1)
    assert abs(np.mean(stats > -2) - expected) <= 3 * np.sqrt(expected * (1 - expected) / len(stats))
    assert -2 < np.median(stats) < 0


def test_adf_too_short():
    with pytest.raises(ArgumentError):
        adf_statistic(np.arange(3.0), 1)


def test_moments_match_scipy():
    from scipy import stats

    x = np.random.default_rng(6).gamma(2.0, size=300)
    F = extract(_dataset(x), _spec({"X1": [{"feature": "skewness"}, {"feature": "kurtosis"}]}))
    assert F.values[0, 0] == pytest.approx(stats.skew(x), rel=1e-10)
    assert F.values[0, 1] == pytest.approx(stats.kurtosis(x), rel=1e-10)


def test_names_and_channel_order():
    spec = _spec({"X2": [{"feature": "std"}], "X1": [{"feature": "psd_band", "f_lo": 0.1, "f_hi": 0.25}, {"feature": "pacf", "lag": 3}]})
    assert spec.feature_names == ["X2.std", "X1.psd_0.1_0.25", "X1.pacf_3"]
    x = np.random.default_rng(0).standard_normal((64, 2))
    F = extract(_dataset(x), spec)
    assert F.values[0, 0] == pytest.approx(x[:, 1].std())


def test_spec_round_trip():
    spec = _spec({"X1": [{"feature": "acf", "lag": 2}, {"feature": "welch", "bin": 3, "name": "w3"}]}, {"nperseg": 64})
    assert FeatureSpec.from_mapping(spec.to_mapping()) == spec
    assert spec.feature_names == ["X1.acf_2", "X1.w3"]


@pytest.mark.parametrize(
    "entry",
    [{"feature": "nope"}, {"feature": "pacf"}, {"feature": "pacf", "lag": 0}, {"feature": "psd_band", "f_lo": 0.3, "f_hi": 0.2}],
)
def test_bad_descriptors(entry):
    with pytest.raises(ArgumentError):
        FeatureDescriptor.from_mapping(entry)


def test_unknown_descriptor_key():
    with pytest.raises(SchemaError):
        FeatureDescriptor.from_mapping({"feature": "std", "lag": 2})


def test_duplicate_names():
    with pytest.raises(ArgumentError):
        _spec({"X1": [{"feature": "std"}, {"feature": "std"}]})


@pytest.mark.parametrize(
    "entry",
    [{"feature": "pacf", "lag": 20}, {"feature": "fft", "bin": 11}, {"feature": "adf", "lag": 18}],
)
def test_spec_invalid_for_length(entry):
    with pytest.raises(ArgumentError):
        _spec({"X1": [entry]}).validate_for(20, ("X1",))


def test_spec_unknown_channel():
    with pytest.raises(SchemaError):
        _spec({"X9": [{"feature": "std"}]}).validate_for(20, ("X1",))


def test_feature_matrix_rejects_non_finite():
    with pytest.raises(NumericError):
        matrix([[1.0, np.nan]])


def test_standardizer_example():
    s = fit_standardizer(matrix([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_allclose(s.mean, [2.0, 5.0])
    np.testing.assert_allclose(s.sd, [1.0, 0.0])
    np.testing.assert_array_equal(s.constant, [False, True])
    z = apply_standardizer(matrix([[2.0, 5.0], [3.0, 9.0]]), s)
    np.testing.assert_allclose(z.values, [[0.0, 0.0], [1.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_standardizer_round_trip_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    m = matrix(rng.normal(5.0, 3.0, size=(20, 4)))
    s = fit_standardizer(m)
    z = s.apply(m)
    np.testing.assert_allclose(s.inverse(z).values, m.values, rtol=1e-12, atol=1e-12)
    s2 = fit_standardizer(z)
    np.testing.assert_allclose(s2.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(s2.sd, 1.0, rtol=1e-12)


def test_standardizer_on_subset_and_name_check():
    m = matrix([[0.0], [2.0], [100.0]])
    s = fit_standardizer(m, rows=[0, 1])
    assert s.mean[0] == 1.0
    with pytest.raises(SchemaError):
        s.apply(matrix([[1.0]], names=["other"]))
    with pytest.raises(ArgumentError):
        fit_standardizer(m, rows=[])


def test_matrix_csv_round_trip(tmp_path):
    m = matrix(np.random.default_rng(0).standard_normal((4, 3)) * 1e-7, ids=["a", "007", "c", "d"])
    write_matrix_csv(m, tmp_path / "f.csv")
    back = read_matrix_csv(tmp_path / "f.csv")
    assert back.series_ids == m.series_ids
    np.testing.assert_array_equal(back.values, m.values)
