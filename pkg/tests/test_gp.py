import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from oracles import gp_dense, matern_bessel
from uwbgp import gp
from uwbgp.exceptions import DimensionMismatch, InputError, NotPositiveDefinite


def test_matern32_value_against_mpmath():
    mpmath.mp.dps = 40
    params = gp.KernelParams(nu=1.5, length_scale=1.0, signal_variance=1.0)
    r = 2.0
    ref = (1 + mpmath.sqrt(3) * r) * mpmath.exp(-mpmath.sqrt(3) * r)
    assert gp.kernel(params, [0, 0, 0], [r, 0, 0]) == pytest.approx(float(ref), rel=1e-14)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_kernel_matches_bessel_form(nu):
    p = gp.KernelParams(nu=nu, length_scale=7.0, signal_variance=2.5)
    r = np.linspace(0, 40, 81)
    np.testing.assert_allclose(gp.matern_from_distance(p, r), matern_bessel(r, nu, 7.0, 2.5), rtol=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_kernel_mpmath_high_precision(nu):
    mpmath.mp.dps = 40
    p = gp.KernelParams(nu=nu, length_scale=3.0, signal_variance=1.7)
    for r in (0.1, 1.0, 4.0, 12.0):
        z = mpmath.sqrt(2 * nu) * r / 3
        ref = 1.7 * 2 ** (1 - nu) / mpmath.gamma(nu) * z**nu * mpmath.besselk(nu, z)
        assert gp.matern_from_distance(p, r) == pytest.approx(float(ref), rel=1e-13)


def test_kernel_symmetric_and_peaks_at_zero():
    p = gp.KernelParams()
    a, b = np.array([1.0, 2, 3]), np.array([-4.0, 0.5, 9])
    assert gp.kernel(p, a, b) == gp.kernel(p, b, a)
    assert gp.kernel(p, a, a) == p.signal_variance
    assert gp.kernel(p, a, b) < p.signal_variance


def test_kernel_params_validation():
    with pytest.raises(InputError):
        gp.KernelParams(nu=1.0)
    with pytest.raises(InputError):
        gp.KernelParams(length_scale=0)
    with pytest.raises(InputError):
        gp.KernelParams(noise_variance=-1)
    assert gp.KernelParams(nu="3/2").nu == 1.5


def test_single_point_mean_shrinks_toward_observation():
    p = gp.KernelParams(nu=1.5, length_scale=30, signal_variance=1.0, noise_variance=0.09)
    m = gp.fit(p, [[0, 0, 0]], [5.0])
    assert gp.predict_mean(m, [0, 0, 0]) == pytest.approx(5.0 / 1.09)


def test_noiseless_interpolation_and_zero_variance():
    rng = np.random.default_rng(0)
    X = rng.normal(scale=10, size=(6, 3))
    y = rng.normal(size=6)
    p = gp.KernelParams(nu=2.5, length_scale=5.0, signal_variance=1.0, noise_variance=0.0)
    m = gp.fit(p, X, y)
    np.testing.assert_allclose(gp.predict_mean(m, X), y, atol=1e-8)
    np.testing.assert_allclose(gp.predict_var(m, X), 0.0, atol=1e-8)


def test_far_query_reverts_to_prior():
    p = gp.KernelParams(length_scale=1.0, signal_variance=4.0)
    m = gp.fit(p, [[0, 0, 0], [1, 0, 0]], [3.0, 4.0], mean=2.0)
    far = [1e4, 0, 0]
    assert gp.predict_mean(m, far) == pytest.approx(2.0)
    assert gp.predict_var(m, far) == pytest.approx(4.0)


def test_duplicate_points_with_zero_noise_retry_or_fail():
    p = gp.KernelParams(noise_variance=0.0, signal_variance=1.0)
    X = np.zeros((3, 3))
    m = gp.fit(p, X, [1.0, 1.0, 1.0])  # retried with jitter
    assert m.noise_variance == pytest.approx(1e-6)
    p0 = gp.KernelParams(noise_variance=0.0, signal_variance=0.0)
    with pytest.raises(NotPositiveDefinite):
        gp.fit(p0, X, [1.0, 1.0, 1.0])


def test_fit_shape_errors():
    p = gp.KernelParams()
    with pytest.raises(DimensionMismatch):
        gp.fit(p, np.zeros((3, 3)), np.zeros(4))
    with pytest.raises(DimensionMismatch):
        gp.fit(p, np.zeros((3, 2)), np.zeros(3))
    m = gp.fit(p, np.eye(3), np.zeros(3))
    with pytest.raises(DimensionMismatch):
        gp.predict_mean(m, np.zeros((2, 2)))


@given(
    n=st.integers(1, 8),
    nu=st.sampled_from([0.5, 1.5, 2.5]),
    seed=st.integers(0, 2**31 - 1),
    log_ls=st.floats(-1, 2),
    log_noise=st.floats(-3, 0),
)
def test_property_dense_inverse_oracle(n, nu, seed, log_ls, log_noise):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-20, 20, size=(n, 3))
    y = rng.normal(scale=3, size=n)
    Xs = rng.uniform(-25, 25, size=(5, 3))
    p = gp.KernelParams(nu, 10**log_ls, 2.0, 10**log_noise)
    m = gp.fit(p, X, y, mean=0.7)
    mu, var = gp_dense(X, y, Xs, nu, 10**log_ls, 2.0, 10**log_noise, 0.7)
    np.testing.assert_allclose(gp.predict_mean(m, Xs), mu, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(gp.predict_var(m, Xs), np.maximum(var, 0), rtol=1e-8, atol=1e-10)


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 12))
def test_property_variance_bounds(seed, n):
    rng = np.random.default_rng(seed)
    p = gp.KernelParams(signal_variance=3.0, noise_variance=0.05, length_scale=rng.uniform(1, 40))
    m = gp.fit(p, rng.normal(scale=10, size=(n, 3)), rng.normal(size=n))
    v = gp.predict_var(m, rng.normal(scale=15, size=(20, 3)))
    assert np.all(v >= 0) and np.all(v <= 3.0 + 1e-12)


def test_log_marginal_likelihood_against_dense():
    rng = np.random.default_rng(1)
    X = rng.normal(scale=5, size=(7, 3))
    y = rng.normal(size=7)
    p = gp.KernelParams(nu=1.5, length_scale=4.0, signal_variance=1.3, noise_variance=0.2)
    K = matern_bessel(np.linalg.norm(X[:, None] - X[None], axis=-1), 1.5, 4.0, 1.3) + 0.2 * np.eye(7)
    sign, logdet = np.linalg.slogdet(K)
    ref = -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 3.5 * np.log(2 * np.pi)
    assert gp.log_marginal_likelihood(gp.fit(p, X, y)) == pytest.approx(ref, rel=1e-10)


def test_grid_search_prefers_generating_length_scale():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 50, size=(80, 3))
    y = np.sin(X[:, 0] / 3.0) + 0.05 * rng.normal(size=80)
    best, lml = gp.grid_search(X, y, {"length_scale": [0.3, 4.0, 300.0]},
                               base=gp.KernelParams(signal_variance=1.0, noise_variance=0.0025))
    assert best.length_scale == 4.0
    assert np.isfinite(lml)


def test_default_params():
    X = np.array([[0, 0, 0], [30, 40, 0]], dtype=float)
    p = gp.default_params(X)
    assert p.length_scale == 30.0
    assert p.signal_variance == pytest.approx(12.5**2)
    assert p.noise_variance == pytest.approx(0.09)


def test_regressor_estimator_api():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 20, size=(40, 3))
    y = np.linalg.norm(X - 10, axis=1)
    est = gp.MaternGPRegressor(length_scale=10.0, noise_variance=1e-4)
    assert clone(est).get_params() == est.get_params()
    est.fit(X, y)
    mu, sd = est.predict(X[:5], return_std=True)
    np.testing.assert_allclose(mu, y[:5], atol=0.05)
    assert np.all(sd >= 0)
    assert est.score(X, y) > 0.99
    zero = gp.MaternGPRegressor(prior_mean="zero").fit(X, y)
    assert zero.model_.mean == 0.0


def test_kernel_decays_far_away():
    p = gp.KernelParams(nu=1.5, length_scale=2.0, signal_variance=3.0)
    assert gp.kernel(p, [0, 0, 0], [200.0, 0, 0]) < 1e-30 * 3.0


def test_single_point_log_likelihood_closed_form():
    p = gp.KernelParams(signal_variance=1.0, noise_variance=0.0)
    m = gp.fit(p, [[1.0, 2.0, 3.0]], [4.0], mean=4.0)
    assert gp.log_marginal_likelihood(m) == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-14)


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1.01, 10))
def test_property_larger_residuals_lower_likelihood(seed, scale):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 20, size=(6, 3))
    r = rng.normal(size=6) + 0.1
    p = gp.KernelParams(length_scale=5.0, signal_variance=1.0, noise_variance=0.1)
    small = gp.log_marginal_likelihood(gp.fit(p, X, 2.0 + r, mean=2.0))
    large = gp.log_marginal_likelihood(gp.fit(p, X, 2.0 + scale * r, mean=2.0))
    assert large < small


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 20), nu=st.sampled_from([0.5, 1.5, 2.5]))
def test_property_gram_is_psd(seed, n, nu):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-10, 10, size=(n, 3))
    p = gp.KernelParams(nu=nu, length_scale=rng.uniform(0.5, 50), signal_variance=1.0)
    K = gp.kernel_matrix(p, X, X) + 1e-8 * np.eye(n)
    assert np.linalg.eigvalsh(K).min() >= -1e-10
