"""Exact Gaussian-process regression of UWB range over 3D position.

The covariance is a closed-form Matern kernel (nu in {1/2, 3/2, 5/2}) with an
explicit signal variance.  Fitting factorises ``K(P, P) + noise * I`` once
with Cholesky; the predictive equations are then::

    mean(p*) = m + k(p*, P) alpha,          alpha = (K + noise I)^-1 (y - m)
    var(p*)  = k(p*, p*) - v.v,             v     = L^-1 k(P, p*)
"""

from dataclasses import dataclass
from fractions import Fraction
import itertools
import logging

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_vector
from .exceptions import DimensionMismatch, InputError, NotPositiveDefinite

logger = logging.getLogger(__name__)

SUPPORTED_NU = (0.5, 1.5, 2.5)
_LOG_2PI = np.log(2.0 * np.pi)


def _as_nu(nu):
    nu = float(Fraction(str(nu)))
    if nu not in SUPPORTED_NU:
        raise InputError(f"nu must be one of {SUPPORTED_NU}, got {nu}")
    return nu


@dataclass(frozen=True)
class KernelParams:
    """Matern kernel hyperparameters (lengths in metres, variances in m^2)."""

    nu: float = 1.5
    length_scale: float = 30.0
    signal_variance: float = 1.0
    noise_variance: float = 0.09

    def __post_init__(self):
        object.__setattr__(self, "nu", _as_nu(self.nu))
        if not self.length_scale > 0:
            raise InputError("length_scale must be > 0")
        if not self.signal_variance >= 0:
            raise InputError("signal_variance must be >= 0")
        if not self.noise_variance >= 0:
            raise InputError("noise_variance must be >= 0")

    def replace(self, **kw):
        d = dict(
            nu=self.nu,
            length_scale=self.length_scale,
            signal_variance=self.signal_variance,
            noise_variance=self.noise_variance,
        )
        d.update(kw)
        return KernelParams(**d)


def matern_from_distance(params, r):
    """Kernel value as a function of Euclidean distance ``r`` (array-friendly)."""
    z = np.asarray(r, dtype=float) / params.length_scale
    if params.nu == 0.5:
        k = np.exp(-z)
    elif params.nu == 1.5:
        a = np.sqrt(3.0) * z
        k = (1.0 + a) * np.exp(-a)
    else:
        a = np.sqrt(5.0) * z
        k = (1.0 + a + a * a / 3.0) * np.exp(-a)
    return params.signal_variance * k


def kernel(params, p, p2):
    """Covariance between two single 3-vectors."""
    d = np.asarray(p, dtype=float) - np.asarray(p2, dtype=float)
    return float(matern_from_distance(params, np.sqrt(np.dot(d, d))))


def kernel_matrix(params, A, B=None):
    if B is None:
        B = A
    return matern_from_distance(params, cdist(A, B))


@dataclass(frozen=True, eq=False)
class GpModel:
    params: KernelParams
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    mean: float
    noise_variance: float  # effective value, after any jitter retry

    @property
    def n(self):
        return self.X.shape[0]

    def predict_mean(self, P):
        return predict_mean(self, P)

    def predict_var(self, P):
        return predict_var(self, P)


def _factor(K, noise):
    A = K.copy()
    A[np.diag_indices_from(A)] += noise
    return cholesky(A, lower=True, check_finite=False)


def fit(params, X, y, mean=0.0):
    """Factorise the training covariance and solve for the weight vector.

    On a failed factorisation the noise variance is raised once by
    ``1e-6 * signal_variance``; a second failure raises
    :class:`NotPositiveDefinite`.
    """
    X = check_points(X, "X")
    y = check_vector(y, name="y")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] < 1:
        raise InputError("need at least one training point")
    mean = float(mean)
    K = kernel_matrix(params, X)
    noise = params.noise_variance
    try:
        L = _factor(K, noise)
    except LinAlgError:
        noise = noise + 1e-6 * params.signal_variance
        logger.debug("cholesky failed, retrying with noise variance %g", noise)
        try:
            L = _factor(K, noise)
        except LinAlgError as exc:
            raise NotPositiveDefinite(
                "K + noise*I is not positive definite; noise variance too small "
                "or duplicate training points"
            ) from exc
    alpha = cho_solve((L, True), y - mean, check_finite=False)
    return GpModel(params, X, y, L, alpha, mean, noise)


def predict_mean(model, P):
    """Posterior mean; a single 3-vector gives a float, (n, 3) an array."""
    scalar = np.ndim(P) == 1
    P = check_points(P, "p_star")
    mu = model.mean + kernel_matrix(model.params, P, model.X) @ model.alpha
    return float(mu[0]) if scalar else mu


def predict_var(model, P):
    """Posterior variance, clamped at zero."""
    scalar = np.ndim(P) == 1
    P = check_points(P, "p_star")
    Ks = kernel_matrix(model.params, model.X, P)
    v = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
    var = model.params.signal_variance - np.einsum("ij,ij->j", v, v)
    var = np.maximum(var, 0.0)
    return float(var[0]) if scalar else var


def log_marginal_likelihood(model):
    yc = model.y - model.mean
    return float(
        -0.5 * yc @ model.alpha
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * model.n * _LOG_2PI
    )


def default_params(X, nu=1.5):
    """Fixed defaults: 30 m length scale, signal std a quarter of the data extent."""
    X = np.asarray(X, dtype=float)
    extent = float(np.linalg.norm(X.max(axis=0) - X.min(axis=0))) if len(X) else 1.0
    return KernelParams(
        nu=nu,
        length_scale=30.0,
        signal_variance=max((0.25 * extent) ** 2, 1e-6),
        noise_variance=0.3**2,
    )


def grid_search(X, y, grid, mean=0.0, base=None):
    """Pick hyperparameters by log marginal likelihood over a Cartesian grid.

    ``grid`` maps KernelParams field names to candidate lists.  Returns the
    best ``(params, lml)``; candidates that fail to factorise are skipped.
    """
    base = base or default_params(X)
    keys = sorted(grid)
    best = None
    for values in itertools.product(*(grid[k] for k in keys)):
        params = base.replace(**dict(zip(keys, values)))
        try:
            lml = log_marginal_likelihood(fit(params, X, y, mean))
        except NotPositiveDefinite:
            continue
        if best is None or lml > best[1]:
            best = (params, lml)
    if best is None:
        raise NotPositiveDefinite("no grid candidate could be factorised")
    return best


class MaternGPRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn style wrapper around :func:`fit`.

    Parameters
    ----------
    nu, length_scale, signal_variance, noise_variance
        Kernel hyperparameters; ``signal_variance=None`` uses the
        data-extent default at fit time.
    prior_mean : {"empirical", "zero"} or float
        Constant prior mean.  ``"empirical"`` uses the mean training target.
    """

    def __init__(
        self,
        nu=1.5,
        length_scale=30.0,
        signal_variance=None,
        noise_variance=0.09,
        prior_mean="empirical",
    ):
        self.nu = nu
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.prior_mean = prior_mean

    def _resolve_mean(self, y):
        if self.prior_mean == "empirical":
            return float(np.mean(y))
        if self.prior_mean == "zero":
            return 0.0
        return float(self.prior_mean)

    def fit(self, X, y):
        X = check_points(X)
        y = check_vector(y, X.shape[0])
        sv = self.signal_variance
        if sv is None:
            sv = default_params(X).signal_variance
        params = KernelParams(self.nu, self.length_scale, sv, self.noise_variance)
        self.model_ = fit(params, X, y, self._resolve_mean(y))
        self.n_features_in_ = 3
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        mu = predict_mean(self.model_, check_points(X))
        if return_std:
            return mu, np.sqrt(predict_var(self.model_, check_points(X)))
        return mu

    def log_marginal_likelihood(self):
        check_is_fitted(self, "model_")
        return log_marginal_likelihood(self.model_)
