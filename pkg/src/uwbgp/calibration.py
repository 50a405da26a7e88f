"""Anchor self-calibration by iterative Gaussian-process range regression.

Each anchor is treated independently.  A GP maps tag position to measured
range; the anchor sits where that range field is smallest.  The search is
coarse to fine:

1. draw a range-stratified random subsample of the anchor's samples near
   the current search box,
2. fit the GP,
3. evaluate the predicted range on a regular lattice over the box,
4. average the ``top_k`` lattice points with the smallest prediction,
5. re-centre the box there, shrink it and halve the lattice spacing.

A Gauss-Newton trilateration (:func:`trilaterate_ls`) is provided as the
classic least-squares baseline.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import time

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import gp
from ._validation import check_points, check_vector
from .exceptions import (
    DegenerateBox,
    DegenerateGeometry,
    EmptyInput,
    GpFitFailure,
    InputError,
    NonConvergence,
    NotPositiveDefinite,
    TooFewSamples,
    UwbGpError,
)
from .spline import InterpolatedSamples

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationConfig:
    """Controls for :func:`calibrate_anchor`.

    ``grid_resolution=None`` uses a twentieth of the largest initial box
    extent.  ``signal_variance=None`` uses the data-extent default from
    :func:`uwbgp.gp.default_params`.  ``hyper_grid`` (field name -> list of
    candidates) turns on a log-marginal-likelihood grid search, done once on
    the first training subsample.
    """

    grid_resolution: float = None
    top_k: int = 10
    max_iterations: int = 8
    shrink_factor: float = 0.5
    layers: int = 10
    samples_per_layer: int = 60
    convergence_tol: float = 0.05
    min_samples: int = 30
    nu: float = 1.5
    length_scale: float = 30.0
    signal_variance: float = None
    noise_variance: float = 0.09
    prior_mean: str = "empirical"
    hyper_grid: dict = None
    outlier_filter: bool = True
    outlier_quantile: float = 0.995
    local_margin: float = 60.0
    planar_mode: str = "auto"
    planar_threshold: float = 1.0
    anchor_height: float = None
    height_uncertainty: float = 10.0
    height_fit_radius: float = 20.0

    def __post_init__(self):
        if self.top_k < 1:
            raise InputError("top_k must be >= 1")
        if not 0.0 < self.shrink_factor < 1.0:
            raise InputError("shrink_factor must lie in (0, 1)")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if self.layers < 1 or self.samples_per_layer < 1:
            raise InputError("layers and samples_per_layer must be >= 1")
        if self.prior_mean not in ("empirical", "zero"):
            raise InputError("prior_mean must be 'empirical' or 'zero'")
        if self.planar_mode not in ("auto", "on", "off"):
            raise InputError("planar_mode must be 'auto', 'on' or 'off'")
        if self.grid_resolution is not None and not self.grid_resolution > 0:
            raise InputError("grid_resolution must be > 0")

    @classmethod
    def strict_paper(cls, **kw):
        """Zero prior mean and no outlier pre-filter."""
        return cls(prior_mean="zero", outlier_filter=False, **kw)


@dataclass(frozen=True)
class IterationRecord:
    lo: np.ndarray
    hi: np.ndarray
    resolution: float
    best: np.ndarray
    estimate: np.ndarray
    pred_range: float
    n_train: int
    pred_std: float = float("nan")


@dataclass(frozen=True)
class AnchorEstimate:
    anchor_id: int
    position: np.ndarray
    iterations: list
    converged: bool
    n_samples_used: int
    residual_rms: float
    planar: bool = False
    kernel: gp.KernelParams = None
    prior_mean: float = 0.0
    elapsed: float = 0.0

    @property
    def final_resolution(self):
        return self.iterations[-1].resolution


@dataclass(frozen=True)
class CalibrationFailure:
    anchor_id: int
    error: str
    message: str
    n_samples: int

    converged = False


# -- building blocks ----------------------------------------------------------


def stratified_subsample(samples, layers, per_layer, seed=0, priority=None):
    """Range-stratified subsample without replacement.

    Samples are split into ``layers`` equal-width bins of measured range and
    up to ``per_layer`` are drawn uniformly from each bin.  The result keeps
    the original ordering.  ``seed`` may be an int or a numpy Generator.

    ``priority`` (one uniform random key per sample) replaces the draw: each
    bin keeps its ``per_layer`` lowest keys.  Reusing the same keys over
    overlapping pools gives overlapping subsamples (common random numbers).
    """
    n = len(samples)
    if n == 0:
        raise EmptyInput("no samples to subsample")
    if layers < 1:
        raise InputError("layers must be >= 1")
    rng = np.random.default_rng(seed)
    r = samples.range
    lo, hi = float(r.min()), float(r.max())
    if layers == 1 or hi == lo:
        bins = np.zeros(n, dtype=int)
    else:
        bins = np.minimum(((r - lo) / (hi - lo) * layers).astype(int), layers - 1)
    chosen = []
    for b in range(layers):
        idx = np.flatnonzero(bins == b)
        if idx.size == 0:
            continue
        if idx.size > per_layer:
            if priority is None:
                idx = rng.choice(idx, size=per_layer, replace=False)
            else:
                idx = idx[np.argsort(priority[idx], kind="stable")[:per_layer]]
        chosen.append(idx)
    keep = np.sort(np.concatenate(chosen))
    return samples.select(keep)


def cuboid_grid(lo, hi, resolution):
    """Regular lattice over an axis-aligned box, corners included.

    Each axis gets ``floor(extent / resolution) + 1`` evenly spaced points
    spanning the full extent; a zero z extent yields a single plane.
    """
    lo = np.asarray(lo, dtype=float).reshape(3)
    hi = np.asarray(hi, dtype=float).reshape(3)
    if not resolution > 0:
        raise InputError("resolution must be > 0")
    ext = hi - lo
    if np.any(ext[:2] <= 0) or ext[2] < 0:
        raise DegenerateBox(f"box [{lo}, {hi}] needs positive x/y extent and non-negative z extent")
    axes = []
    for k in range(3):
        m = int(np.floor(ext[k] / resolution + 1e-9)) + 1
        axes.append(np.linspace(lo[k], hi[k], m) if m > 1 else np.array([lo[k]]))
    g = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in g])


def _check_geometry(P):
    c = P - P.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("sample positions are collinear; anchor is unobservable")
    return sv


def _outlier_mask(samples, quantile):
    """Keep mask dropping ranges far from their spatial nearest neighbour's."""
    if len(samples) < 3:
        return np.ones(len(samples), dtype=bool)
    tree = cKDTree(samples.position)
    _, nn = tree.query(samples.position, k=2)
    dev = np.abs(samples.range - samples.range[nn[:, 1]])
    return dev <= np.quantile(dev, quantile)


def _kernel_for(cfg, X):
    base = gp.default_params(X, nu=cfg.nu)
    sv = base.signal_variance if cfg.signal_variance is None else cfg.signal_variance
    return gp.KernelParams(cfg.nu, cfg.length_scale, sv, cfg.noise_variance)


def _predict_chunked(model, G, chunk=20000):
    return np.concatenate([gp.predict_mean(model, G[i : i + chunk]) for i in range(0, len(G), chunk)])


def _near_box(samples, lo, hi, margin):
    inside = np.all((samples.position >= lo - margin) & (samples.position <= hi + margin), axis=1)
    return inside


def _fit_height(samples, position, tag_z, cfg):
    """Anchor height for a planar trajectory.

    The range minimum pins the horizontal position only; the height offset
    ``h`` is fitted to ``range ~ sqrt(rho^2 + h^2)`` over samples within
    ``height_fit_radius`` of the horizontal estimate (robust soft-L1 loss),
    then placed above or below the tag plane according to ``anchor_height``.
    """
    rho = np.linalg.norm(samples.position[:, :2] - position[:2], axis=1)
    near = rho <= cfg.height_fit_radius
    if near.sum() < 3:
        near = rho <= np.sort(rho)[min(len(rho), cfg.min_samples) - 1]
    rho, r = rho[near], samples.range[near]
    h0 = float(np.sqrt(max(np.median(r**2 - rho**2), 0.0)))
    fit = least_squares(
        lambda h: np.sqrt(rho**2 + h[0] ** 2) - r, [max(h0, 0.1)], loss="soft_l1", f_scale=0.5
    )
    h = abs(float(fit.x[0]))
    above = cfg.anchor_height is None or cfg.anchor_height >= tag_z
    z = tag_z + (h if above else -h)
    if cfg.anchor_height is not None:
        z = float(np.clip(z, cfg.anchor_height - cfg.height_uncertainty,
                          cfg.anchor_height + cfg.height_uncertainty))
    return z


def calibrate_anchor(samples, cfg=None, seed=0, anchor_id=None):
    """Estimate one anchor position from its paired range samples.

    Raises :class:`TooFewSamples`, :class:`DegenerateGeometry` or
    :class:`GpFitFailure`.
    """
    cfg = cfg or CalibrationConfig()
    t_start = time.perf_counter()
    n = len(samples)
    if anchor_id is None:
        anchor_id = int(samples.anchor_id[0]) if n else -1
    if n < cfg.min_samples:
        raise TooFewSamples(f"anchor {anchor_id}: {n} samples, need {cfg.min_samples}")
    _check_geometry(samples.position)

    work = samples
    if cfg.outlier_filter:
        work = samples.select(_outlier_mask(samples, cfg.outlier_quantile))

    P = work.position
    z_extent = float(np.ptp(P[:, 2]))
    planar = cfg.planar_mode == "on" or (cfg.planar_mode == "auto" and z_extent < cfg.planar_threshold)
    rmax = float(work.range.max())
    lo = P.min(axis=0) - rmax
    hi = P.max(axis=0) + rmax
    tag_z = float(P[:, 2].mean())
    if planar:
        lo[2] = hi[2] = tag_z
    res = cfg.grid_resolution or float((hi - lo).max()) / 20.0

    # one random key per sample, shared by every iteration's draw
    priority = np.random.default_rng(seed).random(len(work))
    params = None
    center = (lo + hi) / 2.0
    history = []
    converged = False
    mean = 0.0
    for it in range(cfg.max_iterations):
        half = (hi - lo) / 2.0
        margin = np.maximum(half, cfg.local_margin)
        near = _near_box(work, lo, hi, margin)
        if near.sum() < cfg.min_samples:
            near[:] = True
        train = stratified_subsample(work.select(near), cfg.layers, cfg.samples_per_layer,
                                     priority=priority[near])
        X, y = train.position, train.range
        mean = float(np.mean(y)) if cfg.prior_mean == "empirical" else 0.0
        if params is None:
            params = _kernel_for(cfg, work.position)
            if cfg.hyper_grid:
                params, _ = gp.grid_search(X, y, cfg.hyper_grid, mean=mean, base=params)
        try:
            model = gp.fit(params, X, y, mean)
        except NotPositiveDefinite as exc:
            raise GpFitFailure(f"anchor {anchor_id}: {exc}") from exc

        G = cuboid_grid(lo, hi, res)
        pred = _predict_chunked(model, G)
        k = min(cfg.top_k, len(G))
        top = np.argpartition(pred, k - 1)[:k] if k < len(G) else np.arange(len(G))
        best = G[top[np.argmin(pred[top])]]
        est = G[top].mean(axis=0)
        pred_est = float(gp.predict_mean(model, est))
        std_est = float(np.sqrt(gp.predict_var(model, est)))
        history.append(IterationRecord(lo.copy(), hi.copy(), res, best, est, pred_est, len(train), std_est))
        move = float(np.linalg.norm(est - center))
        center = est
        # a stationary centre means nothing until the lattice can resolve the tolerance
        if move < cfg.convergence_tol and res <= cfg.convergence_tol:
            converged = True
            break
        if it == cfg.max_iterations - 1:
            break
        # shrink around the new centre, staying inside the current box
        new_half = half * cfg.shrink_factor
        nlo = np.clip(center - new_half, lo, hi - 2 * new_half)
        lo, hi = nlo, nlo + 2 * new_half
        res /= 2.0

    last = history[-1]
    position = last.estimate.copy()
    if last.pred_range > float(gp.predict_mean(model, last.best)):
        # never report a point the model ranks worse than a lattice node
        position = last.best.copy()
    if planar:
        position[2] = _fit_height(work, position, tag_z, cfg)
    resid = samples.range - np.linalg.norm(samples.position - position, axis=1)
    return AnchorEstimate(
        anchor_id=int(anchor_id),
        position=position,
        iterations=history,
        converged=bool(converged),
        n_samples_used=len(work),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        planar=planar,
        kernel=params,
        prior_mean=mean,
        elapsed=time.perf_counter() - t_start,
    )


def _calibrate_one(args):
    aid, sub, cfg, seed = args
    try:
        return calibrate_anchor(sub, cfg, seed=seed, anchor_id=aid)
    except UwbGpError as exc:
        return CalibrationFailure(aid, type(exc).__name__, str(exc), len(sub))


def calibrate_all(samples, cfg=None, seed=0, jobs=1, anchor_ids=None):
    """Calibrate every anchor present in ``samples``.

    Per-anchor errors are captured as :class:`CalibrationFailure` entries
    instead of aborting.  ``anchor_ids`` adds anchors that may have no
    samples at all, so they are reported too.  Each anchor uses the seed
    ``(seed, anchor_id)`` so results do not depend on ``jobs``.
    """
    cfg = cfg or CalibrationConfig()
    ids = sorted(set(np.unique(samples.anchor_id).tolist()) | set(anchor_ids or ()))
    tasks = [(aid, samples.for_anchor(aid), cfg, [seed, aid]) for aid in ids]
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_calibrate_one, tasks))
    else:
        results = [_calibrate_one(t) for t in tasks]
    return {r.anchor_id: r for r in results}


def trilaterate_ls(samples, max_iter=100, tol=1e-10):
    """Gauss-Newton fit of ``sum (||p_i - a|| - r_i)^2`` from the centroid.

    Raises :class:`DegenerateGeometry` for coplanar (mirror-ambiguous) or
    collinear sample positions, :class:`NonConvergence` after ``max_iter``.
    """
    P = check_points(samples.position, "positions")
    r = check_vector(samples.range, P.shape[0], "range")
    if P.shape[0] < 4:
        raise TooFewSamples("trilateration needs at least 4 samples")
    sv = _check_geometry(P)
    if sv[2] <= 1e-6 * sv[0]:
        raise DegenerateGeometry("sample positions are coplanar; anchor has a mirror ambiguity")
    a = P.mean(axis=0)
    for _ in range(max_iter):
        diff = a - P
        d = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
        J = diff / d[:, None]
        res = d - r
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        a = a + step
        if np.linalg.norm(step) <= tol * (1.0 + np.linalg.norm(a)):
            return a
    raise NonConvergence(f"Gauss-Newton did not converge in {max_iter} iterations")


class GPAnchorCalibrator(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`calibrate_anchor` for one anchor.

    ``fit(X, y)`` takes tag positions ``X`` (n, 3) and measured ranges ``y``;
    the estimate lands in ``anchor_position_``.  ``predict(X)`` returns the
    geometric range from each position to the estimated anchor, so ``score``
    is the R^2 of the range fit.
    """

    def __init__(self, config=None, seed=0):
        self.config = config
        self.seed = seed

    def fit(self, X, y):
        X = check_points(X)
        y = check_vector(y, X.shape[0])
        samples = InterpolatedSamples(np.arange(len(y), dtype=float), np.zeros(len(y), int), y, X)
        self.estimate_ = calibrate_anchor(samples, self.config, seed=self.seed, anchor_id=0)
        self.anchor_position_ = self.estimate_.position
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "anchor_position_")
        return np.linalg.norm(check_points(X) - self.anchor_position_, axis=1)


class LeastSquaresAnchor(RegressorMixin, BaseEstimator):
    """Trilateration baseline with the same interface as :class:`GPAnchorCalibrator`."""

    def __init__(self, max_iter=100):
        self.max_iter = max_iter

    def fit(self, X, y):
        X = check_points(X)
        y = check_vector(y, X.shape[0])
        samples = InterpolatedSamples(np.arange(len(y), dtype=float), np.zeros(len(y), int), y, X)
        self.anchor_position_ = trilaterate_ls(samples, max_iter=self.max_iter)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "anchor_position_")
        return np.linalg.norm(check_points(X) - self.anchor_position_, axis=1)
