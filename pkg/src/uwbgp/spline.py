"""Uniform cumulative B-spline trajectories.

A trajectory is stored as control positions on a uniform time grid
``t_i = t0 + i * dt``.  On the knot interval ``[t_i, t_{i+1})`` the position
is blended from controls ``i .. i+N-1`` in cumulative form::

    p(t) = p_i + sum_{j=1}^{N-1} lam_j(s) * (p_{i+j} - p_{i+j-1})
    s    = (t - t_i) / dt
    lam  = Bc @ [1, s, ..., s^(N-1)]

where ``Bc`` is the row-wise cumulative sum (from the bottom) of the standard
uniform B-spline basis matrix of order ``N``.  With ``M + 1`` controls the
valid query domain is the half-open interval ``[t_0, t_{M-N+2})``.
"""

from dataclasses import dataclass, field
from math import ceil

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator

from ._validation import check_points, check_quaternions, check_vector
from .exceptions import (
    DegenerateSystem,
    InputError,
    NonMonotoneTimestamps,
    NonUniformKnots,
    OutOfDomain,
    TooFewControlPoses,
)

MIN_ORDER = 2
MAX_ORDER = 5


def basis_matrix(order):
    """Standard uniform B-spline basis matrix of the given order.

    Row ``j`` holds the polynomial coefficients (ascending powers of ``s``)
    of the weight given to control ``i + j`` on segment ``i``.  Built from the
    Cox-de Boor recursion on the cardinal B-spline, so nothing is hard-coded.
    """
    if order < 1:
        raise InputError("order must be >= 1")
    # pieces[m] is the cardinal B-spline of the current order on [m, m+1),
    # written in the local variable u = x - m.
    pieces = [Polynomial([1.0])]
    for k in range(2, order + 1):
        u = Polynomial([0.0, 1.0])
        new = []
        for m in range(k):
            left = pieces[m] if m < len(pieces) else Polynomial([0.0])
            right = pieces[m - 1] if 0 <= m - 1 < len(pieces) else Polynomial([0.0])
            new.append(((u + m) * left + (k - u - m) * right) / (k - 1))
        pieces = new
    B = np.zeros((order, order))
    for j in range(order):
        coef = pieces[order - 1 - j].coef
        B[j, : len(coef)] = coef[:order]
    return B


def cumulative_basis_matrix(order):
    B = basis_matrix(order)
    return np.cumsum(B[::-1], axis=0)[::-1]


@dataclass(frozen=True)
class ControlPose:
    t: float
    p: np.ndarray
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        q = np.asarray(self.q, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InputError("control quaternion must have unit norm (within 1e-9)")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class InterpolatedSamples:
    """Range measurements paired with interpolated tag positions (columnar)."""

    t: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    position: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    def select(self, mask):
        return InterpolatedSamples(
            self.t[mask], self.anchor_id[mask], self.range[mask], self.position[mask]
        )

    def for_anchor(self, anchor_id):
        return self.select(self.anchor_id == anchor_id)

    @classmethod
    def from_arrays(cls, t, anchor_id, ranges, position):
        t = check_vector(t, name="t")
        n = t.shape[0]
        ranges = check_vector(ranges, n, name="range")
        if np.any(ranges < 0):
            raise InputError("ranges must be non-negative")
        anchor_id = np.asarray(anchor_id, dtype=int).ravel()
        if anchor_id.shape[0] != n:
            raise InputError("anchor_id length does not match t")
        position = check_points(position, "position") if n else np.zeros((0, 3))
        return cls(t, anchor_id, ranges, position)


class PoseSpline:
    """Immutable uniform cumulative B-spline over control positions.

    Orientation, when present, is carried as a fitted accumulated
    rotation-vector curve plus the raw input quaternions it was fitted to;
    :meth:`orientation_at` charts it about the chronologically nearest input.
    """

    def __init__(self, t0, knot_spacing, control_positions, order=4, _orientation=None):
        if not MIN_ORDER <= order <= MAX_ORDER:
            raise InputError(f"order must be in [{MIN_ORDER}, {MAX_ORDER}], got {order}")
        if not knot_spacing > 0:
            raise NonUniformKnots("knot spacing must be positive")
        P = np.array(control_positions, dtype=float)
        if P.ndim != 2 or P.shape[1] != 3:
            raise InputError("control positions must have shape (M+1, 3)")
        if P.shape[0] < order:
            raise TooFewControlPoses(
                f"order {order} needs at least {order} control poses, got {P.shape[0]}"
            )
        P.setflags(write=False)
        self.order = int(order)
        self.knot_spacing = float(knot_spacing)
        self.t0 = float(t0)
        self.control_positions = P
        self.basis = basis_matrix(self.order)
        self.cumulative_basis = cumulative_basis_matrix(self.order)
        self.n_segments = P.shape[0] - self.order + 1
        self._orientation = _orientation

    @property
    def control_times(self):
        return self.t0 + self.knot_spacing * np.arange(self.control_positions.shape[0])

    @property
    def domain(self):
        """Half-open valid query interval ``(t_lo, t_hi)``."""
        return self.t0, self.t0 + self.n_segments * self.knot_spacing

    def in_domain(self, t):
        lo, hi = self.domain
        t = np.asarray(t, dtype=float)
        return (t >= lo) & (t < hi)

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if not np.all(self.in_domain(t)):
            lo, hi = self.domain
            bad = t[~self.in_domain(t)][0]
            raise OutOfDomain(f"t={bad!r} outside spline domain [{lo!r}, {hi!r})")
        u = (t - self.t0) / self.knot_spacing
        i = np.clip(np.floor(u).astype(int), 0, self.n_segments - 1)
        s = np.clip(u - i, 0.0, np.nextafter(1.0, 0.0))
        return i, s

    def _lambdas(self, s):
        powers = s[:, None] ** np.arange(self.order)[None, :]
        return powers @ self.cumulative_basis.T

    def blending_coefficients(self, t):
        """Return ``(i, lam)`` for a scalar timestamp ``t``."""
        i, s = self._locate(t)
        return int(i[0]), self._lambdas(s)[0]

    def position_at(self, t):
        """Interpolated position(s); scalar ``t`` gives shape (3,), arrays (n, 3)."""
        scalar = np.ndim(t) == 0
        i, s = self._locate(t)
        out = self._evaluate(self.control_positions, i, self._lambdas(s))
        return out[0] if scalar else out

    @staticmethod
    def _evaluate(C, i, lam):
        out = C[i].copy()
        for j in range(1, lam.shape[1]):
            out += lam[:, j : j + 1] * (C[i + j] - C[i + j - 1])
        return out

    @property
    def has_orientation(self):
        return self._orientation is not None

    def orientation_at(self, t):
        """Interpolated unit quaternion(s) (qx, qy, qz, qw)."""
        if self._orientation is None:
            raise InputError("spline carries no orientation")
        scalar = np.ndim(t) == 0
        i, s = self._locate(t)
        ctrl, t_in, r_in, q_in = self._orientation
        r = self._evaluate(ctrl, i, self._lambdas(s))
        tq = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.searchsorted(t_in, tq), 1, len(t_in) - 1)
        k = np.where(np.abs(t_in[k - 1] - tq) <= np.abs(t_in[k] - tq), k - 1, k)
        q = (Rotation.from_quat(q_in[k]) * Rotation.from_rotvec(r - r_in[k])).as_quat()
        return q[0] if scalar else q


def make_spline(control, order=4):
    """Build a spline from uniformly spaced :class:`ControlPose` objects."""
    control = list(control)
    if len(control) < order:
        raise TooFewControlPoses(
            f"order {order} needs at least {order} control poses, got {len(control)}"
        )
    times = np.array([c.t for c in control], dtype=float)
    if len(times) > 1:
        gaps = np.diff(times)
        dt = (times[-1] - times[0]) / (len(times) - 1)
        if not dt > 0 or np.any(np.abs(gaps - dt) > 1e-6 * dt):
            raise NonUniformKnots("control timestamps must be strictly increasing and uniform")
    else:
        dt = 1.0
    return PoseSpline(times[0], dt, [c.p for c in control], order=order)


def _design_rows(spline_like, t):
    """Segment index and standard (non-cumulative) basis weights per timestamp."""
    t0, dt, n_seg, order = spline_like
    u = (t - t0) / dt
    i = np.clip(np.floor(u).astype(int), 0, n_seg - 1)
    s = np.clip(u - i, 0.0, 1.0)
    powers = s[:, None] ** np.arange(order)[None, :]
    return i, powers @ basis_matrix(order).T


def _banded_lstsq(i, W, Y, n_ctrl, order):
    """Solve min ||A C - Y|| where row r of A has W[r] at columns i[r]..i[r]+N-1."""
    ab = np.zeros((order, n_ctrl))
    rhs = np.zeros((n_ctrl, Y.shape[1]))
    for a in range(order):
        np.add.at(rhs, i + a, W[:, a : a + 1] * Y)
        for b in range(a, order):
            # upper banded storage: ab[u + row - col, col] with u = order - 1
            np.add.at(ab[order - 1 + a - b], i + b, W[:, a] * W[:, b])
    try:
        factor = cholesky_banded(ab, lower=False)
    except LinAlgError as exc:
        raise DegenerateSystem("normal equations are rank deficient") from exc
    diag = factor[-1]
    if diag.min() ** 2 < 1e-12 * max(diag.max() ** 2, 1e-300):
        raise DegenerateSystem("normal equations are numerically rank deficient")
    return cho_solve_banded((factor, False), rhs)


def _accumulated_rotvec(q):
    """Continuous rotation-vector curve whose increments match the input."""
    rots = Rotation.from_quat(q)
    inc = (rots[:-1].inv() * rots[1:]).as_rotvec()
    return np.vstack([np.zeros(3), np.cumsum(inc, axis=0)])


def fit_spline(t, positions, quaternions=None, knot_spacing=0.1, order=4):
    """Least-squares fit of a uniform cumulative B-spline to timestamped poses.

    Returns ``(spline, residual_rms)``.  Controls start at the first
    timestamp and enough are added for the last timestamp to close the final
    segment, so it sits exactly on the (open) domain end.  Raises
    :class:`DegenerateSystem` if some control is not pinned down by the data.
    """
    t = check_vector(t, name="t")
    positions = check_points(positions, "positions")
    if positions.shape[0] != t.shape[0]:
        raise InputError("positions and timestamps differ in length")
    if not MIN_ORDER <= order <= MAX_ORDER:
        raise InputError(f"order must be in [{MIN_ORDER}, {MAX_ORDER}], got {order}")
    if t.shape[0] < order + 1:
        raise TooFewControlPoses(f"need at least {order + 1} poses, got {t.shape[0]}")
    if np.any(np.diff(t) <= 0):
        raise NonMonotoneTimestamps("pose timestamps must be strictly increasing")
    if not knot_spacing > 0:
        raise NonUniformKnots("knot spacing must be positive")

    t0 = t[0]
    # the last pose closes the final segment (s = 1) rather than opening a new one
    n_seg = max(int(ceil((t[-1] - t0) / knot_spacing - 1e-9)), 1)
    n_ctrl = n_seg + order - 1
    i, W = _design_rows((t0, knot_spacing, n_seg, order), t)
    C = _banded_lstsq(i, W, positions, n_ctrl, order)

    orientation = None
    if quaternions is not None:
        q = check_quaternions(quaternions, t.shape[0])
        r = _accumulated_rotvec(q)
        R = _banded_lstsq(i, W, r, n_ctrl, order)
        orientation = (R, t.copy(), r, q)

    spline = PoseSpline(t0, knot_spacing, C, order=order, _orientation=orientation)
    fitted = sum(W[:, a : a + 1] * C[i + a] for a in range(order))
    resid = fitted - positions
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return spline, rms


def pair_samples(spline, t, anchor_id, ranges, clock_offset=0.0):
    """Attach interpolated tag positions to range measurements.

    ``clock_offset`` is added to the range timestamps before lookup.  Returns
    ``(samples, n_dropped)``; measurements outside the spline domain are
    dropped and counted.  Output is sorted by time, then anchor id.
    """
    t = np.asarray(t, dtype=float).ravel() + clock_offset
    anchor_id = np.asarray(anchor_id, dtype=int).ravel()
    ranges = np.asarray(ranges, dtype=float).ravel()
    if not (t.shape == anchor_id.shape == ranges.shape):
        raise InputError("t, anchor_id and range must have equal length")
    keep = spline.in_domain(t)
    t, anchor_id, ranges = t[keep], anchor_id[keep], ranges[keep]
    order = np.lexsort((anchor_id, t))
    t, anchor_id, ranges = t[order], anchor_id[order], ranges[order]
    pos = spline.position_at(t) if t.size else np.zeros((0, 3))
    samples = InterpolatedSamples.from_arrays(t, anchor_id, ranges, pos)
    return samples, int((~keep).sum())


class SplineTrajectory(BaseEstimator):
    """Estimator wrapper: ``fit(t, positions)`` then ``predict(t)``.

    Parameters
    ----------
    knot_spacing : float
        Uniform knot spacing in seconds.
    order : int
        B-spline order (4 is cubic).
    """

    def __init__(self, knot_spacing=0.1, order=4):
        self.knot_spacing = knot_spacing
        self.order = order

    def fit(self, X, y, quaternions=None):
        self.spline_, self.residual_rms_ = fit_spline(
            np.asarray(X, dtype=float).ravel(), y, quaternions,
            knot_spacing=self.knot_spacing, order=self.order,
        )
        return self

    def predict(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "spline_")
        return self.spline_.position_at(np.asarray(X, dtype=float).ravel())
