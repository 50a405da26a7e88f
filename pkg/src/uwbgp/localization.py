"""Range-gated one-shot localization over a prior descriptor store.

Around every calibrated anchor ``a_j`` the plane is cut into annular zones of
radii ``r_i = i * zone_width``.  A prior descriptor at ``p`` belongs to zone
``i`` of anchor ``j`` when::

    r_{i-1} - delta <= ||p - a_j|| < r_i + delta          (r_0 = 0)

so neighbouring zones overlap by ``2 * delta``.  At query time the measured
distance ``d_j`` selects the zones whose expanded annulus contains it, and
only descriptors in those zones are compared against the query.  Several
reporting anchors are combined by intersection; an empty intersection falls
back to the union.
"""

from dataclasses import dataclass
import time

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .exceptions import DimensionMismatch, EmptyAnchors, InputError, UnknownAnchorId

SUCCESS_DISTANCE = 8.5  # metres, strict
SUCCESS_ANGLE_DEG = 10.0  # degrees, strict


@dataclass(frozen=True)
class Descriptor:
    id: int
    vector: np.ndarray
    position: np.ndarray
    quaternion: np.ndarray = None


@dataclass(frozen=True, eq=False)
class DescriptorStore:
    """Columnar collection of prior descriptors sharing one dimension."""

    ids: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if self.positions.shape != (n, 3) or self.quaternions.shape != (n, 4):
            raise DimensionMismatch("store pose arrays do not match the number of ids")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n:
            raise DimensionMismatch("store vectors must have shape (n, D)")
        if len(np.unique(self.ids)) != n:
            raise InputError("descriptor ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @classmethod
    def from_descriptors(cls, descriptors):
        descriptors = list(descriptors)
        if not descriptors:
            raise InputError("empty descriptor list")
        dims = {np.asarray(d.vector).shape for d in descriptors}
        if len(dims) != 1:
            raise DimensionMismatch("descriptor vectors differ in dimension")
        q = [d.quaternion if d.quaternion is not None else (0, 0, 0, 1) for d in descriptors]
        return cls(
            np.array([d.id for d in descriptors], dtype=int),
            np.array([d.position for d in descriptors], dtype=float).reshape(-1, 3),
            np.array(q, dtype=float).reshape(-1, 4),
            np.array([d.vector for d in descriptors], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class ZoneIndex:
    store: DescriptorStore
    anchors: dict  # id -> (3,) position
    radii: dict  # id -> (n_zones,) ascending outer radii
    delta: float
    buckets: dict  # (anchor_id, zone 1..n) -> sorted row indices
    unzoned: np.ndarray
    tau: float
    # per-anchor rows sorted by distance, and the sorted distances
    _order: dict
    _sorted_dist: dict
    _dist: np.ndarray  # (n, n_anchors) in anchor-id order
    _col: dict

    def ids(self, rows):
        return self.store.ids[rows]


@dataclass(frozen=True)
class Candidates:
    rows: np.ndarray
    fallback: bool
    anchors_used: tuple

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True)
class Match:
    id: int
    score: float
    position: np.ndarray
    quaternion: np.ndarray
    n_candidates: int
    fallback: bool = False


def _nn_distance_percentile(V, q=95.0, k=16):
    """Percentile of distances to the nearest *distinct* descriptor.

    Exact copies (repeated places) are skipped; counting them would put the
    threshold at zero for a fully repetitive store.
    """
    if len(V) < 2:
        return np.inf
    k = min(k, len(V))
    d, _ = cKDTree(V).query(V, k=k)
    scale = max(float(np.abs(V).max()), 1.0)
    d = np.where(d > 1e-12 * scale, d, np.inf)
    nn = d.min(axis=1)
    nn = nn[np.isfinite(nn)]
    return float(np.percentile(nn, q)) if nn.size else np.inf


def build_index(store, anchors, zone_width=50.0, n_zones=10, delta=10.0, tau="auto"):
    """Bucket every descriptor into the delta-expanded zones of each anchor.

    ``tau`` is the acceptance threshold on descriptor distance; ``"auto"``
    takes the 95th percentile of nearest-distinct-neighbour distances inside
    the store.
    Descriptors outside every anchor's outermost expanded radius are listed
    in ``unzoned``.
    """
    if not anchors:
        raise EmptyAnchors("cannot build a zone index without anchors")
    if n_zones < 1 or not zone_width > 0 or delta < 0:
        raise InputError("need n_zones >= 1, zone_width > 0 and delta >= 0")
    anchors = {int(k): np.asarray(v, dtype=float).reshape(3) for k, v in sorted(anchors.items())}
    radii = {k: zone_width * np.arange(1, n_zones + 1) for k in anchors}
    P = store.positions
    col = {k: c for c, k in enumerate(anchors)}
    dist = np.column_stack([np.linalg.norm(P - a, axis=1) for a in anchors.values()])
    buckets = {}
    order, sorted_dist = {}, {}
    zoned = np.zeros(len(store), dtype=bool)
    for k, c in col.items():
        d = dist[:, c]
        inner = np.concatenate([[0.0], radii[k][:-1]])
        for i in range(n_zones):
            mask = (d >= inner[i] - delta) & (d < radii[k][i] + delta)
            buckets[(k, i + 1)] = np.flatnonzero(mask)
            zoned |= mask
        o = np.argsort(d, kind="stable")
        order[k] = o
        sorted_dist[k] = d[o]
    if tau == "auto":
        tau = _nn_distance_percentile(store.vectors)
    tau = np.inf if tau is None else float(tau)
    return ZoneIndex(store, anchors, radii, float(delta), buckets, np.flatnonzero(~zoned), tau,
                     order, sorted_dist, dist, col)


def zones_for_distance(index, anchor_id, d):
    """Zone numbers (1-based) whose expanded annulus contains ``d``."""
    r = index.radii[anchor_id]
    inner = np.concatenate([[0.0], r[:-1]])
    return np.flatnonzero((d >= inner - index.delta) & (d < r + index.delta)) + 1


def _anchor_interval(index, anchor_id, d):
    zones = zones_for_distance(index, anchor_id, d)
    if zones.size == 0:
        return None
    r = index.radii[anchor_id]
    lo = (r[zones[0] - 2] if zones[0] > 1 else 0.0) - index.delta
    hi = r[zones[-1] - 1] + index.delta
    return lo, hi


def candidates(index, measured, allow_fallback=True):
    """Candidate rows for a set of measured anchor distances.

    Anchors whose distance falls beyond the outermost expanded zone are
    treated as not reporting.  If no anchor reports, every row is a candidate.
    Returned rows are sorted ascending.
    """
    if not measured:
        raise InputError("measured distances must not be empty")
    intervals = {}
    for aid, d in measured.items():
        aid = int(aid)
        if aid not in index.anchors:
            raise UnknownAnchorId(f"anchor {aid} is not in the index")
        if d < 0:
            raise InputError("measured distances must be >= 0")
        iv = _anchor_interval(index, aid, float(d))
        if iv is not None:
            intervals[aid] = iv
    n = len(index.store)
    if not intervals:
        return Candidates(np.arange(n), False, ())
    slices = {}
    for aid, (lo, hi) in intervals.items():
        sd = index._sorted_dist[aid]
        a, b = np.searchsorted(sd, lo, "left"), np.searchsorted(sd, hi, "left")
        slices[aid] = index._order[aid][a:b]
    used = tuple(sorted(intervals))
    first = min(used, key=lambda k: len(slices[k]))
    rows = slices[first]
    for aid in used:
        if aid == first or rows.size == 0:
            continue
        lo, hi = intervals[aid]
        d = index._dist[rows, index._col[aid]]
        rows = rows[(d >= lo) & (d < hi)]
    if rows.size or len(used) == 1:
        return Candidates(np.sort(rows), False, used)
    if not allow_fallback:
        return Candidates(rows, False, used)
    union = np.unique(np.concatenate([slices[k] for k in used]))
    return Candidates(union, True, used)


def match(index, query, measured=None, gated=True, allow_fallback=True):
    """Nearest stored descriptor (Euclidean) among the gated candidates.

    ``query`` is a vector or a :class:`Descriptor`.  Returns a :class:`Match`
    or ``None`` when nothing is within the acceptance threshold.
    """
    q = np.asarray(query.vector if isinstance(query, Descriptor) else query, dtype=float)
    if q.shape != (index.store.dim,):
        raise DimensionMismatch(f"query has shape {q.shape}, index dimension is {index.store.dim}")
    V = index.store.vectors
    if gated and measured:
        cand = candidates(index, measured, allow_fallback)
        rows, fb = cand.rows, cand.fallback
        if rows.size == 0:
            return None
        diff = V[rows] - q
    else:
        rows, fb = None, False
        diff = V - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    k = int(np.argmin(d2))
    best = float(np.sqrt(d2[k]))
    if best > index.tau:
        return None
    row = k if rows is None else int(rows[k])
    s = index.store
    return Match(int(s.ids[row]), -best, s.positions[row], s.quaternions[row],
                 len(V) if rows is None else len(rows), fb)


def angular_error_deg(q1, q2):
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    dot = abs(float(np.dot(q1 / np.linalg.norm(q1), q2 / np.linalg.norm(q2))))
    return float(np.degrees(2.0 * np.arccos(min(dot, 1.0))))


@dataclass(frozen=True)
class LocalizationResult:
    n_attempts: int
    n_success: int
    success_rate: float
    ape: float  # mean position error over successes (nan if none)
    mean_latency: float  # seconds (nan if not timed)


def is_success(pred_pos, pred_q, true_pos, true_q):
    err = float(np.linalg.norm(np.asarray(pred_pos, float) - np.asarray(true_pos, float)))
    ang = angular_error_deg(pred_q, true_q) if pred_q is not None and true_q is not None else 0.0
    return err < SUCCESS_DISTANCE and ang < SUCCESS_ANGLE_DEG, err


def evaluate(matches, latencies=None):
    """Success rate, APE and mean latency for ``(predicted, truth)`` pairs.

    ``predicted`` is ``None`` (no match) or ``(position, quaternion)``;
    ``truth`` is ``(position, quaternion)``.  Failed or missing matches count
    as attempts but not towards the APE.
    """
    matches = list(matches)
    errors = []
    for pred, truth in matches:
        if pred is None:
            continue
        ok, err = is_success(pred[0], pred[1], truth[0], truth[1])
        if ok:
            errors.append(err)
    n = len(matches)
    lat = np.asarray(latencies if latencies is not None else [], dtype=float)
    return LocalizationResult(
        n_attempts=n,
        n_success=len(errors),
        success_rate=len(errors) / n if n else 0.0,
        ape=float(np.mean(errors)) if errors else float("nan"),
        mean_latency=float(lat.mean()) if lat.size else float("nan"),
    )


def localize_queries(index, queries, gated=True, clock=time.perf_counter):
    """Run :func:`match` for every query and time each call.

    ``queries`` yields ``(vector, measured, true_position, true_quaternion)``.
    Returns ``(matches, result)`` where ``matches`` is a list of Match/None.
    """
    out, pairs, lat = [], [], []
    for vec, measured, tp, tq in queries:
        t0 = clock()
        m = match(index, vec, measured, gated=gated)
        lat.append(clock() - t0)
        out.append(m)
        pairs.append((None if m is None else (m.position, m.quaternion), (tp, tq)))
    return out, evaluate(pairs, lat)


# -- synthetic descriptors ----------------------------------------------------


class DescriptorField:
    """Smooth random vector field over the plane (random Fourier features).

    With ``period`` set, the field repeats every ``period`` metres along x,
    producing identical descriptors at far-apart places, which is what makes
    a scene "repetitive".
    """

    def __init__(self, dim=32, correlation_length=15.0, n_features=64, period=None, seed=0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.period = period
        self._W = rng.normal(scale=1.0 / correlation_length, size=(n_features, 2))
        self._phase = rng.uniform(0, 2 * np.pi, size=n_features)
        self._A = rng.normal(size=(dim, n_features)) * np.sqrt(2.0 / n_features)

    def __call__(self, positions):
        P = np.atleast_2d(np.asarray(positions, dtype=float))[:, :2].copy()
        if self.period:
            P[:, 0] = np.mod(P[:, 0], self.period)
        return np.cos(P @ self._W.T + self._phase) @ self._A.T


def make_descriptor_store(positions, quaternions, field, start_id=0):
    positions = check_points(positions, "positions")
    return DescriptorStore(
        np.arange(start_id, start_id + len(positions)),
        positions,
        np.asarray(quaternions, dtype=float).reshape(-1, 4),
        field(positions),
    )


def grid_store(lo, hi, spacing, field, seed=0):
    """Descriptors on a regular xy grid at height ``lo[2]`` with random headings."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    xs = np.arange(lo[0] + spacing / 2, hi[0], spacing)
    ys = np.arange(lo[1] + spacing / 2, hi[1], spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    P = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, lo[2])])
    yaw = np.random.default_rng(seed).uniform(-np.pi, np.pi, size=len(P))
    return make_descriptor_store(P, quaternion_from_yaw(yaw), field)


def synthetic_queries(store, field, anchors, n_queries, seed=0, offset=3.0, yaw_sigma_deg=3.0,
                      descriptor_noise=0.0, range_sigma=0.0, rate_hz=1.0):
    """Revisit random store places and report what a tag there would measure.

    Each query sits within ``offset`` metres (xy) of a randomly chosen stored
    descriptor, with that descriptor's heading perturbed by ``yaw_sigma_deg``.
    Its vector is the field value at the true position plus Gaussian noise,
    and ``measured`` holds the distance to every anchor plus range noise.

    Returns ``(t, positions, quaternions, vectors, measured, source_rows)``.
    """
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, len(store), size=n_queries)
    ang = rng.uniform(0, 2 * np.pi, size=n_queries)
    rad = offset * np.sqrt(rng.uniform(size=n_queries))
    P = store.positions[rows].copy()
    P[:, 0] += rad * np.cos(ang)
    P[:, 1] += rad * np.sin(ang)
    dyaw = np.radians(yaw_sigma_deg) * rng.normal(size=n_queries)
    Q = (Rotation.from_euler("z", dyaw) * Rotation.from_quat(store.quaternions[rows])).as_quat()
    V = field(P) + descriptor_noise * rng.normal(size=(n_queries, field.dim))
    ids = sorted(anchors)
    A = np.array([anchors[k] for k in ids], dtype=float).reshape(-1, 3)
    D = np.linalg.norm(P[:, None, :] - A[None, :, :], axis=2)
    D = np.maximum(D + range_sigma * rng.normal(size=D.shape), 0.0)
    measured = [{k: float(D[q, c]) for c, k in enumerate(ids)} for q in range(n_queries)]
    t = np.arange(n_queries) / rate_hz
    return t, P, Q, V, measured, rows


class ZoneLocalizer(BaseEstimator):
    """Estimator wrapper: ``fit`` indexes a store, ``predict`` localizes queries.

    Parameters
    ----------
    anchors : dict
        Anchor id -> position, typically calibrated estimates.
    zone_width, n_zones, delta
        Zone geometry in metres.
    tau : float or "auto"
        Descriptor-distance acceptance threshold.
    gated : bool
        ``False`` gives plain nearest-neighbour matching over the whole store.
    """

    def __init__(self, anchors=None, zone_width=50.0, n_zones=10, delta=10.0, tau="auto", gated=True):
        self.anchors = anchors
        self.zone_width = zone_width
        self.n_zones = n_zones
        self.delta = delta
        self.tau = tau
        self.gated = gated

    def fit(self, X, y, quaternions=None, ids=None):
        X = np.asarray(X, dtype=float)
        y = check_points(y, "y")
        n = len(X)
        q = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1)) if quaternions is None else np.asarray(quaternions, float)
        ids = np.arange(n) if ids is None else np.asarray(ids, dtype=int)
        store = DescriptorStore(ids, y, q, X)
        self.index_ = build_index(store, self.anchors or {}, self.zone_width, self.n_zones,
                                  self.delta, self.tau)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, measured=None):
        """Matched positions per query row; rows without a match are NaN."""
        check_is_fitted(self, "index_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        measured = measured if measured is not None else [None] * len(X)
        out = np.full((len(X), 3), np.nan)
        for k, (x, m) in enumerate(zip(X, measured)):
            res = match(self.index_, x, m, gated=self.gated)
            if res is not None:
                out[k] = res.position
        return out


def quaternion_from_yaw(yaw):
    return Rotation.from_euler("z", np.atleast_1d(yaw)).as_quat()
