"""Synthetic UWB scenes: trajectories, anchors, box occluders and ranging.

Everything here is a pure function of its inputs and an integer seed, so
generated data is reproducible bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .exceptions import InputError

TRAJECTORY_KINDS = ("lawnmower", "loop", "random-walk")


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(3)
        hi = np.asarray(self.hi, dtype=float).reshape(3)
        if np.any(hi < lo):
            raise InputError(f"box upper corner {hi} below lower corner {lo}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self):
        return self.hi - self.lo

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.extent))

    def contains(self, p, tol=0.0):
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)


@dataclass(frozen=True)
class Scene:
    anchors: dict  # id -> (3,) position
    bounds: Box
    occluders: tuple = ()

    def __post_init__(self):
        anchors = {int(k): np.asarray(v, dtype=float).reshape(3) for k, v in self.anchors.items()}
        if len(anchors) != len(self.anchors):
            raise InputError("anchor ids must be unique")
        for k, a in anchors.items():
            if not self.bounds.contains(a, tol=1e-9):
                raise InputError(f"anchor {k} at {a.tolist()} lies outside the scene bounds")
        object.__setattr__(self, "anchors", dict(sorted(anchors.items())))
        object.__setattr__(self, "occluders", tuple(self.occluders))


@dataclass(frozen=True)
class RangingModel:
    gaussian_sigma: float = 0.3
    los_bias: float = 0.0
    nlos_bias_mean: float = 2.0
    nlos_bias_sigma: float = 0.5
    dropout_prob_los: float = 0.0
    dropout_prob_nlos: float = 0.5
    max_range: float = 1000.0
    rate_hz: float = 20.0

    def __post_init__(self):
        for name in ("dropout_prob_los", "dropout_prob_nlos"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must be in [0, 1], got {v}")
        if not self.max_range > 0:
            raise InputError("max_range must be > 0")
        if not self.rate_hz > 0:
            raise InputError("rate_hz must be > 0")
        if self.gaussian_sigma < 0 or self.nlos_bias_sigma < 0:
            raise InputError("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    position: np.ndarray
    quaternion: np.ndarray  # (qx, qy, qz, qw)

    def __len__(self):
        return self.t.shape[0]


@dataclass(frozen=True)
class RangeLog:
    t: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    nlos: np.ndarray = field(default=None)

    def __len__(self):
        return self.t.shape[0]


# -- trajectories -------------------------------------------------------------


def _arc(center, radius, a0, a1, step):
    n = max(int(np.ceil(abs(a1 - a0) * radius / step)), 2)
    a = np.linspace(a0, a1, n)
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])


def _lawnmower_xy(lo, hi, lane_spacing, step):
    """Boustrophedon polyline with semicircular turns, densely sampled."""
    r = lane_spacing / 2.0
    x0, x1 = lo[0] + r, hi[0] - r
    n_lanes = max(int(np.floor((hi[1] - lo[1] - lane_spacing) / lane_spacing)) + 1, 1)
    y0 = lo[1] + (hi[1] - lo[1] - (n_lanes - 1) * lane_spacing) / 2.0
    pieces = []
    for k in range(n_lanes):
        y = y0 + k * lane_spacing
        xs = np.linspace(x0, x1, max(int(np.ceil((x1 - x0) / step)), 2))
        if k % 2:
            xs = xs[::-1]
        pieces.append(np.column_stack([xs, np.full_like(xs, y)]))
        if k < n_lanes - 1:
            if k % 2 == 0:
                pieces.append(_arc((x1, y + r), r, -np.pi / 2, np.pi / 2, step)[1:-1])
            else:
                pieces.append(_arc((x0, y + r), r, -np.pi / 2, -3 * np.pi / 2, step)[1:-1])
    return np.vstack(pieces)


def _resample_by_arclength(path, s_query):
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return np.column_stack([np.interp(s_query, s, path[:, k]) for k in range(path.shape[1])]), s[-1]


def lawnmower_length(bounds, lane_spacing=20.0):
    """Path length of one complete lawnmower sweep over ``bounds`` (metres)."""
    path = _lawnmower_xy(bounds.lo, bounds.hi, lane_spacing, lane_spacing / 40.0)
    return _resample_by_arclength(path, np.array([0.0]))[1]


def _pingpong(s, length):
    if length <= 0:
        return np.zeros_like(s)
    u = np.mod(s, 2 * length)
    return np.where(u <= length, u, 2 * length - u)


def _heading_quaternions(P):
    v = np.gradient(P, axis=0)
    yaw = np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
    horiz = np.hypot(v[:, 0], v[:, 1])
    pitch = -np.arctan2(v[:, 2], np.maximum(horiz, 1e-12))
    return Rotation.from_euler("ZY", np.column_stack([yaw, pitch])).as_quat()


def generate_trajectory(
    kind, bounds, speed, duration, seed=0, rate_hz=10.0, lane_spacing=20.0
):
    """Smooth timestamped poses inside ``bounds``.

    ``lawnmower`` sweeps boustrophedon lanes with rounded turns (reversing
    when the pattern is exhausted), ``loop`` drives a closed ellipse an
    integer number of laps, ``random-walk`` wanders with a smoothly varying
    turn rate.  When ``bounds`` has vertical extent the altitude oscillates
    through it so the trajectory covers the volume.
    """
    if kind not in TRAJECTORY_KINDS:
        raise InputError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    if not duration > 0:
        raise InputError("duration must be > 0")
    if not speed > 0:
        raise InputError("speed must be > 0")
    lo, hi = bounds.lo, bounds.hi
    rng = np.random.default_rng(seed)
    t = np.arange(int(np.floor(duration * rate_hz)) + 1) / rate_hz
    step = speed / rate_hz

    if kind == "lawnmower":
        if np.any(hi[:2] - lo[:2] < lane_spacing):
            raise InputError("bounds too small for the lane spacing")
        path = _lawnmower_xy(lo, hi, lane_spacing, step / 4)
        _, length = _resample_by_arclength(path, np.array([0.0]))
        xy, _ = _resample_by_arclength(path, _pingpong(speed * t, length))
    elif kind == "loop":
        c = (lo[:2] + hi[:2]) / 2
        ax, ay = 0.45 * (hi[:2] - lo[:2])
        circ = np.pi * (3 * (ax + ay) - np.sqrt((3 * ax + ay) * (ax + 3 * ay)))
        laps = max(1, int(round(speed * duration / circ)))
        th = 2 * np.pi * laps * t / duration
        xy = np.column_stack([c[0] + ax * np.cos(th), c[1] + ay * np.sin(th)])
    else:
        margin = 0.1 * (hi[:2] - lo[:2])
        n = t.shape[0]
        xy = np.empty((n, 2))
        xy[0] = lo[:2] + margin + rng.uniform(size=2) * (hi[:2] - lo[:2] - 2 * margin)
        yaw = rng.uniform(-np.pi, np.pi)
        rate = 0.0
        c = (lo[:2] + hi[:2]) / 2
        for k in range(1, n):
            rate = 0.95 * rate + 0.05 * rng.normal(scale=0.5)
            nxt = xy[k - 1] + step * np.array([np.cos(yaw), np.sin(yaw)])
            if np.any(nxt < lo[:2] + margin) or np.any(nxt > hi[:2] - margin):
                to_c = np.arctan2(*(c - xy[k - 1])[::-1])
                yaw += np.clip(np.angle(np.exp(1j * (to_c - yaw))), -0.3, 0.3)
            else:
                yaw += rate / rate_hz
            xy[k] = xy[k - 1] + step * np.array([np.cos(yaw), np.sin(yaw)])
        xy = np.clip(xy, lo[:2], hi[:2])

    dz = hi[2] - lo[2]
    if dz > 0:
        phase = rng.uniform(0, 2 * np.pi)
        # wavelength incommensurate with the lane spacing so lanes sample all heights
        wavelength = (1.0 + np.sqrt(2.0)) * lane_spacing
        z = lo[2] + dz * (0.5 + 0.5 * np.sin(2 * np.pi * speed * t / wavelength + phase))
    else:
        z = np.full(t.shape, lo[2])
    P = np.column_stack([xy, z])
    return Trajectory(t, P, _heading_quaternions(P))


# -- occlusion ----------------------------------------------------------------


def _segment_hits_box(P, a, lo, hi):
    """Slab test for segments P[k] -> a against one box; vectorised over k."""
    d = a[None, :] - P
    t0 = np.zeros(P.shape[0])
    t1 = np.ones(P.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in range(3):
            par = np.abs(d[:, ax]) < 1e-15
            inside = (P[:, ax] >= lo[ax]) & (P[:, ax] <= hi[ax])
            ta = (lo[ax] - P[:, ax]) / d[:, ax]
            tb = (hi[ax] - P[:, ax]) / d[:, ax]
            tmin = np.where(par, -np.inf, np.minimum(ta, tb))
            tmax = np.where(par, np.inf, np.maximum(ta, tb))
            t0 = np.maximum(t0, tmin)
            t1 = np.minimum(t1, tmax)
            t1 = np.where(par & ~inside, -1.0, t1)
    return t0 <= t1


def occlusion_mask(scene, P, a):
    """Boolean per row of ``P``: segment to anchor ``a`` crosses an occluder."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    a = np.asarray(a, dtype=float).reshape(3)
    hit = np.zeros(P.shape[0], dtype=bool)
    for box in scene.occluders:
        hit |= _segment_hits_box(P, a, box.lo, box.hi)
    return hit


def is_occluded(scene, p, a):
    return bool(occlusion_mask(scene, p, a)[0])


# -- ranging ------------------------------------------------------------------


def simulate_ranges(scene, model, trajectory, seed=0):
    """Sample time-of-flight ranges from every anchor along the trajectory.

    Each anchor reports at ``model.rate_hz`` with a per-anchor phase offset.
    Measurement = true distance + LoS bias + Gaussian noise, plus a
    non-negative delay ``|N(nlos_bias_mean, nlos_bias_sigma^2)|`` when the
    direct path is occluded; out-of-range or dropped measurements are absent.
    """
    rng = np.random.default_rng(seed)
    tt = trajectory.t
    interp = CubicSpline(tt, trajectory.position, axis=0)
    ids = list(scene.anchors)
    out_t, out_id, out_r, out_nlos = [], [], [], []
    for k, aid in enumerate(ids):
        a = scene.anchors[aid]
        phase = k / (len(ids) * model.rate_hz)
        ts = tt[0] + phase + np.arange(int(np.floor((tt[-1] - tt[0] - phase) * model.rate_hz)) + 1) / model.rate_hz
        P = interp(ts)
        d = np.linalg.norm(P - a, axis=1)
        nlos = occlusion_mask(scene, P, a)
        noise = rng.normal(0.0, 1.0, size=ts.shape) * model.gaussian_sigma
        delay = np.abs(model.nlos_bias_mean + model.nlos_bias_sigma * rng.normal(size=ts.shape))
        u = rng.uniform(size=ts.shape)
        drop = u < np.where(nlos, model.dropout_prob_nlos, model.dropout_prob_los)
        keep = (d <= model.max_range) & ~drop
        z = d + model.los_bias + noise + np.where(nlos, delay, 0.0)
        z = np.maximum(z, 0.0)
        out_t.append(ts[keep])
        out_id.append(np.full(int(keep.sum()), aid))
        out_r.append(z[keep])
        out_nlos.append(nlos[keep])
    if not ids:
        e = np.zeros(0)
        return RangeLog(e, e.astype(int), e, e.astype(bool))
    t = np.concatenate(out_t)
    aid = np.concatenate(out_id)
    order = np.lexsort((aid, t))
    return RangeLog(t[order], aid[order], np.concatenate(out_r)[order], np.concatenate(out_nlos)[order])


def random_scene(bounds, n_anchors, n_occluders=0, seed=0, anchor_height=(2.0, 8.0),
                 occluder_size=(20.0, 60.0), occluder_height=(8.0, 30.0), margin=0.05):
    """Scatter anchors and box buildings uniformly; anchors avoid buildings."""
    rng = np.random.default_rng(seed)
    lo, hi = bounds.lo, bounds.hi
    ext = hi - lo
    occ = []
    for _ in range(n_occluders):
        w = rng.uniform(*occluder_size, size=2)
        c = lo[:2] + rng.uniform(size=2) * ext[:2]
        h = rng.uniform(*occluder_height)
        occ.append(Box([c[0] - w[0] / 2, c[1] - w[1] / 2, lo[2]], [c[0] + w[0] / 2, c[1] + w[1] / 2, lo[2] + h]))
    anchors = {}
    while len(anchors) < n_anchors:
        xy = lo[:2] + ext[:2] * (margin + (1 - 2 * margin) * rng.uniform(size=2))
        z = lo[2] + rng.uniform(*anchor_height) if ext[2] == 0 else lo[2] + rng.uniform(0.1, 0.9) * ext[2]
        p = np.array([xy[0], xy[1], z])
        if any(b.contains(p, tol=1.0) for b in occ):
            continue
        anchors[len(anchors)] = p
    hi_z = max(hi[2], max((a[2] for a in anchors.values()), default=hi[2]))
    scene_bounds = Box(lo, [hi[0], hi[1], hi_z])
    return Scene(anchors, scene_bounds, tuple(occ))
