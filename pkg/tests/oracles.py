"""Independent reference implementations used only by the tests.

None of these import the package's numerical code: the spline oracle is a
textbook De Boor recursion on an explicit knot vector, the GP oracle uses
the Bessel-function form of the Matern kernel and a dense matrix inverse,
and the zone and occlusion oracles are brute force.
"""

import math

import numpy as np
from scipy.special import gamma, kv


def de_boor(t, t0, dt, controls, order):
    """Evaluate a uniform B-spline with textbook De Boor recursion.

    Knots are ``tau_m = t0 + (m - order + 1) * dt`` so that the interval
    ``[t0 + i dt, t0 + (i+1) dt)`` is governed by controls ``i .. i+order-1``.
    """
    p = order - 1
    c = [np.asarray(x, dtype=float) for x in controls]
    n = len(c)
    tau = [t0 + (m - p) * dt for m in range(n + order)]
    k = None
    for m in range(p, n):
        if tau[m] <= t < tau[m + 1]:
            k = m
            break
    if k is None:
        raise ValueError("t outside the oracle's domain")
    d = [c[j + k - p].copy() for j in range(p + 1)]
    for r in range(1, p + 1):
        for j in range(p, r - 1, -1):
            alpha = (t - tau[j + k - p]) / (tau[j + 1 + k - r] - tau[j + k - p])
            d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j]
    return d[p]


def matern_bessel(r, nu, length_scale, signal_variance):
    """General Matern covariance via the modified Bessel function."""
    r = np.asarray(r, dtype=float)
    z = np.sqrt(2.0 * nu) * r / length_scale
    out = np.full(r.shape, float(signal_variance))
    nz = z > 0
    out[nz] = signal_variance * (2.0 ** (1.0 - nu) / gamma(nu)) * z[nz] ** nu * kv(nu, z[nz])
    return out


def gp_dense(X, y, Xs, nu, length_scale, signal_variance, noise_variance, mean=0.0):
    """Predictive mean and variance with an explicit matrix inverse."""
    X, Xs = np.asarray(X, float), np.asarray(Xs, float)
    dist = lambda A, B: np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    K = matern_bessel(dist(X, X), nu, length_scale, signal_variance)
    Ks = matern_bessel(dist(X, Xs), nu, length_scale, signal_variance)
    Kinv = np.linalg.inv(K + noise_variance * np.eye(len(X)))
    mu = mean + Ks.T @ Kinv @ (np.asarray(y, float) - mean)
    var = signal_variance - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks)
    return mu, var


def zone_candidates(positions, anchors, measured, zone_width, n_zones, delta, fallback=True):
    """Candidate rows by explicit per-descriptor, per-zone membership tests."""
    per_anchor = []
    for aid, d in sorted(measured.items()):
        a = np.asarray(anchors[aid], float)
        zones = []
        for i in range(1, n_zones + 1):
            inner = (i - 1) * zone_width
            outer = i * zone_width
            if inner - delta <= d < outer + delta:
                zones.append((inner, outer))
        if not zones:
            continue
        members = set()
        for row, p in enumerate(positions):
            dist = math.dist(p, a)
            for inner, outer in zones:
                if inner - delta <= dist < outer + delta:
                    members.add(row)
                    break
        per_anchor.append(members)
    if not per_anchor:
        return set(range(len(positions))), False
    inter = set.intersection(*per_anchor)
    if inter or len(per_anchor) == 1 or not fallback:
        return inter, False
    return set.union(*per_anchor), True


def segment_hits_box_sampled(p, a, lo, hi, n=4001):
    """Dense point sampling of the segment ``p -> a`` against a closed box."""
    s = np.linspace(0.0, 1.0, n)[:, None]
    pts = np.asarray(p, float) + s * (np.asarray(a, float) - np.asarray(p, float))
    return bool(np.any(np.all((pts >= lo) & (pts <= hi), axis=1)))
