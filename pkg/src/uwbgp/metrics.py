"""Anchor APE and localization reports as fixed-width text plus CSV twins."""

from dataclasses import dataclass
import io
import csv

import numpy as np

from .exceptions import MissingTruth

FAILURE_FRACTION = 0.10  # error above this share of the scene diagonal is a failure
FAIL_MARK = "-"


@dataclass(frozen=True)
class CalibrationReport:
    """Per-anchor errors in metres; ``None`` marks an anchor with no estimate.

    ``failed`` lists anchors rejected by the diagonal rule or missing an
    estimate.  ``mean_error`` averages the remaining anchors only (NaN when
    none remain).
    """

    per_anchor_error: dict
    failed: frozenset
    mean_error: float
    scene_diagonal: float
    threshold: float
    processing_time: float = None
    synthetic: bool = True

    @property
    def n_success(self):
        return len(self.per_anchor_error) - len(self.failed)


def anchor_ape(estimates, truth, scene_diagonal, processing_time=None, expected_ids=None):
    """Euclidean anchor errors with the 10 %-of-diagonal failure rule.

    Parameters
    ----------
    estimates : dict
        anchor id -> 3-vector.  A value of ``None`` means calibration failed.
    truth : dict
        anchor id -> 3-vector.
    scene_diagonal : float
        Length of the scene bounding-box diagonal.
    expected_ids : iterable, optional
        Anchors to report even when absent from ``estimates`` (shown failed).
    """
    missing = sorted(set(estimates) - set(truth))
    if missing:
        raise MissingTruth(f"no ground truth for anchor(s) {missing}")
    threshold = FAILURE_FRACTION * float(scene_diagonal)
    ids = sorted(set(estimates) | set(expected_ids or ()))
    errors, failed = {}, set()
    for aid in ids:
        est = estimates.get(aid)
        if est is None or not np.all(np.isfinite(est)):
            errors[aid] = None
            failed.add(aid)
            continue
        e = float(np.linalg.norm(np.asarray(est, float) - np.asarray(truth[aid], float)))
        errors[aid] = e
        if e > threshold:
            failed.add(aid)
    ok = [errors[a] for a in ids if a not in failed]
    mean = float(np.mean(ok)) if ok else float("nan")
    return CalibrationReport(errors, frozenset(failed), mean, float(scene_diagonal), threshold, processing_time)


def _fmt(x, width, digits=3):
    if x is None or not np.isfinite(x):
        return FAIL_MARK.rjust(width)
    return f"{x:{width}.{digits}f}"


def render_report(report):
    """Fixed-width table: one row per anchor, then the mean over successes."""
    lines = [f"{'anchor':>8} {'error_m':>10} {'status':>8}"]
    for aid, err in report.per_anchor_error.items():
        bad = aid in report.failed
        lines.append(f"{aid:>8d} {_fmt(None if bad else err, 10)} {'failed' if bad else 'ok':>8}")
    if report.per_anchor_error:
        lines.append(f"{'mean':>8} {_fmt(report.mean_error, 10)} {report.n_success:>4d}/{len(report.per_anchor_error):<3d}")
    lines.append(f"failure threshold: {report.threshold:.3f} m (10% of {report.scene_diagonal:.3f} m diagonal)")
    if report.processing_time is not None:
        lines.append(f"processing time: {report.processing_time:.3f} s")
    if report.synthetic:
        lines.append("data: synthetic")
    return "\n".join(lines) + "\n"


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["anchor_id", "error_m", "failed"])
    for aid, err in report.per_anchor_error.items():
        w.writerow([aid, "" if err is None else f"{err:.6f}", int(aid in report.failed)])
    return buf.getvalue()


def render_localization(results):
    """Table with one column per method (e.g. ``{"gated": r, "ungated": r}``).

    Rows are success rate (%), APE over successes (m) and mean latency (ms).
    """
    names = list(results)
    lines = [f"{'metric':<18}" + "".join(f"{n:>12}" for n in names)]
    rows = [
        ("attempts", lambda r: f"{r.n_attempts:>12d}"),
        ("success_rate_%", lambda r: _fmt(100.0 * r.success_rate if r.n_attempts else None, 12, 2)),
        ("ape_m", lambda r: _fmt(r.ape if r.n_success else None, 12, 3)),
        ("latency_ms", lambda r: _fmt(None if r.mean_latency is None else 1e3 * r.mean_latency, 12, 3)),
    ]
    for label, f in rows:
        lines.append(f"{label:<18}" + "".join(f(results[n]) for n in names))
    return "\n".join(lines) + "\n"


def _num(x, scale=1.0, digits=6):
    return "" if x is None or not np.isfinite(x) else f"{scale * x:.{digits}f}"


def localization_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "attempts", "successes", "success_rate_pct", "ape_m", "latency_ms"])
    for name, r in results.items():
        w.writerow([
            name,
            r.n_attempts,
            r.n_success,
            _num(r.success_rate, 100.0, 4) if r.n_attempts else "",
            _num(r.ape),
            _num(r.mean_latency, 1e3),
        ])
    return buf.getvalue()
