"""CSV interchange and key-value config/scene files.

Every reader reports malformed input as :class:`ParseError` naming the file
and 1-based line.  Writers format floats with fixed precision so repeated
runs produce identical bytes.
"""

import csv
import math
import os

import numpy as np

from .exceptions import ParseError
from .simulator import Box, Scene

POSE_HEADER = ["t", "x", "y", "z", "qx", "qy", "qz", "qw"]
RANGE_HEADER = ["t", "anchor_id", "range"]
PAIRED_HEADER = ["t", "anchor_id", "range", "x", "y", "z"]
ESTIMATE_HEADER = ["anchor_id", "x", "y", "z", "converged", "n_samples", "residual_rms"]
TRACE_HEADER = ["anchor_id", "iter", "cx", "cy", "cz", "ex", "ey", "ez", "pred_range"]
TRUTH_HEADER = ["anchor_id", "x", "y", "z"]
QUERY_LOG_HEADER = ["t", "anchor_id", "d_j"]
MATCH_HEADER = ["t", "gated", "id", "x", "y", "z", "distance", "n_candidates", "error_m", "angle_deg", "success"]


def fmt(x, digits=6):
    x = float(x)
    if not math.isfinite(x):
        return "nan"
    s = f"{x:.{digits}f}"
    return "0." + "0" * digits if s == "-0." + "0" * digits else s


# -- low level ------------------------------------------------------------------


def _rows(path, header, prefix=False):
    """Yield ``(line_no, fields)`` after checking the header line."""
    path = os.fspath(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open: {exc.strerror}", path) from exc
    with fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None:
            raise ParseError("empty file, expected a header", path, 1)
        got = [h.strip() for h in got]
        ok = got[: len(header)] == header if prefix else got == header
        if not ok:
            raise ParseError(f"bad header {','.join(got)!r}, expected {','.join(header)!r}", path, 1)
        width = len(got)
        for fields in reader:
            line = reader.line_num
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != width:
                raise ParseError(f"expected {width} fields, got {len(fields)}", path, line)
            yield line, got, fields


def _num(value, path, line, kind=float):
    try:
        v = kind(value)
    except ValueError:
        raise ParseError(f"not a number: {value!r}", path, line) from None
    if kind is float and not math.isfinite(v):
        raise ParseError(f"non-finite value: {value!r}", path, line)
    return v


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- poses and ranges -----------------------------------------------------------


def read_pose_csv(path):
    """Return ``(t, positions, quaternions)``; quaternions are xyzw."""
    data = [[_num(v, path, ln) for v in f] for ln, _, f in _rows(path, POSE_HEADER)]
    a = np.array(data, dtype=float).reshape(-1, 8)
    return a[:, 0], a[:, 1:4], a[:, 4:8]


def write_pose_csv(path, t, positions, quaternions):
    rows = ([fmt(ti)] + [fmt(v) for v in p] + [fmt(v, 9) for v in q]
            for ti, p, q in zip(t, positions, quaternions))
    write_csv(path, POSE_HEADER, rows)


def read_range_csv(path):
    t, aid, r = [], [], []
    for ln, _, f in _rows(path, RANGE_HEADER):
        t.append(_num(f[0], path, ln))
        aid.append(_num(f[1], path, ln, int))
        rng = _num(f[2], path, ln)
        if rng < 0:
            raise ParseError(f"negative range {rng}", path, ln)
        r.append(rng)
    return np.array(t, float), np.array(aid, int), np.array(r, float)


def write_range_csv(path, t, anchor_id, ranges):
    write_csv(path, RANGE_HEADER, ([fmt(a), int(b), fmt(c)] for a, b, c in zip(t, anchor_id, ranges)))


def write_paired_csv(path, samples):
    rows = ([fmt(t), int(a), fmt(r)] + [fmt(v) for v in p]
            for t, a, r, p in zip(samples.t, samples.anchor_id, samples.range, samples.position))
    write_csv(path, PAIRED_HEADER, rows)


# -- anchors --------------------------------------------------------------------


def read_truth_csv(path):
    out = {}
    for ln, _, f in _rows(path, TRUTH_HEADER):
        aid = _num(f[0], path, ln, int)
        if aid in out:
            raise ParseError(f"duplicate anchor id {aid}", path, ln)
        out[aid] = np.array([_num(v, path, ln) for v in f[1:4]])
    return out


def write_truth_csv(path, anchors):
    write_csv(path, TRUTH_HEADER, ([int(k)] + [fmt(v) for v in anchors[k]] for k in sorted(anchors)))


def write_estimates_csv(path, results):
    """One row per anchor; failed anchors get empty coordinates and ``converged=0``."""
    rows = []
    for aid in sorted(results):
        r = results[aid]
        if hasattr(r, "position"):
            rows.append([aid] + [fmt(v) for v in r.position] + [int(r.converged), r.n_samples_used, fmt(r.residual_rms)])
        else:
            rows.append([aid, "", "", "", 0, r.n_samples, ""])
    write_csv(path, ESTIMATE_HEADER, rows)


def read_estimates_csv(path):
    """Return ``{anchor_id: position or None}`` plus ``{anchor_id: converged}``."""
    pos, conv = {}, {}
    for ln, _, f in _rows(path, ESTIMATE_HEADER):
        aid = _num(f[0], path, ln, int)
        if aid in pos:
            raise ParseError(f"duplicate anchor id {aid}", path, ln)
        if all(not v.strip() for v in f[1:4]):
            pos[aid] = None
        else:
            pos[aid] = np.array([_num(v, path, ln) for v in f[1:4]])
        conv[aid] = bool(_num(f[4], path, ln, int))
    return pos, conv


def read_anchor_positions(path):
    """Anchor positions from either a truth CSV or an estimate CSV.

    Anchors whose estimate is missing are left out.
    """
    path = os.fspath(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
    except OSError as exc:
        raise ParseError(f"cannot open: {exc.strerror}", path) from exc
    if header == ESTIMATE_HEADER:
        pos, _ = read_estimates_csv(path)
        return {k: v for k, v in pos.items() if v is not None}
    return read_truth_csv(path)


def write_trace_csv(path, results):
    rows = []
    for aid in sorted(results):
        r = results[aid]
        for k, it in enumerate(getattr(r, "iterations", ())):
            c = (it.lo + it.hi) / 2.0
            rows.append([aid, k] + [fmt(v) for v in c] + [fmt(v) for v in it.estimate] + [fmt(it.pred_range)])
    write_csv(path, TRACE_HEADER, rows)


# -- localization ---------------------------------------------------------------


def _vector_header(prefix, dim):
    return prefix + [f"v{i}" for i in range(dim)]


def _read_vectors(path, prefix, allow_empty=False):
    """Rows of ``prefix`` columns followed by ``v0..v{D-1}``."""
    rows, header = [], None
    for ln, header, f in _rows(path, prefix, prefix=True):
        rows.append([_num(v, path, ln) for v in f])
    if header is None:
        if not allow_empty:
            raise ParseError("no descriptor rows", path, 2)
        with open(path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh))]
    dim = len(header) - len(prefix)
    if dim < 1 or header[len(prefix):] != [f"v{i}" for i in range(dim)]:
        raise ParseError("descriptor columns must be v0..v{D-1}", path, 1)
    return np.array(rows, dtype=float).reshape(-1, len(prefix) + dim)


def read_store_csv(path):
    from .localization import DescriptorStore

    a = _read_vectors(path, ["id", "x", "y", "z", "qx", "qy", "qz", "qw"])
    ids = a[:, 0]
    if np.any(ids != np.round(ids)):
        raise ParseError("descriptor ids must be integers", path)
    return DescriptorStore(ids.astype(int), a[:, 1:4], a[:, 4:8], a[:, 8:])


def write_store_csv(path, store):
    header = _vector_header(["id", "x", "y", "z", "qx", "qy", "qz", "qw"], store.dim)
    rows = ([int(i)] + [fmt(v) for v in p] + [fmt(v, 9) for v in q] + [fmt(v, 9) for v in x]
            for i, p, q, x in zip(store.ids, store.positions, store.quaternions, store.vectors))
    write_csv(path, header, rows)


def read_queries_csv(path):
    """Query descriptors with their true pose: ``(t, positions, quaternions, vectors)``."""
    a = _read_vectors(path, POSE_HEADER, allow_empty=True)
    return a[:, 0], a[:, 1:4], a[:, 4:8], a[:, 8:]


def write_queries_csv(path, t, positions, quaternions, vectors):
    header = _vector_header(list(POSE_HEADER), vectors.shape[1])
    rows = ([fmt(ti)] + [fmt(v) for v in p] + [fmt(v, 9) for v in q] + [fmt(v, 9) for v in x]
            for ti, p, q, x in zip(t, positions, quaternions, vectors))
    write_csv(path, header, rows)


def read_query_log(path):
    """Measured anchor distances grouped by timestamp: ``{t: {anchor_id: d}}``."""
    out = {}
    for ln, _, f in _rows(path, QUERY_LOG_HEADER):
        t = _num(f[0], path, ln)
        aid = _num(f[1], path, ln, int)
        d = _num(f[2], path, ln)
        if d < 0:
            raise ParseError(f"negative distance {d}", path, ln)
        out.setdefault(t, {})[aid] = d
    return out


def write_query_log(path, t, measured):
    """``measured`` is a list of ``{anchor_id: d}`` aligned with ``t``."""
    rows = ([fmt(ti), int(a), fmt(m[a])] for ti, m in zip(t, measured) for a in sorted(m))
    write_csv(path, QUERY_LOG_HEADER, rows)


# -- key-value files ------------------------------------------------------------


def parse_keyvalue(path):
    """Read ``key = value`` lines; ``#`` starts a comment, keys may repeat.

    Returns a list of ``(key, value, line_no)``.
    """
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot open: {exc.strerror}", path) from exc
    out = []
    for no, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path, no)
        if not value:
            raise ParseError(f"missing value for {key!r}", path, no)
        out.append((key, value, no))
    return out


def _floats(value, n, path, line):
    parts = value.split()
    if len(parts) != n:
        raise ParseError(f"expected {n} numbers, got {len(parts)}", path, line)
    return [_num(p, path, line) for p in parts]


def load_scene(path):
    """Scene file: one ``bounds``, any number of ``anchor`` and ``occluder`` lines.

    ::

        bounds   = x0 y0 z0 x1 y1 z1
        anchor   = id x y z
        occluder = x0 y0 z0 x1 y1 z1
    """
    bounds, anchors, occluders = None, {}, []
    for key, value, ln in parse_keyvalue(path):
        try:
            if key == "bounds":
                if bounds is not None:
                    raise ParseError("bounds given twice", path, ln)
                v = _floats(value, 6, path, ln)
                bounds = Box(v[:3], v[3:])
            elif key == "anchor":
                parts = value.split()
                if len(parts) != 4:
                    raise ParseError("anchor needs 'id x y z'", path, ln)
                aid = _num(parts[0], path, ln, int)
                if aid in anchors:
                    raise ParseError(f"duplicate anchor id {aid}", path, ln)
                anchors[aid] = np.array(_floats(" ".join(parts[1:]), 3, path, ln))
            elif key == "occluder":
                v = _floats(value, 6, path, ln)
                occluders.append(Box(v[:3], v[3:]))
            else:
                raise ParseError(f"unknown scene key {key!r}", path, ln)
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), path, ln) from exc
    if bounds is None:
        raise ParseError("scene has no bounds line", path)
    try:
        return Scene(anchors, bounds, tuple(occluders))
    except ValueError as exc:
        raise ParseError(str(exc), path) from exc


def write_scene(path, scene):
    lines = ["bounds = " + " ".join(fmt(v, 3) for v in (*scene.bounds.lo, *scene.bounds.hi))]
    lines += [f"anchor = {k} " + " ".join(fmt(v, 3) for v in scene.anchors[k]) for k in sorted(scene.anchors)]
    lines += ["occluder = " + " ".join(fmt(v, 3) for v in (*b.lo, *b.hi)) for b in scene.occluders]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _coerce(text, default, path, line):
    """Convert ``text`` to the type of ``default`` (None means float-or-None)."""
    low = text.lower()
    if isinstance(default, bool):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ParseError(f"not a boolean: {text!r}", path, line)
    if isinstance(default, int):
        return _num(text, path, line, int)
    if isinstance(default, str):
        return text
    if low in ("none", "auto") and default is None:
        return None
    if low in ("inf", "+inf"):
        return math.inf
    return _num(text, path, line)


def load_config(path, defaults):
    """Parse a flat key-value config against ``defaults`` (name -> default value).

    Unknown keys and repeated keys are errors.  Returns only the keys present.
    """
    out, seen = {}, {}
    for key, value, ln in parse_keyvalue(path):
        if key not in defaults:
            raise ParseError(f"unknown config key {key!r}", path, ln)
        if key in seen:
            raise ParseError(f"{key!r} already set on line {seen[key]}", path, ln)
        seen[key] = ln
        out[key] = _coerce(value, defaults[key], path, ln)
    return out


def write_manifest(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items:
            fh.write(f"{k} = {v}\n")
