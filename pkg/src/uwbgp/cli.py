"""``uwbgp`` command line: simulate, calibrate, localize, evaluate.

Every subcommand writes into a staging directory next to ``--out`` and moves
it into place only after all files are complete, so a failed run leaves no
partial output.  Exit codes: 0 success, 1 usage error, 2 unreadable or
ill-formed input, 3 numerical failure.
"""

import argparse
from contextlib import contextmanager
from dataclasses import asdict, fields
import logging
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from . import io as uio
from .calibration import CalibrationConfig, calibrate_all
from .exceptions import InputError, NumericalError, UwbGpError
from .localization import (
    DescriptorField,
    angular_error_deg,
    build_index,
    grid_store,
    is_success,
    localize_queries,
    synthetic_queries,
)
from .metrics import anchor_ape, localization_csv, render_localization, render_report, report_csv
from .simulator import Box, RangingModel, generate_trajectory, lawnmower_length, simulate_ranges
from .spline import fit_spline, pair_samples

logger = logging.getLogger("uwbgp")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

SIM_DEFAULTS = dict(
    trajectory="lawnmower",
    speed=10.0,
    duration=None,  # lawnmower: one full sweep; other kinds: 600 s
    pose_rate_hz=10.0,
    lane_spacing=20.0,
    tag_height=None,  # None: the trajectory spans the scene's vertical extent
    **{f.name: f.default for f in fields(RangingModel)},
)
SPLINE_DEFAULTS = dict(knot_spacing=0.2, spline_order=4, clock_offset=0.0)
CAL_DEFAULTS = {f.name: f.default for f in fields(CalibrationConfig) if f.name != "hyper_grid"}
LOC_DEFAULTS = dict(zone_width=50.0, n_zones=10, delta=10.0, tau="auto")
DESC_DEFAULTS = dict(
    descriptor_dim=32,
    correlation_length=15.0,
    descriptor_period=None,
    store_spacing=5.0,
    n_queries=500,
    query_offset=3.0,
    yaw_sigma_deg=3.0,
    descriptor_noise=0.0,
    query_range_sigma=0.0,
)
CONFIG_DEFAULTS = dict(
    seed=0, strict_paper=False,
    **SIM_DEFAULTS, **SPLINE_DEFAULTS, **CAL_DEFAULTS, **LOC_DEFAULTS, **DESC_DEFAULTS,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Run:
    """Resolved config plus manifest bookkeeping for one subcommand."""

    def __init__(self, args):
        self.args = args
        self.cfg = dict(CONFIG_DEFAULTS)
        if getattr(args, "config", None):
            self.cfg.update(uio.load_config(args.config, CONFIG_DEFAULTS))
        if getattr(args, "seed", None) is not None:
            self.cfg["seed"] = args.seed
        self.seed = int(self.cfg["seed"])
        self.timings = []
        self.manifest = [
            ("command", args.command),
            ("tool_version", __version__),
            ("config", getattr(args, "config", None) or "-"),
            ("seed", self.seed),
        ]

    def pick(self, defaults):
        return {k: self.cfg[k] for k in defaults}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        self.timings.append((name, time.perf_counter() - t0))

    def finish_manifest(self, out_dir):
        items = list(self.manifest)
        if self.args.no_timings:
            items.append(("timings", "omitted"))
        else:
            items += [(f"time_{k}_s", f"{v:.3f}") for k, v in self.timings]
        uio.write_manifest(os.path.join(out_dir, "manifest.txt"), items)


@contextmanager
def staged_dir(out):
    """Yield a scratch directory that atomically becomes ``out`` on success."""
    out = os.path.abspath(out)
    parent = os.path.dirname(out)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".staging-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.chmod(tmp, 0o755)
    if os.path.exists(out):
        old = tmp + ".old"
        os.replace(out, old)
        os.replace(tmp, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, out)


def _scene_diagonal(args, truth):
    if getattr(args, "scene", None):
        return uio.load_scene(args.scene).bounds.diagonal
    if getattr(args, "diagonal", None):
        return float(args.diagonal)
    if not truth:
        raise InputError("cannot infer a scene diagonal without anchors; pass --scene or --diagonal")
    A = np.array(list(truth.values()))
    return float(np.linalg.norm(A.max(axis=0) - A.min(axis=0)))


def _calibration_config(run):
    kw = run.pick(CAL_DEFAULTS)
    strict = bool(run.cfg["strict_paper"] or run.args.strict_paper)
    if strict:
        kw.update(prior_mean="zero", outlier_filter=False)
    return CalibrationConfig(**kw), strict


def _text_table(header, rows):
    widths = [max(len(str(h)), *(len(str(r[k])) for r in rows)) if rows else len(str(h))
              for k, h in enumerate(header)]
    fmt = lambda r: " ".join(str(v).rjust(w) for v, w in zip(r, widths))
    return "\n".join([fmt(header)] + [fmt(r) for r in rows]) + "\n"


# -- subcommands ----------------------------------------------------------------


def cmd_simulate(args):
    run = Run(args)
    scene = uio.load_scene(args.scene)
    c = run.cfg
    model = RangingModel(**{f.name: c[f.name] for f in fields(RangingModel)})
    lo, hi = scene.bounds.lo.copy(), scene.bounds.hi.copy()
    if c["tag_height"] is not None:
        lo[2] = hi[2] = float(c["tag_height"])
    box = Box(lo, hi)
    duration = c["duration"]
    if duration is None:
        duration = lawnmower_length(box, c["lane_spacing"]) / c["speed"] if c["trajectory"] == "lawnmower" else 600.0
    with run.stage("trajectory"):
        traj = generate_trajectory(c["trajectory"], box, c["speed"], duration, seed=[run.seed, 0],
                                   rate_hz=c["pose_rate_hz"], lane_spacing=c["lane_spacing"])
    with run.stage("ranging"):
        log = simulate_ranges(scene, model, traj, seed=[run.seed, 1])
    with staged_dir(args.out) as d:
        uio.write_pose_csv(os.path.join(d, "poses.csv"), traj.t, traj.position, traj.quaternion)
        uio.write_range_csv(os.path.join(d, "ranges.csv"), log.t, log.anchor_id, log.range)
        uio.write_truth_csv(os.path.join(d, "truth.csv"), scene.anchors)
        run.manifest += [
            ("scene", args.scene),
            ("trajectory", c["trajectory"]),
            ("duration_s", f"{duration:.3f}"),
            ("n_poses", len(traj)),
            ("n_ranges", len(log)),
            ("nlos_fraction", f"{float(np.mean(log.nlos)) if len(log) else 0.0:.4f}"),
            ("noise_model", "synthetic"),
            ("outputs", "poses.csv ranges.csv truth.csv"),
        ]
        run.finish_manifest(d)
    return EXIT_OK


def cmd_calibrate(args):
    run = Run(args)
    cal_cfg, strict = _calibration_config(run)
    c = run.cfg
    t, P, _ = uio.read_pose_csv(args.poses)
    tr, aid, r = uio.read_range_csv(args.ranges)
    truth = uio.read_truth_csv(args.truth) if args.truth else None
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)

    with run.stage("spline"):
        spline, fit_rms = fit_spline(t, P, knot_spacing=c["knot_spacing"], order=c["spline_order"])
        samples, dropped = pair_samples(spline, tr, aid, r, clock_offset=c["clock_offset"])
    t0 = time.perf_counter()
    with run.stage("calibration"):
        results = calibrate_all(samples, cal_cfg, seed=run.seed, jobs=jobs, anchor_ids=np.unique(aid).tolist())
    elapsed = time.perf_counter() - t0

    rows, ok = [], True
    for a in sorted(results):
        res = results[a]
        n = int(np.sum(samples.anchor_id == a))
        if hasattr(res, "position"):
            x, y, z = (f"{v:.3f}" for v in res.position)
            rows.append([a, n, int(res.converged), x, y, z, f"{res.residual_rms:.3f}", "planar" if res.planar else "-"])
            ok &= res.converged or n < cal_cfg.min_samples
        else:
            rows.append([a, n, 0, "-", "-", "-", "-", res.error])
            ok &= n < cal_cfg.min_samples
    text = _text_table(["anchor", "paired", "converged", "x", "y", "z", "rms_m", "note"], rows)
    text += f"paired samples: {len(samples)}, dropped out of spline domain: {dropped}\n"
    text += f"spline fit rms: {fit_rms:.4f} m\n"
    text += f"strict mode: {'on' if strict else 'off'}\n"

    ape = None
    if truth is not None:
        est = {a: getattr(results[a], "position", None) for a in results}
        ape = anchor_ape(est, truth, _scene_diagonal(args, truth),
                         processing_time=None if args.no_timings else elapsed)
        text += "\n" + render_report(ape)

    with staged_dir(args.out) as d:
        uio.write_estimates_csv(os.path.join(d, "estimates.csv"), results)
        if args.trace:
            uio.write_trace_csv(os.path.join(d, "trace.csv"), results)
        if args.write_paired:
            uio.write_paired_csv(os.path.join(d, "paired.csv"), samples)
        if ape is not None:
            with open(os.path.join(d, "ape.csv"), "w", encoding="utf-8") as fh:
                fh.write(report_csv(ape))
        with open(os.path.join(d, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        run.manifest += [
            ("poses", args.poses),
            ("ranges", args.ranges),
            ("truth", args.truth or "-"),
            ("jobs", jobs),
            ("strict_paper", int(strict)),
            *((f"cal_{k}", v) for k, v in asdict(cal_cfg).items()),
            ("knot_spacing", c["knot_spacing"]),
            ("spline_order", c["spline_order"]),
            ("n_paired", len(samples)),
            ("n_dropped", dropped),
        ]
        run.finish_manifest(d)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_descriptors(args):
    run = Run(args)
    c = run.cfg
    scene = uio.load_scene(args.scene)
    field = DescriptorField(dim=c["descriptor_dim"], correlation_length=c["correlation_length"],
                            period=c["descriptor_period"], seed=[run.seed, 2])
    lo = scene.bounds.lo.copy()
    if c["tag_height"] is not None:
        lo[2] = float(c["tag_height"])
    with run.stage("descriptors"):
        store = grid_store(lo, scene.bounds.hi, c["store_spacing"], field, seed=[run.seed, 3])
        t, P, Q, V, measured, _ = synthetic_queries(
            store, field, scene.anchors, c["n_queries"], seed=[run.seed, 4], offset=c["query_offset"],
            yaw_sigma_deg=c["yaw_sigma_deg"], descriptor_noise=c["descriptor_noise"],
            range_sigma=c["query_range_sigma"])
    with staged_dir(args.out) as d:
        uio.write_store_csv(os.path.join(d, "store.csv"), store)
        uio.write_queries_csv(os.path.join(d, "queries.csv"), t, P, Q, V)
        uio.write_query_log(os.path.join(d, "query_log.csv"), t, measured)
        run.manifest += [("scene", args.scene), ("n_descriptors", len(store)), ("n_queries", len(t)),
                         ("outputs", "store.csv queries.csv query_log.csv")]
        run.finish_manifest(d)
    return EXIT_OK


def cmd_localize(args):
    run = Run(args)
    c = run.cfg
    store = uio.read_store_csv(args.store)
    anchors = uio.read_anchor_positions(args.anchors)
    qt, qP, qQ, qV = uio.read_queries_csv(args.queries)
    log = uio.read_query_log(args.query_log)
    by_t = {float(t): k for k, t in enumerate(qt)}
    missing = [t for t in log if t not in by_t]
    if missing:
        raise InputError(f"query log time {missing[0]} has no descriptor row in {args.queries}")
    times = sorted(log)
    rows = [by_t[t] for t in times]
    tau = c["tau"]
    if isinstance(tau, str):
        tau = "auto" if tau.lower() == "auto" else None if tau.lower() == "none" else float(tau)

    with run.stage("index"):
        index = build_index(store, anchors, c["zone_width"], c["n_zones"], c["delta"], tau)
    queries = [(qV[k], log[t], qP[k], qQ[k]) for k, t in zip(rows, times)]
    results, match_rows = {}, []
    for gated in (True, False):
        with run.stage("gated" if gated else "ungated"):
            matches, res = localize_queries(index, queries, gated=gated)
        if args.no_timings:
            res = type(res)(res.n_attempts, res.n_success, res.success_rate, res.ape, None)
        results["gated" if gated else "ungated"] = res
        for t, k, m in zip(times, rows, matches):
            if m is None:
                match_rows.append([uio.fmt(t), int(gated), "", "", "", "", "", "", "", "", 0])
                continue
            err = float(np.linalg.norm(m.position - qP[k]))
            ang = angular_error_deg(m.quaternion, qQ[k])
            ok, _ = is_success(m.position, m.quaternion, qP[k], qQ[k])
            match_rows.append([uio.fmt(t), int(gated), m.id, *(uio.fmt(v) for v in m.position),
                               uio.fmt(-m.score), m.n_candidates, uio.fmt(err), uio.fmt(ang, 3), int(ok)])
    text = render_localization(results)
    with staged_dir(args.out) as d:
        uio.write_csv(os.path.join(d, "matches.csv"), uio.MATCH_HEADER, match_rows)
        with open(os.path.join(d, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(d, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(localization_csv(results))
        run.manifest += [
            ("store", args.store), ("anchors", args.anchors), ("queries", args.queries),
            ("query_log", args.query_log), ("n_descriptors", len(store)), ("n_queries", len(times)),
            ("zone_width", c["zone_width"]), ("n_zones", c["n_zones"]), ("delta", c["delta"]),
            ("tau", f"{index.tau:.6f}"),
        ]
        run.finish_manifest(d)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args):
    run = Run(args)
    est, _ = uio.read_estimates_csv(args.estimates)
    truth = uio.read_truth_csv(args.truth)
    report = anchor_ape(est, truth, _scene_diagonal(args, truth))
    text = render_report(report)
    if args.out:
        with staged_dir(args.out) as d:
            with open(os.path.join(d, "report.txt"), "w", encoding="utf-8") as fh:
                fh.write(text)
            with open(os.path.join(d, "report.csv"), "w", encoding="utf-8") as fh:
                fh.write(report_csv(report))
            run.manifest += [("estimates", args.estimates), ("truth", args.truth)]
            run.finish_manifest(d)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="uwbgp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--no-timings", action="store_true",
                        help="leave wall-clock timings out of outputs (byte-reproducible runs)")

    s = sub.add_parser("simulate", help="synthetic trajectory, ranges and anchor truth")
    common(s)
    s.add_argument("--scene", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", help="estimate anchor positions from poses and ranges")
    common(s)
    s.add_argument("--poses", required=True)
    s.add_argument("--ranges", required=True)
    s.add_argument("--truth", help="anchor truth CSV; adds an APE table to the report")
    s.add_argument("--scene", help="scene file, used for the diagonal of the failure rule")
    s.add_argument("--diagonal", type=float, help="scene diagonal in metres")
    s.add_argument("--jobs", type=int, help="worker processes (default: all logical CPUs)")
    s.add_argument("--strict-paper", action="store_true",
                   help="zero prior mean and no outlier pre-filter")
    s.add_argument("--trace", action="store_true", help="write the per-iteration search trace")
    s.add_argument("--write-paired", action="store_true", help="write the paired-sample CSV")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("descriptors", help="synthetic descriptor store and query set for a scene")
    common(s)
    s.add_argument("--scene", required=True)
    s.set_defaults(func=cmd_descriptors)

    s = sub.add_parser("localize", help="range-gated vs plain descriptor matching")
    common(s)
    s.add_argument("--store", required=True)
    s.add_argument("--anchors", required=True, help="anchor estimate or truth CSV")
    s.add_argument("--queries", required=True, help="query descriptor CSV")
    s.add_argument("--query-log", required=True, help="measured anchor distances per query")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", help="anchor APE report")
    common(s, out_required=False)
    s.add_argument("--estimates", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--scene")
    s.add_argument("--diagonal", type=float)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UwbGpError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
