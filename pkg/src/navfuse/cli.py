"""Command line front end.

Five subcommands cover the whole workflow:

    simulate      generate a synthetic log + ground truth into a directory
    fuse-online   replay a log through the fixed-lag smoother
    fuse-offline  solve the full batch problem over a log
    eval          score an estimated trajectory against a reference
    export        dump the streams of a log to plot-ready CSV files

All trajectory files use the TUM layout (t x y z qx qy qz qw, one pose per
line); reference-frame traces are CSV with the same pose columns.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import sim
from .estimator import (EstimatorConfig, alignment_trace, batch_optimize,
                        pose_in_frame, run_online)
from .evaluation import Trajectory, absolute_errors, evaluate, write_drift_csv
from .graph import pose_key
from .measurements import parse_log, write_log
from .solver import marginal_covariance

_SCENARIOS = {
    "hike": sim.hike_scenario,
    "parkour": sim.parkour_scenario,
    "corridor": sim.corridor_scenario,
}


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _parse_delay(spec: str):
    """'kind:sec' or 'kind/frame:sec' -> (key, seconds)."""
    stream, _, val = spec.rpartition(":")
    if not stream:
        raise ValueError(f"delay {spec!r} must look like kind[:frame]=KIND:SEC")
    key = tuple(stream.split("/", 1)) if "/" in stream else stream
    return key, float(val)


def _estimator_config(args) -> EstimatorConfig:
    cfg = EstimatorConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            data = yaml.safe_load(fh) or {}
        valid = {f.name for f in dataclasses.fields(EstimatorConfig)}
        for key, val in data.items():
            if key not in valid:
                raise ValueError(f"unknown config key {key!r}")
            if key == "kernels":
                val = {kind: (str(n), float(p)) for kind, (n, p) in val.items()}
            setattr(cfg, key, val)
    if getattr(args, "rate", None) is not None:
        cfg.state_rate = args.rate
    if getattr(args, "lag", None) is not None:
        cfg.lag = args.lag
    if getattr(args, "no_random_walk", False):
        cfg.random_walk = False
    if getattr(args, "origin_anchoring", False):
        cfg.origin_anchoring = True
    return cfg


def _delays(args):
    out = {}
    for spec in args.inject_delay or []:
        key, sec = _parse_delay(spec)
        out[key] = sec
    return out or None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_alignments(out: Path, builder, values):
    for frame in sorted(builder.alignments):
        cells = alignment_trace(builder, values, frame)
        times = [builder.keyframe_dt * c for c, _ in cells]
        write_drift_csv(out / f"alignment_{frame}.csv", times,
                        [T for _, T in cells])


def _report(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    make = _SCENARIOS[args.scenario]
    kwargs = {"seed": args.seed, "noise": not args.noise_free}
    if args.duration is not None:
        kwargs["duration"] = args.duration
    if args.no_drift:
        if args.scenario == "hike":
            kwargs["drift"] = False
        elif args.scenario == "corridor":
            kwargs["drift_rot"] = 0.0
            kwargs["drift_trans"] = 0.0
    result = sim.simulate(make(**kwargs))
    out = _out_dir(args)
    write_log(result.log, out / "log.jsonl")
    result.gt.write(out / "gt.tum")
    for frame, (times, poses) in sorted(result.drift.items()):
        write_drift_csv(out / f"drift_{frame}.csv", times, poses)
    if result.landmarks:
        with open(out / "landmarks.csv", "w") as fh:
            fh.write("id,x,y,z\n")
            for lid in sorted(result.landmarks):
                p = result.landmarks[lid]
                fh.write(f"{lid},{p[0]:.9f},{p[1]:.9f},{p[2]:.9f}\n")
    print(f"wrote {out / 'log.jsonl'} "
          f"({len(result.log.imu())} IMU samples, "
          f"{len(result.log.non_imu())} measurements)")
    return 0


def cmd_fuse_online(args) -> int:
    log = parse_log(args.log)
    cfg = _estimator_config(args)
    t0 = time.perf_counter()
    res = run_online(log, cfg, delays=_delays(args))
    wall = time.perf_counter() - t0
    out = _out_dir(args)
    res.odometry.write(out / "odometry.tum")
    res.world_trajectory().write(out / "world.tum")
    res.ticks.write(out / "states.tum")
    _write_alignments(out, res.estimator.builder, res.estimator.builder.values)
    counts = [n for _, n in res.window_counts]
    _report(out / "report.json", {
        "mode": "online",
        "states": len(res.state_values),
        "dropped": res.dropped,
        "window_min": min(counts) if counts else 0,
        "window_max": max(counts) if counts else 0,
        "wall_time_s": round(wall, 3),
    })
    print(f"online pass: {len(res.state_values)} states, "
          f"{res.dropped} dropped, {wall:.1f}s")
    return 0


def cmd_fuse_offline(args) -> int:
    log = parse_log(args.log)
    cfg = _estimator_config(args)
    delays = _delays(args)
    online = None
    if args.init == "online":
        online = run_online(log, cfg, delays=delays)
    t0 = time.perf_counter()
    res = batch_optimize(log, cfg, init=args.init, online_result=online,
                         delays=delays)
    wall = time.perf_counter() - t0
    out = _out_dir(args)
    res.trajectory.write(out / "batch.tum")
    _write_alignments(out, res.builder, res.values)
    for frame in sorted(res.builder.alignments):
        poses = [pose_in_frame(res.builder, res.values, frame, j,
                               res.state_times[j])
                 for j in range(res.n_states)]
        Trajectory.from_poses(res.state_times, poses).write(
            out / f"frame_{frame}.tum")
    if args.marginals:
        keys = [pose_key(j) for j in range(res.n_states)]
        cov = marginal_covariance(res.builder.factors, res.values, keys)
        with open(out / "marginals.csv", "w") as fh:
            fh.write("t,sig_rx,sig_ry,sig_rz,sig_tx,sig_ty,sig_tz\n")
            for j, key in enumerate(keys):
                sig = np.sqrt(np.diag(cov[key]))
                fh.write(f"{res.state_times[j]:.9f}," +
                         ",".join(f"{s:.9e}" for s in sig) + "\n")
    rep = res.report
    _report(out / "report.json", {
        "mode": "batch",
        "init": args.init,
        "states": res.n_states,
        "iterations": rep.iterations,
        "initial_cost": rep.initial_cost,
        "final_cost": rep.final_cost,
        "converged": rep.converged,
        "wall_time_s": round(wall, 3),
    })
    print(f"batch solve: {res.n_states} states, {rep.iterations} iterations, "
          f"cost {rep.initial_cost:.3e} -> {rep.final_cost:.3e}, "
          f"converged={rep.converged}")
    return 0


def cmd_eval(args) -> int:
    est = Trajectory.read(args.est)
    ref = Trajectory.read(args.ref)
    report = evaluate(est, ref, align=args.align,
                      pair_distance=args.rte_distance,
                      jump_threshold=args.jump_threshold,
                      with_jerk=args.jerk)
    print(report.table())
    if args.json:
        _report(Path(args.json), report.as_dict())
    if args.errors_csv:
        rep, (s, R, t) = absolute_errors(est, ref, align=args.align)
        from .evaluation import associate
        ia, ib = associate(est.times, ref.times)
        fit = s * est.pos[ia] @ R.T + t
        err = np.linalg.norm(fit - ref.pos[ib], axis=1)
        with open(args.errors_csv, "w") as fh:
            fh.write("t,ate_err\n")
            for ti, ei in zip(est.times[ia], err):
                fh.write(f"{ti:.9f},{ei:.9e}\n")
    return 0


def cmd_export(args) -> int:
    log = parse_log(args.log)
    out = _out_dir(args)
    with open(out / "imu.csv", "w") as fh:
        fh.write("t,gx,gy,gz,ax,ay,az\n")
        for s in log.imu():
            fh.write(f"{s.t:.9f}," +
                     ",".join(f"{v:.9e}" for v in (*s.gyro, *s.accel)) + "\n")
    cols = {
        "abs_pos": ("x,y,z", lambda m: m.position),
        "abs_pose": ("x,y,z,qx,qy,qz,qw",
                     lambda m: (*m.pose.t, *m.pose.rot.to_quat())),
        "local_vel": ("vx,vy,vz", lambda m: m.velocity),
        "landmark": ("id,x,y,z", lambda m: (m.landmark_id, *m.position)),
    }
    for (kind, frame), items in sorted(log.streams.items()):
        if kind == "imu":
            continue
        header, pick = cols[kind]
        with open(out / f"{kind}_{frame}.csv", "w") as fh:
            fh.write("t," + header + "\n")
            for m in items:
                vals = ",".join(str(v) if isinstance(v, int) else f"{v:.9e}"
                                for v in pick(m))
                fh.write(f"{m.t:.9f},{vals}\n")
    _report(out / "meta.json", {"gravity": log.gravity, "meta": log.meta})
    print(f"exported {len(log.streams)} streams to {out}")
    return 0


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------

def _add_estimator_flags(p):
    p.add_argument("--config", help="YAML file with estimator settings")
    p.add_argument("--rate", type=float, help="navigation state rate [Hz]")
    p.add_argument("--lag", type=float, help="smoother window length [s]")
    p.add_argument("--inject-delay", action="append", metavar="STREAM:SEC",
                   help="delay one stream (kind or kind/frame), repeatable")
    p.add_argument("--no-random-walk", action="store_true",
                   help="freeze reference-frame alignments over time")
    p.add_argument("--origin-anchoring", action="store_true",
                   help="parameterize alignments at the world origin")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="navfuse", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic log")
    p.add_argument("--scenario", choices=sorted(_SCENARIOS), default="hike")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float)
    p.add_argument("--noise-free", action="store_true")
    p.add_argument("--no-drift", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fuse-online", help="run the fixed-lag smoother")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_fuse_online)

    p = sub.add_parser("fuse-offline", help="solve the full batch problem")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=("deadreckon", "online", "identity"),
                   default="deadreckon")
    p.add_argument("--marginals", action="store_true",
                   help="also write per-state pose marginal sigmas")
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_fuse_offline)

    p = sub.add_parser("eval", help="score a trajectory against a reference")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--align", choices=("none", "se3", "sim3"), default="se3")
    p.add_argument("--rte-distance", type=float, default=1.0)
    p.add_argument("--jump-threshold", type=float, default=0.10)
    p.add_argument("--jerk", action="store_true")
    p.add_argument("--json", help="also write the metrics as JSON")
    p.add_argument("--errors-csv", help="write per-sample errors for plotting")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="dump log streams to CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
