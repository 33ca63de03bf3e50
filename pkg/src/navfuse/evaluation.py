"""Trajectory containers, file formats and accuracy metrics.

Trajectories are stored as (t, position, quaternion) arrays; the text format
is one `t tx ty tz qx qy qz qw` line per pose.  Metrics:

- ATE / ARE: absolute translation (m) and rotation (deg) error after an
  optional one-shot SE(3) or Sim(3) alignment; translation error is the mean
  of per-pose norms, reported with std, rmse and max;
- RTE / RRE: relative errors over pose pairs one meter apart (arc length
  along the reference), as % drift per meter and deg per meter;
- jump count: consecutive-sample position jumps above a threshold, for
  checking that an odometry stream stays continuous across corrections;
- jerk statistics from a five-point third-derivative stencil (exact for
  cubic position profiles).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose3, Rot3, so3_log

ASSOC_TOL = 0.005  # default timestamp association tolerance [s]


# --------------------------------------------------------------------------
# trajectory container + I/O
# --------------------------------------------------------------------------

class Trajectory:
    """Time-stamped poses as flat arrays (times (N,), pos (N,3), quat (N,4))."""

    def __init__(self, times, pos, quat):
        self.times = np.asarray(times, dtype=float)
        self.pos = np.asarray(pos, dtype=float).reshape(-1, 3)
        self.quat = np.asarray(quat, dtype=float).reshape(-1, 4)
        if not (len(self.times) == len(self.pos) == len(self.quat)):
            raise ValueError("inconsistent trajectory array lengths")

    @classmethod
    def from_poses(cls, times, poses):
        pos = np.array([p.t for p in poses], dtype=float).reshape(-1, 3)
        quat = np.array([p.rot.to_quat() for p in poses], dtype=float).reshape(-1, 4)
        return cls(np.asarray(times, dtype=float), pos, quat)

    def pose(self, i) -> Pose3:
        return Pose3(Rot3.from_quat(self.quat[i]), self.pos[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def __len__(self):
        return len(self.times)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("# t tx ty tz qx qy qz qw\n")
            for t, p, q in zip(self.times, self.pos, self.quat):
                fh.write(f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                         f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")

    @classmethod
    def read(cls, path):
        times, pos, quat = [], [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(x) for x in line.split()]
                if len(vals) != 8:
                    raise ValueError(f"expected 8 columns, got {len(vals)}")
                times.append(vals[0])
                pos.append(vals[1:4])
                quat.append(vals[4:8])
        return cls(times, pos, quat)


def write_drift_csv(path, times, poses):
    """Reference-frame drift trace T_WR as t,tx,ty,tz,qx,qy,qz,qw rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "tx", "ty", "tz", "qx", "qy", "qz", "qw"])
        for t, p in zip(times, poses):
            q = p.rot.to_quat()
            w.writerow([f"{t:.9f}"] + [f"{v:.9f}" for v in p.t] +
                       [f"{v:.9f}" for v in q])


def read_drift_csv(path):
    times, poses = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["t"]))
            q = np.array([float(row[k]) for k in ("qx", "qy", "qz", "qw")])
            t = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
            poses.append(Pose3(Rot3.from_quat(q), t))
    return np.asarray(times), poses


# --------------------------------------------------------------------------
# association and alignment
# --------------------------------------------------------------------------

def associate(times_a, times_b, tol=ASSOC_TOL):
    """Nearest-timestamp matching within tol; returns (idx_a, idx_b)."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    if len(times_a) == 0 or len(times_b) == 0:
        return np.array([], dtype=int), np.array([], dtype=int)
    pos = np.searchsorted(times_b, times_a)
    pos = np.clip(pos, 1, len(times_b) - 1) if len(times_b) > 1 else np.zeros_like(pos)
    left = np.abs(times_b[pos - 1] - times_a) if len(times_b) > 1 else None
    if len(times_b) == 1:
        nearest = np.zeros(len(times_a), dtype=int)
    else:
        right = np.abs(times_b[pos] - times_a)
        nearest = np.where(left <= right, pos - 1, pos)
    keep = np.abs(times_b[nearest] - times_a) <= tol
    return np.nonzero(keep)[0], nearest[keep]


class DegenerateAlignmentError(ValueError):
    pass


def umeyama(src, dst, with_scale=False):
    """Least-squares similarity src -> dst; returns (s, R, t).

    dst ~ s * R @ src + t.  Needs >= 3 points spanning at least a plane.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateAlignmentError("need at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if D[1] < 1e-12 * max(D[0], 1e-300):
        raise DegenerateAlignmentError("point set is (near) collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_pairs: int = 0
    ate_mean: float = float("nan")
    ate_std: float = float("nan")
    ate_rmse: float = float("nan")
    ate_max: float = float("nan")
    are_mean_deg: float = float("nan")
    are_std_deg: float = float("nan")
    rte_percent: float = float("nan")
    rre_deg_per_m: float = float("nan")
    n_rel_pairs: int = 0
    jump_count: int = -1
    jerk_mean: float = float("nan")
    jerk_max: float = float("nan")
    align_mode: str = "se3"
    scale: float = 1.0

    def as_dict(self):
        return dict(self.__dict__)

    def table(self):
        rows = [
            ("matched poses", f"{self.n_pairs}"),
            (f"ATE mean/std [m] ({self.align_mode})",
             f"{self.ate_mean:.4f} / {self.ate_std:.4f}"),
            ("ATE rmse/max [m]", f"{self.ate_rmse:.4f} / {self.ate_max:.4f}"),
            ("ARE mean/std [deg]",
             f"{self.are_mean_deg:.4f} / {self.are_std_deg:.4f}"),
            ("RTE [%]", f"{self.rte_percent:.4f}"),
            ("RRE [deg/m]", f"{self.rre_deg_per_m:.4f}"),
        ]
        if self.jump_count >= 0:
            rows.append(("position jumps", f"{self.jump_count}"))
        if np.isfinite(self.jerk_mean):
            rows.append(("|jerk| mean/max [m/s^3]",
                         f"{self.jerk_mean:.3f} / {self.jerk_max:.3f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


def _rotation_angles(quat_est, quat_ref, R_align):
    angles = np.empty(len(quat_est))
    for i in range(len(quat_est)):
        Re = R_align @ Rot3.from_quat(quat_est[i]).mat
        Rr = Rot3.from_quat(quat_ref[i]).mat
        angles[i] = np.linalg.norm(so3_log(Rot3(Rr.T @ Re)))
    return angles


def absolute_errors(est: Trajectory, ref: Trajectory, align="se3", tol=ASSOC_TOL):
    """(report, transform) with translation/rotation errors after alignment.

    align: "none" keeps both trajectories in their native frames; "se3" and
    "sim3" estimate the best rigid / similarity transform first.
    """
    ia, ib = associate(est.times, ref.times, tol)
    if len(ia) == 0:
        raise ValueError("no matching timestamps between trajectories")
    P_est = est.pos[ia]
    P_ref = ref.pos[ib]
    if align == "none":
        s, R, t = 1.0, np.eye(3), np.zeros(3)
    elif align in ("se3", "sim3"):
        s, R, t = umeyama(P_est, P_ref, with_scale=(align == "sim3"))
    else:
        raise ValueError(f"unknown alignment mode {align!r}")
    P_fit = s * P_est @ R.T + t
    err = np.linalg.norm(P_fit - P_ref, axis=1)
    ang = np.degrees(_rotation_angles(est.quat[ia], ref.quat[ib], R))
    report = MetricsReport(
        n_pairs=len(ia),
        ate_mean=float(err.mean()), ate_std=float(err.std()),
        ate_rmse=float(np.sqrt((err ** 2).mean())), ate_max=float(err.max()),
        are_mean_deg=float(ang.mean()), are_std_deg=float(ang.std()),
        align_mode=align, scale=float(s))
    return report, (s, R, t)


def relative_errors(est: Trajectory, ref: Trajectory, pair_distance=1.0,
                    tol=ASSOC_TOL):
    """Drift per meter over pose pairs pair_distance apart along the reference."""
    ia, ib = associate(est.times, ref.times, tol)
    if len(ia) < 2:
        return float("nan"), float("nan"), 0
    P_ref = ref.pos[ib]
    arc = np.concatenate([[0.0], np.cumsum(
        np.linalg.norm(np.diff(P_ref, axis=0), axis=1))])
    trans, rot = [], []
    j = 0
    for i in range(len(ia)):
        while j < len(ia) and arc[j] - arc[i] < pair_distance:
            j += 1
        if j >= len(ia):
            break
        L = arc[j] - arc[i]
        Ti_e, Tj_e = est.pose(ia[i]), est.pose(ia[j])
        Ti_r, Tj_r = ref.pose(ib[i]), ref.pose(ib[j])
        d_e = Ti_e.inverse().compose(Tj_e)
        d_r = Ti_r.inverse().compose(Tj_r)
        trans.append(np.linalg.norm(d_e.t - d_r.t) / L * 100.0)
        rot.append(np.degrees(np.linalg.norm(
            so3_log(d_r.rot.inverse().compose(d_e.rot)))) / L)
    if not trans:
        return float("nan"), float("nan"), 0
    return float(np.mean(trans)), float(np.mean(rot)), len(trans)


def jump_count(pos, threshold=0.10):
    """Number of consecutive-sample position jumps above threshold [m]."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    if len(pos) < 2:
        return 0
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return int(np.sum(steps > threshold))


def jerk_stats(times, pos):
    """(mean, max) of |d^3 p / dt^3| via the 5-point central stencil.

    Requires a uniform time grid; exact for cubic position polynomials.
    """
    times = np.asarray(times, dtype=float)
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    if len(times) < 5:
        return float("nan"), float("nan")
    h = np.diff(times)
    if np.max(np.abs(h - h[0])) > 1e-9:
        raise ValueError("jerk stencil needs a uniform time grid")
    h = float(h[0])
    j = (pos[4:] - 2.0 * pos[3:-1] + 2.0 * pos[1:-3] - pos[:-4]) / (2.0 * h ** 3)
    mags = np.linalg.norm(j, axis=1)
    return float(mags.mean()), float(mags.max())


def evaluate(est: Trajectory, ref: Trajectory, align="se3", pair_distance=1.0,
             jump_threshold=0.10, with_jerk=False, tol=ASSOC_TOL) -> MetricsReport:
    """Full metric set of an estimate against a reference."""
    report, _ = absolute_errors(est, ref, align=align, tol=tol)
    rte, rre, n_rel = relative_errors(est, ref, pair_distance, tol=tol)
    report.rte_percent = rte
    report.rre_deg_per_m = rre
    report.n_rel_pairs = n_rel
    report.jump_count = jump_count(est.pos, jump_threshold)
    if with_jerk:
        report.jerk_mean, report.jerk_max = jerk_stats(est.times, est.pos)
    return report
