"""Measurement-to-factor translation and auxiliary-variable bookkeeping.

One GraphBuilder owns the values map plus registries for reference-frame
alignment variables, landmarks and self-calibration states.  Feeding it a
measurement (already associated with a navigation state index) creates the
factor together with any auxiliary variables it needs:

- absolute measurements in a non-world reference frame attach to an
  alignment pose T_WK for the keyframe cell containing the measurement time;
  cells form a fixed global grid of width keyframe_dt, so the variable
  layout depends only on measurement timestamps, never on arrival order;
- each cell's translation anchor t_RK is the measured position of the
  earliest measurement inside that cell; the frame's first cell is anchored
  at the origin, as is every cell under origin_anchoring;
- consecutive cells are linked by random-walk factors whose translation mean
  follows the anchor difference and whose variance grows linearly with the
  time gap (floored so zero-sigma frames stay rigid but well conditioned);
- landmarks are created on first sight by back-projection; optional
  per-sensor calibration states (pose or lever-arm correction) are created
  on first use with a prior.

Out-of-order arrivals are repaired in place (re-anchoring, first-cell
demotion, walk-chain splicing); with reinit_on_reanchor the variable
initializations are also re-derived from the earliest measurement, making
the assembled graph a pure function of the measurement set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import factors as F
from .factors import Gaussian, GraphValues
from .geometry import Pose3, Rot3


def pose_key(i):
    return ("P", int(i))


def vel_key(i):
    return ("V", int(i))


def bias_key(i):
    return ("B", int(i))


def align_key(frame, cell):
    return ("R", frame, int(cell))


def landmark_key(lid):
    return ("L", lid)


def calib_key(frame):
    return ("C", frame)


class StaleMeasurementError(RuntimeError):
    """Measurement refers to a state that already left the smoothing window."""


@dataclass
class AlignmentVar:
    frame: str
    cell: int
    key: tuple
    anchor: F._Anchor
    earliest_t: float            # earliest measurement time seen in this cell
    earliest_pos: np.ndarray     # its measured position (anchor candidate)
    first_of_frame: bool
    created_t: float
    last_used_t: float
    init_meas: object = None     # earliest measurement (ingestion re-init)
    init_state_idx: int = 0
    active: bool = True
    prior: F.PriorFactorPose | None = None
    walk_in: F.RandomWalkFactor | None = None   # link from the previous cell
    belief: tuple | None = None                 # (mean Pose3, cov) when inactive


@dataclass
class LandmarkVar:
    lid: object
    key: tuple
    earliest_t: float
    created_t: float
    last_seen_t: float
    active: bool = True
    belief: tuple | None = None


@dataclass
class CalibVar:
    frame: str
    key: tuple
    kind: str            # "pose" | "position"
    created_t: float


@dataclass
class CalibConfig:
    sigma_rot: float = 0.05
    sigma_trans: float = 0.05


class GraphBuilder:
    """Owns values + factors and realizes measurements as factors."""

    def __init__(self, extrinsics, *, keyframe_dt=10.0,
                 walk_sigma_rot=0.01, walk_sigma_trans=0.03,
                 walk_sigmas=None, origin_anchoring=False,
                 alignment_priors=True, align_prior_sigmas=(1.0, 10.0),
                 calibration=None, kernels=None, reinit_on_reanchor=False):
        self.extrinsics = dict(extrinsics)
        self.keyframe_dt = float(keyframe_dt)
        self.walk_default = (float(walk_sigma_rot), float(walk_sigma_trans))
        self.walk_sigmas = dict(walk_sigmas or {})
        self.origin_anchoring = bool(origin_anchoring)
        self.alignment_priors = bool(alignment_priors)
        self.align_prior_sigmas = align_prior_sigmas
        self.calibration = dict(calibration or {})
        self.kernels = dict(kernels or {})
        self.reinit_on_reanchor = bool(reinit_on_reanchor)

        self.values = GraphValues()
        self.factors: list[F.Factor] = []
        self.alignments: dict[str, dict[int, AlignmentVar]] = {}
        self.landmarks: dict[object, LandmarkVar] = {}
        self.calibs: dict[str, CalibVar] = {}

    # -- small helpers ----------------------------------------------------

    def extrinsic(self, frame) -> Pose3:
        if frame == "I":
            return Pose3.identity()
        return self.extrinsics[frame]

    def kernel_for(self, kind):
        return self.kernels.get(kind)

    def _walk_sigma6(self, frame):
        rot, trans = self.walk_sigmas.get(frame, self.walk_default)
        return np.array([rot, rot, rot, trans, trans, trans], dtype=float)

    def cell_of(self, t):
        return int(math.floor(t / self.keyframe_dt))

    def _add(self, factor, tag):
        factor.tag = tag
        self.factors.append(factor)
        return factor

    def _remove(self, factor):
        self.factors.remove(factor)

    # -- calibration ------------------------------------------------------

    def _calib_for(self, frame, kind, t):
        cfg = self.calibration.get(frame)
        if cfg is None:
            return None, []
        if not isinstance(cfg, CalibConfig):
            cfg = CalibConfig(**cfg)
        var = self.calibs.get(frame)
        if var is not None:
            if var.kind != kind:
                raise ValueError(
                    f"calibration for frame {frame!r} created as {var.kind!r}, "
                    f"incompatible with a {kind!r} measurement")
            return var, []
        key = calib_key(frame)
        var = CalibVar(frame, key, kind, t)
        self.calibs[frame] = var
        created = []
        if kind == "pose":
            self.values[key] = Pose3.identity()
            sig = np.array([cfg.sigma_rot] * 3 + [cfg.sigma_trans] * 3)
            created.append(self._add(
                F.PriorFactorPose(key, Pose3.identity(), Gaussian.sigmas(sig)),
                (-1e18, "calib_prior", frame)))
        else:
            self.values[key] = np.zeros(3)
            created.append(self._add(
                F.PriorFactorVector(key, np.zeros(3),
                                    Gaussian.isotropic(3, cfg.sigma_trans)),
                (-1e18, "calib_prior", frame)))
        return var, created

    # -- alignment variables ----------------------------------------------

    @staticmethod
    def _measured_position(meas):
        if meas.kind == "abs_pose":
            return np.asarray(meas.pose.t, dtype=float)
        return np.asarray(meas.position, dtype=float)

    def _zero_residual_alignment(self, meas, nav_pose, anchor_pos, calib_value):
        """Alignment pose making the measurement's residual vanish."""
        T_IS = self.extrinsic(meas.sensor_frame)
        if meas.kind == "abs_pose":
            C = calib_value if isinstance(calib_value, Pose3) else Pose3.identity()
            zp = Pose3(meas.pose.rot, meas.pose.t - anchor_pos)
            return nav_pose.compose(T_IS).compose(C).compose(zp.inverse())
        c = calib_value if calib_value is not None and not isinstance(calib_value, Pose3) \
            else np.zeros(3)
        w = T_IS.t + T_IS.R @ c
        u = nav_pose.t + nav_pose.R @ w
        zp = np.asarray(meas.position, dtype=float) - anchor_pos
        return Pose3(Rot3.identity(), u - zp)

    def _alignment_prior(self, var):
        rot, trans = self.align_prior_sigmas
        sig = np.array([rot] * 3 + [trans] * 3)
        prior = F.PriorFactorPose(var.key, self.values[var.key], Gaussian.sigmas(sig))
        var.prior = prior
        return self._add(prior, (var.cell * self.keyframe_dt, "align_prior", var.frame))

    def _link_walk(self, prev: AlignmentVar, nxt: AlignmentVar):
        gap = (nxt.cell - prev.cell) * self.keyframe_dt
        f = F.RandomWalkFactor(prev.key, nxt.key, prev.anchor, nxt.anchor,
                               self._walk_sigma6(nxt.frame), gap)
        nxt.walk_in = f
        return self._add(f, (nxt.cell * self.keyframe_dt, "align_walk", nxt.frame))

    def _reactivate_alignment(self, var, t):
        mean, cov = var.belief
        self.values[var.key] = mean
        cov = 0.5 * (cov + cov.T) + 1e-12 * np.eye(6)
        prior = F.PriorFactorPose(var.key, mean, Gaussian(cov))
        var.prior = prior
        var.active = True
        var.belief = None
        return [self._add(prior, (float(t), "align_virtual", var.frame, var.cell))]

    def _anchor_target(self, var: AlignmentVar):
        if self.origin_anchoring or var.first_of_frame:
            return np.zeros(3)
        return var.earliest_pos

    def _init_calib_value(self, meas):
        calib = self.calibs.get(meas.sensor_frame)
        return self.values[calib.key] if calib else None

    def _apply_anchor(self, var: AlignmentVar):
        """Move var's anchor to its current target, keeping estimates coherent.

        In ingestion mode (reinit_on_reanchor) the value is re-derived from
        the cell's earliest measurement, so the result does not depend on the
        order updates happened in; otherwise the current estimate is shifted
        exactly, leaving the implied world-to-reference transform unchanged.
        """
        target = self._anchor_target(var)
        if np.array_equal(target, var.anchor.t_RK):
            return
        old_value = self.values[var.key]
        shift = Pose3(Rot3.identity(), target - var.anchor.t_RK)
        var.anchor.t_RK = target.copy()
        if self.reinit_on_reanchor:
            nav_pose = self.values[pose_key(var.init_state_idx)]
            new_value = self._zero_residual_alignment(
                var.init_meas, nav_pose, target,
                self._init_calib_value(var.init_meas))
        else:
            new_value = old_value.compose(shift)
        if var.prior is not None:
            # transport the prior mean so its residual is exactly unchanged
            var.prior.prior = new_value.compose(
                old_value.inverse()).compose(var.prior.prior)
        self.values[var.key] = new_value

    def _note_alignment_obs(self, var: AlignmentVar, meas, t, state_idx):
        """Track the earliest measurement of the cell; re-anchor when it changes."""
        if t < var.earliest_t:
            var.earliest_t = t
            var.earliest_pos = self._measured_position(meas)
            var.init_meas = meas
            var.init_state_idx = state_idx
            self._apply_anchor(var)
        var.last_used_t = max(var.last_used_t, t)

    def _alignment_for(self, meas, t, state_idx, nav_pose, calib_value):
        """Get or create the alignment variable covering time t for the frame."""
        frame = meas.ref_frame
        cells = self.alignments.setdefault(frame, {})
        cell = self.cell_of(t)
        created = []
        var = cells.get(cell)
        if var is not None:
            if not var.active:
                created += self._reactivate_alignment(var, t)
            self._note_alignment_obs(var, meas, t, state_idx)
            return var, created

        prev = max((c for c in cells if c < cell), default=None)
        nxt = min((c for c in cells if c > cell), default=None)
        first = not cells or (nxt is not None and cell < min(cells))
        var = AlignmentVar(frame, cell, align_key(frame, cell), F._Anchor(),
                           t, self._measured_position(meas), first, t, t,
                           init_meas=meas, init_state_idx=state_idx)
        var.anchor.t_RK = self._anchor_target(var).copy()
        cells[cell] = var
        self.values[var.key] = self._zero_residual_alignment(
            meas, nav_pose, var.anchor.t_RK, calib_value)
        if self.alignment_priors:
            created.append(self._alignment_prior(var))

        if first and nxt is not None:
            # the old first cell is demoted; its anchor moves off the origin
            for other in cells.values():
                if other is not var and other.first_of_frame:
                    other.first_of_frame = False
                    self._apply_anchor(other)
        if prev is not None:
            prev_var = cells[prev]
            if not prev_var.active:
                created += self._reactivate_alignment(prev_var, t)
            created.append(self._link_walk(prev_var, var))
        if nxt is not None:
            nxt_var = cells[nxt]
            if nxt_var.walk_in is not None:
                self._remove(nxt_var.walk_in)
                nxt_var.walk_in = None
            created.append(self._link_walk(var, nxt_var))
        return var, created

    # -- landmarks ---------------------------------------------------------

    def _landmark_init(self, meas, nav_pose, calib_value):
        T_IS = self.extrinsic(meas.sensor_frame)
        D = calib_value if isinstance(calib_value, Pose3) else Pose3.identity()
        return nav_pose.act(T_IS.act(D.act(np.asarray(meas.position, dtype=float))))

    def _landmark_for(self, meas, t, nav_pose, calib_value):
        lid = meas.landmark_id
        created = []
        var = self.landmarks.get(lid)
        if var is None:
            var = LandmarkVar(lid, landmark_key(lid), t, t, t)
            self.landmarks[lid] = var
            self.values[var.key] = self._landmark_init(meas, nav_pose, calib_value)
        elif not var.active:
            mean, cov = var.belief
            self.values[var.key] = mean
            cov = 0.5 * (cov + cov.T) + 1e-12 * np.eye(3)
            created.append(self._add(
                F.PriorFactorVector(var.key, mean, Gaussian(cov)),
                (float(t), "lm_virtual", str(lid))))
            var.active = True
            var.belief = None
        elif self.reinit_on_reanchor and t < var.earliest_t:
            # ingestion mode: initialization comes from the earliest sighting
            self.values[var.key] = self._landmark_init(meas, nav_pose, calib_value)
        var.earliest_t = min(var.earliest_t, t)
        var.last_seen_t = max(var.last_seen_t, t)
        return var, created

    # -- lifecycle hooks used by the fixed-lag estimator --------------------

    def deactivate_alignment(self, var: AlignmentVar, mean, cov):
        var.active = False
        var.belief = (mean, cov)
        var.prior = None
        var.walk_in = None
        if var.key in self.values:
            del self.values[var.key]

    def deactivate_landmark(self, var: LandmarkVar, mean, cov):
        var.active = False
        var.belief = (np.asarray(mean, dtype=float), cov)
        if var.key in self.values:
            del self.values[var.key]

    def active_alignment_vars(self):
        for cells in self.alignments.values():
            for var in cells.values():
                if var.active:
                    yield var

    def latest_alignment(self, frame):
        cells = self.alignments.get(frame)
        if not cells:
            return None
        return cells[max(cells)]

    # -- main entry ---------------------------------------------------------

    def add_measurement(self, meas, state_idx):
        """Create the factor (plus auxiliary variables) for one measurement.

        Returns the list of factors added to the graph by this call; the
        measurement factor itself is always the last element.
        """
        kind = meas.kind
        t = meas.t
        created = []
        p_key = pose_key(state_idx)
        nav_pose = self.values[p_key]
        kernel = self.kernel_for(kind)

        if kind in ("abs_pose", "abs_pos"):
            calib_kind = "pose" if kind == "abs_pose" else "position"
            calib, cf = self._calib_for(meas.sensor_frame, calib_kind, t)
            created += cf
            calib_value = self.values[calib.key] if calib else None
            T_IS = self.extrinsic(meas.sensor_frame)
            var = None
            if meas.ref_frame != "W":
                var, af = self._alignment_for(meas, t, state_idx, nav_pose,
                                              calib_value)
                created += af
            a_key = var.key if var else None
            anchor = var.anchor if var else None
            if kind == "abs_pose":
                f = F.AbsolutePoseFactor(
                    p_key, meas.pose, Gaussian(meas.cov), T_IS,
                    align_key=a_key, anchor=anchor,
                    calib_key=calib.key if calib else None, kernel=kernel)
            else:
                f = F.AbsolutePositionFactor(
                    p_key, meas.position, Gaussian(meas.cov), T_IS,
                    align_key=a_key, anchor=anchor,
                    calib_key=calib.key if calib else None, kernel=kernel)
            created.append(self._add(f, (t, kind, meas.sensor_frame)))
            return created

        if kind == "landmark":
            calib, cf = self._calib_for(meas.sensor_frame, "pose", t)
            created += cf
            calib_value = self.values[calib.key] if calib else None
            var, lf = self._landmark_for(meas, t, nav_pose, calib_value)
            created += lf
            f = F.LandmarkFactor(
                p_key, var.key, meas.position, Gaussian(meas.cov),
                self.extrinsic(meas.sensor_frame),
                calib_key=calib.key if calib else None, kernel=kernel)
            created.append(self._add(f, (t, kind, meas.sensor_frame)))
            return created

        if kind == "local_vel":
            calib, cf = self._calib_for(meas.sensor_frame, "pose", t)
            created += cf
            T_IS = self.extrinsic(meas.sensor_frame)
            omega_body = T_IS.R @ np.asarray(meas.angular, dtype=float)
            f = F.LocalVelocityFactor(
                p_key, vel_key(state_idx), meas.velocity, Gaussian(meas.cov),
                T_IS, omega_body,
                calib_key=calib.key if calib else None, kernel=kernel)
            created.append(self._add(f, (t, kind, meas.sensor_frame)))
            return created

        raise ValueError(f"cannot build a factor for measurement kind {kind!r}")


def create_holistic_factor(builder: GraphBuilder, meas, state_idx):
    """Measurement -> factor translation (auxiliary variables included)."""
    return builder.add_measurement(meas, state_idx)
