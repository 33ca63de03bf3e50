"""Online fixed-lag smoothing and offline batch refinement.

The estimator ticks on a fixed divider of the IMU stream: every M-th sample
becomes a navigation state (pose, velocity, bias), consecutive states are
linked by preintegrated IMU and bias random-walk factors, and non-IMU
measurements attach to the state sharing their timestamp (nearest state for
off-grid inputs).  Online operation optimizes a trailing window and converts
older states into a Gaussian prior by marginalization; auxiliary variables
(reference-frame alignments, landmarks) are marginalized out once unused and
revived later from their saved belief.

Two outputs run at full IMU rate on top of the tick states:

- a world-frame stream: dead-reckoning from the latest optimized state, so
  it snaps when a correction arrives;
- an odometry stream: the same motion re-based through a yaw + translation
  offset that is updated at every correction to keep the reported position
  exactly continuous (roll/pitch follow the estimate, so they may step by
  tiny amounts; position never does).

Batch refinement rebuilds the whole graph from a log with deterministic
ingestion ordering: measurements are sorted by (t, kind, frame, landmark),
and alignment variables are re-initialized from their defining measurement
whenever re-anchored, which makes the result independent of arrival order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import factors as F
from .evaluation import Trajectory
from .factors import Gaussian, make_kernel
from .geometry import Pose3, Rot3
from .graph import GraphBuilder, bias_key, pose_key, vel_key
from .imu import ImuBias, NavState, NoiseSpec, PreintegratedImu, integrate_state
from .measurements import MeasurementLog, merged_replay
from .solver import SolverOptions, marginal_covariance, marginalize, optimize

PRIOR_TAG = -1e18


@dataclass
class EstimatorConfig:
    """Knobs shared by the online and batch estimators."""
    state_rate: float = 10.0
    lag: float = 5.0
    init_window: float = 0.5
    init_mode: str = "meta"            # "meta" | "gravity"
    init_pos: np.ndarray | None = None
    init_yaw: float = 0.0
    init_vel: np.ndarray | None = None
    noise: NoiseSpec | None = None     # overrides the log's recorded spec
    prior_rot: float = 0.02
    prior_trans: float = 0.02
    prior_vel: float = 0.05
    prior_gyro_bias: float = 0.02
    prior_accel_bias: float = 0.2
    keyframe_dt: float = 10.0
    walk_sigma_rot: float = 0.01
    walk_sigma_trans: float = 0.03
    walk_sigmas: dict | None = None    # per ref-frame overrides
    random_walk: bool = True           # False freezes alignment chains
    origin_anchoring: bool = False
    alignment_priors: bool = True
    kernels: dict = field(default_factory=dict)   # kind -> (name, param)
    calibration: dict | None = None
    online_iterations: int = 2
    # near-Newton damping: heavier damping suppresses the weakly observable
    # yaw/bias directions every tick and the residual error accumulates
    online_init_lambda: float = 1e-6
    batch_iterations: int = 60
    batch_rel_tol: float = 1e-8
    batch_gradient_tol: float = 1e-12
    batch_init_lambda: float = 1e-6
    marginalize: bool = True


def _yaw_of(R):
    return math.atan2(R[1, 0], R[0, 0])


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _noise_spec(log: MeasurementLog, config: EstimatorConfig) -> NoiseSpec:
    if config.noise is not None:
        return config.noise
    g_vec = np.array([0.0, 0.0, -float(log.gravity)])
    d = log.meta.get("imu_noise", {})
    return NoiseSpec(
        gyro_noise=float(d.get("gyro_noise", 1.7e-4)),
        accel_noise=float(d.get("accel_noise", 2.0e-3)),
        gyro_bias_walk=float(d.get("gyro_bias_walk", 1.0e-5)),
        accel_bias_walk=float(d.get("accel_bias_walk", 1.0e-4)),
        gravity=g_vec)


def _builder(log: MeasurementLog, config: EstimatorConfig,
             reinit_on_reanchor: bool) -> GraphBuilder:
    if config.random_walk:
        rot, trans = config.walk_sigma_rot, config.walk_sigma_trans
        per_frame = dict(config.walk_sigmas or {})
    else:
        rot, trans = 0.0, 0.0
        per_frame = {}
    kernels = {kind: make_kernel(name, param)
               for kind, (name, param) in config.kernels.items()}
    return GraphBuilder(
        log.extrinsics, keyframe_dt=config.keyframe_dt,
        walk_sigma_rot=rot, walk_sigma_trans=trans, walk_sigmas=per_frame,
        origin_anchoring=config.origin_anchoring,
        alignment_priors=config.alignment_priors,
        calibration=config.calibration, kernels=kernels,
        reinit_on_reanchor=reinit_on_reanchor)


def _init_state_from_meta(log: MeasurementLog):
    info = log.meta.get("init")
    if not info:
        raise ValueError("log has no recorded initial state; "
                         "use the gravity init mode")
    R = np.asarray(info["R"], dtype=float).reshape(3, 3)
    return (float(info["t"]), Pose3(Rot3(R), np.asarray(info["p"], dtype=float)),
            np.asarray(info["v"], dtype=float))


def _init_state_from_gravity(samples, gravity_mag, config: EstimatorConfig):
    if len(samples) < 5:
        raise ValueError("not enough IMU samples in the init window")
    f = np.mean([s.accel for s in samples], axis=0)
    mag = float(np.linalg.norm(f))
    if not (0.8 * gravity_mag <= mag <= 1.2 * gravity_mag):
        raise ValueError(
            f"mean specific force {mag:.2f} m/s^2 is too far from gravity; "
            "the platform must start (nearly) static")
    roll = math.atan2(f[1], f[2])
    pitch = math.atan2(-f[0], math.hypot(f[1], f[2]))
    R = Rot3.from_rpy(roll, pitch, config.init_yaw)
    pos = np.zeros(3) if config.init_pos is None else np.asarray(config.init_pos)
    vel = np.zeros(3) if config.init_vel is None else np.asarray(config.init_vel)
    return Pose3(R, pos.astype(float)), vel.astype(float)


def _grid(log: MeasurementLog, config: EstimatorConfig):
    """(imu_rate, samples_per_state, first_tick_index) from the log."""
    imu = log.imu()
    if len(imu) < 3:
        raise ValueError("log carries too few IMU samples")
    dts = np.diff([s.t for s in imu[:50]])
    imu_rate = float(round(1.0 / float(np.median(dts))))
    m = imu_rate / config.state_rate
    if abs(m - round(m)) > 1e-9:
        raise ValueError(
            f"state rate {config.state_rate} must divide imu rate {imu_rate}")
    j_start = int(round(config.init_window * imu_rate))
    return imu_rate, int(round(m)), j_start


# --------------------------------------------------------------------------
# online estimator
# --------------------------------------------------------------------------

@dataclass
class OnlineResult:
    odometry: Trajectory
    odometry_vel: np.ndarray
    world_times: np.ndarray
    world_pos: np.ndarray
    world_yaw_offsets: np.ndarray        # odometry yaw minus world yaw, per sample
    ticks: Trajectory                    # optimized pose after each epoch
    tick_vels: np.ndarray
    state_values: dict                   # idx -> (t, Pose3, vel, bias vector)
    window_counts: list                  # (t, nav states in window)
    dropped: int
    estimator: "OnlineEstimator"

    def world_trajectory(self) -> Trajectory:
        """Full-rate world-frame stream (undo the odometry re-basing)."""
        quat = np.empty_like(self.odometry.quat)
        for i, (q, off) in enumerate(zip(self.odometry.quat,
                                         self.world_yaw_offsets)):
            R_w = Rot3.rz(off).mat.T @ Rot3.from_quat(q).mat
            quat[i] = Rot3(R_w).to_quat()
        return Trajectory(self.world_times, self.world_pos, quat)


class OnlineEstimator:
    """Fixed-lag smoother fed one measurement at a time in arrival order."""

    def __init__(self, log: MeasurementLog, config: EstimatorConfig | None = None):
        self.config = config or EstimatorConfig()
        self.log = log
        self.noise = _noise_spec(log, self.config)
        self.gravity = self.noise.gravity
        self.builder = _builder(log, self.config, reinit_on_reanchor=False)
        self.imu_rate, self.m_per_tick, self.j_start = _grid(log, self.config)

        self._warmup: list = []
        self._initialized = False
        self._cur_idx = -1
        self._last_t = None
        self._pim: PreintegratedImu | None = None
        self._prop: NavState | None = None
        self.window: dict[int, float] = {}
        self.state_values: dict = {}
        self._pending: list = []
        self.dropped = 0
        self._oldest_live = 0
        self._new_info = False

        self._yaw_off = 0.0
        self._pos_off = np.zeros(3)
        self._odo_t: list = []
        self._odo_pos: list = []
        self._odo_quat: list = []
        self._odo_vel: list = []
        self._world_pos: list = []
        self._world_yaw: list = []
        self._tick_t: list = []
        self._tick_pose: list = []
        self._tick_vel: list = []
        self.window_counts: list = []

    # -- grid helpers -----------------------------------------------------

    def _k_of(self, t):
        return int(round(t * self.imu_rate))

    def _state_idx_of(self, t):
        k = self._k_of(t)
        return int(round((k - self.j_start) / self.m_per_tick))

    def _is_tick(self, k):
        return k >= self.j_start and (k - self.j_start) % self.m_per_tick == 0

    # -- outputs ----------------------------------------------------------

    def _emit(self, state: NavState):
        Rz = Rot3.rz(self._yaw_off).mat
        p_o = Rz @ state.pose.t + self._pos_off
        R_o = Rz @ state.pose.R
        self._odo_t.append(state.t)
        self._odo_pos.append(p_o)
        self._odo_quat.append(Rot3(R_o).to_quat())
        self._odo_vel.append(Rz @ state.vel)
        self._world_pos.append(state.pose.t.copy())
        self._world_yaw.append(self._yaw_off)

    def _rebase(self, new_state: NavState):
        """Re-anchor the odometry offset so the last emitted position is
        reproduced exactly by the corrected estimate."""
        if not self._odo_t:
            return
        last_pos = self._odo_pos[-1]
        last_quat = self._odo_quat[-1]
        yaw_last = _yaw_of(Rot3.from_quat(last_quat).mat)
        self._yaw_off = _wrap(yaw_last - _yaw_of(new_state.pose.R))
        Rz = Rot3.rz(self._yaw_off).mat
        self._pos_off = last_pos - Rz @ new_state.pose.t

    # -- initialization ---------------------------------------------------

    def _initialize(self, sample):
        cfg = self.config
        if cfg.init_mode == "meta":
            t0, pose0, vel0 = _init_state_from_meta(self.log)
            if abs(t0 - sample.t) > 0.5 / self.imu_rate:
                raise ValueError(
                    f"recorded init time {t0} is off the state grid "
                    f"(first tick at {sample.t})")
        else:
            pose0, vel0 = _init_state_from_gravity(
                self._warmup, float(np.linalg.norm(self.gravity)), cfg)
        bias0 = np.zeros(6)
        state = NavState(sample.t, pose0, vel0, ImuBias())

        b = self.builder
        b.values[pose_key(0)] = pose0
        b.values[vel_key(0)] = vel0.copy()
        b.values[bias_key(0)] = bias0
        sig_pose = np.array([cfg.prior_rot] * 3 + [cfg.prior_trans] * 3)
        sig_bias = np.array([cfg.prior_gyro_bias] * 3 + [cfg.prior_accel_bias] * 3)
        b._add(F.PriorFactorPose(pose_key(0), pose0, Gaussian.sigmas(sig_pose)),
               (PRIOR_TAG, "prior", "P0"))
        b._add(F.PriorFactorVector(vel_key(0), vel0,
                                   Gaussian.isotropic(3, cfg.prior_vel)),
               (PRIOR_TAG, "prior", "V0"))
        b._add(F.PriorFactorVector(bias_key(0), bias0, Gaussian.sigmas(sig_bias)),
               (PRIOR_TAG, "prior", "B0"))

        self.window[0] = sample.t
        self._cur_idx = 0
        self._last_t = sample.t
        self._prop = state
        self._pim = PreintegratedImu(ImuBias(), self.noise, sample.t)
        self._initialized = True
        self._warmup.clear()
        self._emit(state)
        self._record_tick(sample.t, pose0, vel0)

    def _record_tick(self, t, pose, vel):
        self._tick_t.append(t)
        self._tick_pose.append(pose)
        self._tick_vel.append(np.asarray(vel, dtype=float).copy())

    # -- ingestion --------------------------------------------------------

    def add_imu(self, sample):
        if not self._initialized:
            self._warmup.append(sample)
            if self._is_tick(self._k_of(sample.t)):
                self._initialize(sample)
            return
        dt = sample.t - self._last_t
        self._pim.integrate(sample.gyro, sample.accel, dt)
        self._prop = integrate_state(self._prop, sample.gyro, sample.accel,
                                     dt, self.gravity)
        self._last_t = sample.t
        self._emit(self._prop)
        if self._is_tick(self._k_of(sample.t)):
            self._tick(sample.t)

    def add_measurement(self, meas):
        if not self._initialized:
            self._pending.append(meas)
            return
        idx = self._state_idx_of(meas.t)
        if idx < self._oldest_live:
            self.dropped += 1
            return
        if idx > self._cur_idx:
            self._pending.append(meas)
            return
        self.builder.add_measurement(meas, idx)
        self._new_info = True

    def _drain_pending(self):
        still = []
        for meas in self._pending:
            idx = self._state_idx_of(meas.t)
            if idx < self._oldest_live:
                self.dropped += 1
            elif idx > self._cur_idx:
                still.append(meas)
            else:
                self.builder.add_measurement(meas, idx)
                self._new_info = True
        self._pending = still

    # -- per-tick work ----------------------------------------------------

    def _tick(self, t):
        cfg = self.config
        b = self.builder
        j = self._cur_idx + 1
        prev = self._cur_idx
        b.values[pose_key(j)] = self._prop.pose
        b.values[vel_key(j)] = self._prop.vel.copy()
        b.values[bias_key(j)] = np.asarray(b.values[bias_key(prev)]).copy()
        b._add(F.ImuFactor((pose_key(prev), vel_key(prev), bias_key(prev),
                            pose_key(j), vel_key(j)), self._pim, self.gravity),
               (t, "imu", ""))
        dt = self._pim.delta_t
        walk = np.array([self.noise.gyro_bias_walk ** 2 * dt] * 3 +
                        [self.noise.accel_bias_walk ** 2 * dt] * 3)
        b._add(F.BetweenFactorVector(bias_key(prev), bias_key(j), np.zeros(6),
                                     Gaussian(np.diag(np.maximum(walk, 1e-16)))),
               (t, "bias_walk", ""))
        self.window[j] = t
        self._cur_idx = j
        self._drain_pending()

        opts = SolverOptions(max_iterations=cfg.online_iterations,
                             rel_tol=1e-8,
                             init_lambda=cfg.online_init_lambda)
        values, report = optimize(b.factors, b.values, opts)
        b.values = values
        self._new_info = False

        new_state = NavState(t, values[pose_key(j)],
                             np.asarray(values[vel_key(j)], dtype=float),
                             ImuBias.from_vector(values[bias_key(j)]))
        self._rebase(new_state)
        self._prop = new_state
        self._pim = PreintegratedImu(new_state.bias, self.noise, t)
        self._record_tick(t, new_state.pose, new_state.vel)

        if cfg.marginalize:
            self._marginalize_stale(t)
        self.window_counts.append((t, len(self.window)))

    def _marginalize_stale(self, t_now):
        cfg = self.config
        b = self.builder
        horizon = t_now - cfg.lag
        old = sorted(j for j, tj in self.window.items() if tj < horizon)
        # never drop the two newest states: the next IMU factor needs them
        old = [j for j in old if j < self._cur_idx - 1]

        stale_aligns = [v for v in b.active_alignment_vars()
                        if v.last_used_t < horizon]
        stale_lms = [v for v in b.landmarks.values()
                     if v.active and v.last_seen_t < horizon]
        if not old and not stale_aligns and not stale_lms:
            return

        aux_keys = [v.key for v in stale_aligns] + [v.key for v in stale_lms]
        beliefs = {}
        if aux_keys:
            beliefs = marginal_covariance(b.factors, b.values, aux_keys)

        drop = []
        for j in old:
            drop += [pose_key(j), vel_key(j), bias_key(j)]
        drop += aux_keys

        result = marginalize(b.factors, b.values, drop)
        removed = set(map(id, result.removed_factors))
        b.factors = [f for f in b.factors if id(f) not in removed]
        if result.marginal_factor is not None:
            b.factors.append(result.marginal_factor)
        # clear references to factors the marginalization just absorbed, so
        # later cell insertions do not try to splice them out again
        for cells in b.alignments.values():
            for var in cells.values():
                if var.prior is not None and id(var.prior) in removed:
                    var.prior = None
                if var.walk_in is not None and id(var.walk_in) in removed:
                    var.walk_in = None

        for j in old:
            self.state_values[j] = (
                self.window.pop(j), b.values[pose_key(j)],
                np.asarray(b.values[vel_key(j)], dtype=float),
                np.asarray(b.values[bias_key(j)], dtype=float))
            del b.values[pose_key(j)]
            del b.values[vel_key(j)]
            del b.values[bias_key(j)]
            self._oldest_live = max(self._oldest_live, j + 1)
        for v in stale_aligns:
            b.deactivate_alignment(v, b.values[v.key] if v.key in b.values
                                   else v.belief[0], beliefs[v.key])
        for v in stale_lms:
            b.deactivate_landmark(v, b.values[v.key] if v.key in b.values
                                  else v.belief[0], beliefs[v.key])

    # -- wrap-up ----------------------------------------------------------

    def finish(self) -> OnlineResult:
        b = self.builder
        for j, tj in self.window.items():
            self.state_values[j] = (
                tj, b.values[pose_key(j)],
                np.asarray(b.values[vel_key(j)], dtype=float),
                np.asarray(b.values[bias_key(j)], dtype=float))
        odo = Trajectory(np.asarray(self._odo_t), np.asarray(self._odo_pos),
                         np.asarray(self._odo_quat))
        ticks = Trajectory.from_poses(np.asarray(self._tick_t), self._tick_pose)
        return OnlineResult(
            odometry=odo, odometry_vel=np.asarray(self._odo_vel),
            world_times=np.asarray(self._odo_t),
            world_pos=np.asarray(self._world_pos),
            world_yaw_offsets=np.asarray(self._world_yaw),
            ticks=ticks, tick_vels=np.asarray(self._tick_vel),
            state_values=self.state_values,
            window_counts=self.window_counts, dropped=self.dropped,
            estimator=self)


def run_online(log: MeasurementLog, config: EstimatorConfig | None = None,
               delays=None) -> OnlineResult:
    """Replay a log in arrival order through the fixed-lag smoother."""
    config = config or EstimatorConfig()
    est = OnlineEstimator(log, config)
    for ev in merged_replay(log, delays, lag=config.lag):
        if ev.meas.kind == "imu":
            est.add_imu(ev.meas)
        else:
            est.add_measurement(ev.meas)
    return est.finish()


# --------------------------------------------------------------------------
# batch refinement
# --------------------------------------------------------------------------

@dataclass
class BatchResult:
    values: object
    report: object
    state_times: np.ndarray
    trajectory: Trajectory
    vels: np.ndarray
    builder: GraphBuilder
    n_states: int

    def biases(self):
        return np.array([np.asarray(self.values[bias_key(j)])
                         for j in range(self.n_states)])


def _meas_sort_key(m):
    lid = getattr(m, "landmark_id", -1)
    return (m.t, m.kind, m.sensor_frame, lid)


def batch_optimize(log: MeasurementLog, config: EstimatorConfig | None = None,
                   init: str = "deadreckon",
                   online_result: OnlineResult | None = None,
                   delays=None) -> BatchResult:
    """Single full-graph solve over a log.

    init: "deadreckon" integrates the IMU from the recorded start state,
    "online" copies the fixed-lag pass's estimates, "identity" stress-tests
    convergence from a blank guess.

    delays, when given, makes ingestion follow the delayed arrival order
    instead of the canonical sorted order; the assembled graph is designed
    to come out identical either way.
    """
    config = config or EstimatorConfig()
    imu_rate, m_per_tick, j_start = _grid(log, config)
    samples = sorted(log.imu(), key=lambda s: s.t)
    noise = _noise_spec(log, config)
    g_vec = noise.gravity

    tick_pos = [i for i, s in enumerate(samples)
                if (lambda k: k >= j_start and (k - j_start) % m_per_tick == 0)(
                    int(round(s.t * imu_rate)))]
    if not tick_pos:
        raise ValueError("no state ticks inside the log span")
    state_times = np.array([samples[i].t for i in tick_pos])
    n_states = len(tick_pos)

    if config.init_mode == "meta" or init in ("deadreckon",):
        t0, pose0, vel0 = _init_state_from_meta(log)
    else:
        pose0, vel0 = _init_state_from_gravity(
            samples[:tick_pos[0] + 1], float(np.linalg.norm(g_vec)), config)

    b = _builder(log, config, reinit_on_reanchor=True)

    # -- initial values ----------------------------------------------------
    if init == "deadreckon":
        cur = NavState(state_times[0], pose0, vel0, ImuBias())
        b.values[pose_key(0)] = cur.pose
        b.values[vel_key(0)] = cur.vel.copy()
        j = 1
        t_prev = state_times[0]       # exact stamps, not accumulated time
        for i in range(tick_pos[0] + 1, len(samples)):
            s = samples[i]
            cur = integrate_state(cur, s.gyro, s.accel, s.t - t_prev, g_vec)
            t_prev = s.t
            if j < n_states and i == tick_pos[j]:
                b.values[pose_key(j)] = cur.pose
                b.values[vel_key(j)] = cur.vel.copy()
                j += 1
        for j in range(n_states):
            b.values[bias_key(j)] = np.zeros(6)
    elif init == "online":
        if online_result is None:
            raise ValueError("online init needs an OnlineResult")
        sv = online_result.state_values
        for j in range(n_states):
            if j in sv:
                _, pose, vel, bias = sv[j]
            else:                       # missing tail: hold the last estimate
                _, pose, vel, bias = sv[max(sv)]
            b.values[pose_key(j)] = pose
            b.values[vel_key(j)] = np.asarray(vel, dtype=float).copy()
            b.values[bias_key(j)] = np.asarray(bias, dtype=float).copy()
    elif init == "identity":
        for j in range(n_states):
            b.values[pose_key(j)] = Pose3.identity()
            b.values[vel_key(j)] = np.zeros(3)
            b.values[bias_key(j)] = np.zeros(6)
    else:
        raise ValueError(f"unknown init mode {init!r}")

    # -- priors ------------------------------------------------------------
    cfg = config
    sig_pose = np.array([cfg.prior_rot] * 3 + [cfg.prior_trans] * 3)
    sig_bias = np.array([cfg.prior_gyro_bias] * 3 + [cfg.prior_accel_bias] * 3)
    b._add(F.PriorFactorPose(pose_key(0), pose0, Gaussian.sigmas(sig_pose)),
           (PRIOR_TAG, "prior", "P0"))
    b._add(F.PriorFactorVector(vel_key(0), vel0,
                               Gaussian.isotropic(3, cfg.prior_vel)),
           (PRIOR_TAG, "prior", "V0"))
    b._add(F.PriorFactorVector(bias_key(0), np.zeros(6),
                               Gaussian.sigmas(sig_bias)),
           (PRIOR_TAG, "prior", "B0"))

    # -- IMU chain ---------------------------------------------------------
    for j in range(1, n_states):
        pim = PreintegratedImu(
            ImuBias.from_vector(b.values[bias_key(j - 1)]), noise,
            state_times[j - 1])
        t_prev = state_times[j - 1]
        for i in range(tick_pos[j - 1] + 1, tick_pos[j] + 1):
            s = samples[i]
            pim.integrate(s.gyro, s.accel, s.t - t_prev)
            t_prev = s.t
        b._add(F.ImuFactor((pose_key(j - 1), vel_key(j - 1), bias_key(j - 1),
                            pose_key(j), vel_key(j)), pim, g_vec),
               (state_times[j], "imu", ""))
        dt = pim.delta_t
        walk = np.array([noise.gyro_bias_walk ** 2 * dt] * 3 +
                        [noise.accel_bias_walk ** 2 * dt] * 3)
        b._add(F.BetweenFactorVector(bias_key(j - 1), bias_key(j), np.zeros(6),
                                     Gaussian(np.diag(np.maximum(walk, 1e-16)))),
               (state_times[j], "bias_walk", ""))

    # -- measurements, in a delivery-independent order ---------------------
    t_first, t_last = state_times[0], state_times[-1]
    if delays:
        ordered = [ev.meas for ev in merged_replay(log, delays)
                   if ev.meas.kind != "imu"]
    else:
        ordered = sorted(log.non_imu(), key=_meas_sort_key)
    for m in ordered:
        if m.t < t_first - 0.5 / config.state_rate or \
           m.t > t_last + 0.5 / config.state_rate:
            continue
        k = int(round(m.t * imu_rate))
        idx = int(round((k - j_start) / m_per_tick))
        idx = min(max(idx, 0), n_states - 1)
        b.add_measurement(m, idx)

    opts = SolverOptions(max_iterations=cfg.batch_iterations,
                         rel_tol=cfg.batch_rel_tol,
                         gradient_tol=cfg.batch_gradient_tol,
                         init_lambda=cfg.batch_init_lambda)
    values, report = optimize(b.factors, b.values, opts)
    b.values = values

    poses = [values[pose_key(j)] for j in range(n_states)]
    vels = np.array([np.asarray(values[vel_key(j)]) for j in range(n_states)])
    traj = Trajectory.from_poses(state_times, poses)
    return BatchResult(values, report, state_times, traj, vels, b, n_states)


# --------------------------------------------------------------------------
# frame queries
# --------------------------------------------------------------------------

def frame_transform(builder: GraphBuilder, values, frame, cell) -> Pose3:
    """Estimated world-from-reference transform of one alignment cell."""
    var = builder.alignments[frame][cell]
    if var.key in values:
        V = values[var.key]
    elif var.belief is not None:
        V = var.belief[0]
    else:
        raise KeyError(f"alignment ({frame}, {cell}) has no estimate")
    return Pose3(V.rot, V.t - V.R @ var.anchor.t_RK)


def alignment_trace(builder: GraphBuilder, values, frame):
    """[(cell, T_WR)] for every cell of a reference frame, cell-sorted."""
    cells = builder.alignments.get(frame, {})
    return [(c, frame_transform(builder, values, frame, c))
            for c in sorted(cells)]


def pose_in_frame(builder: GraphBuilder, values, frame, state_idx, t) -> Pose3:
    """Body pose re-expressed in a measurement reference frame at time t."""
    cells = builder.alignments.get(frame)
    if not cells:
        raise KeyError(f"no alignment history for frame {frame!r}")
    usable = [c for c in cells if c <= builder.cell_of(t)] or [min(cells)]
    T_WR = frame_transform(builder, values, frame, max(usable))
    return T_WR.inverse().compose(values[pose_key(state_idx)])
