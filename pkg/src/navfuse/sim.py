"""Deterministic multi-sensor scenario generator.

Produces a measurement log (IMU + absolute pose/position, landmark and
body-velocity streams), the exact ground-truth trajectory the measurements
were taken from, and the injected reference-frame drift, all reproducible
bit-for-bit from a seed.

Layout of a run:

- an analytic path supplies position/velocity/acceleration and Euler-angle
  attitude with analytic rates;
- the ground truth is the Euler-integrated strapdown chain over the sampled
  gyro / specific-force signals (the same integration the estimator's
  dead-reckoning uses), so noise-free measurements generated from the chain
  have exactly-zero model residuals;
- non-IMU streams are emitted on IMU sample indices at integer rate
  dividers, which keeps their timestamps on the estimator's state grid;
- per reference frame an SE(3) random-walk drift trace can be injected and
  is returned alongside the log for later comparison.

Randomness comes from a counter-based SplitMix64 generator with labelled
substreams, so adding one stream never perturbs the draws of another.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import Trajectory
from .geometry import Pose3, Rot3, se3_exp
from .imu import NavState, ImuBias, integrate_state
from .measurements import (AbsolutePose, AbsolutePosition, ImuSample,
                           LandmarkObs, LocalVelocity, MeasurementLog)

SIGMA_FLOOR = 1e-3       # reported stddev floor so covariances stay SPD
GRAVITY = 9.80665


# --------------------------------------------------------------------------
# counter-based random streams
# --------------------------------------------------------------------------

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix_int(z: int) -> int:
    z &= _MASK
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _fnv1a(label: str) -> int:
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def _mix_array(z):
    with np.errstate(over="ignore"):
        z = z.astype(np.uint64, copy=True)
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


class SampleStream:
    """One labelled substream: counted uniform / normal draws."""

    def __init__(self, state0: int):
        self._s0 = state0 & _MASK
        self._count = 0

    def uniforms(self, n: int):
        idx = self._count + np.arange(n, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            states = np.uint64(self._s0) + idx * np.uint64(_GOLDEN)
        bits = _mix_array(states)
        return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def normals(self, shape):
        n = int(np.prod(shape))
        u1 = self.uniforms(n)
        u2 = self.uniforms(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)


class Rng:
    """Seeded factory of independent labelled substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK

    def stream(self, label: str) -> SampleStream:
        return SampleStream(_mix_int(self.seed * _GOLDEN + _fnv1a(label)))


# --------------------------------------------------------------------------
# kinematic helpers
# --------------------------------------------------------------------------

def zyx_rates_to_body(rpy, rpy_rates):
    """Body angular velocity from ZYX Euler angles and their time rates."""
    rpy = np.asarray(rpy, dtype=float)
    rates = np.asarray(rpy_rates, dtype=float)
    r, p = rpy[..., 0], rpy[..., 1]
    rd, pd, yd = rates[..., 0], rates[..., 1], rates[..., 2]
    sr, cr = np.sin(r), np.cos(r)
    sp, cp = np.sin(p), np.cos(p)
    wx = rd - yd * sp
    wy = pd * cr + yd * cp * sr
    wz = yd * cp * cr - pd * sr
    return np.stack([wx, wy, wz], axis=-1)


class RampedPhase:
    """Phase that smoothly accelerates to a constant rate.

    The rate multiplier follows the smoothstep 3u^2 - 2u^3 over the ramp
    window, so the phase, its rate and its acceleration are all C^1.
    """

    def __init__(self, rate, ramp_time):
        self.w = float(rate)
        self.T = float(ramp_time)
        if self.T <= 0:
            raise ValueError("ramp_time must be positive")

    def value(self, t):
        t = np.asarray(t, dtype=float)
        u = np.clip(t / self.T, 0.0, 1.0)
        ramp_part = self.T * (u ** 3 - 0.5 * u ** 4)
        return self.w * np.where(t < self.T, ramp_part,
                                 0.5 * self.T + (t - self.T))

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        u = np.clip(t / self.T, 0.0, 1.0)
        return self.w * (3.0 * u ** 2 - 2.0 * u ** 3)

    def accel(self, t):
        t = np.asarray(t, dtype=float)
        u = np.clip(t / self.T, 0.0, 1.0)
        return np.where(t < self.T, self.w * (6.0 * u - 6.0 * u ** 2) / self.T,
                        0.0)


class _PathBase:
    """Analytic path: planar curve + vertical bob + roll/pitch wobble.

    Subclasses provide _xy(phi) -> x, y, x', y', x'', y'' (derivatives with
    respect to the phase) and own a RampedPhase; attitude is yaw-follows-
    tangent plus small sinusoidal roll/pitch so all gyro axes stay excited.
    """

    def __init__(self, phase: RampedPhase, z_amp=0.0, z_freq=0.3,
                 roll_amp=0.08, roll_freq=0.25, pitch_amp=0.06,
                 pitch_freq=0.2, pitch_phase=1.0):
        self.phase = phase
        self.z_amp = float(z_amp)
        self.z_freq = float(z_freq)
        self.roll_amp = float(roll_amp)
        self.roll_freq = float(roll_freq)
        self.pitch_amp = float(pitch_amp)
        self.pitch_freq = float(pitch_freq)
        self.pitch_phase = float(pitch_phase)

    # -- planar curve interface ------------------------------------------
    def _xy(self, phi):
        raise NotImplementedError

    def _z(self, t):
        w = 2.0 * np.pi * self.z_freq
        z = self.z_amp * np.sin(w * t)
        return z, self.z_amp * w * np.cos(w * t), -self.z_amp * w * w * np.sin(w * t)

    def position(self, t):
        phi = self.phase.value(t)
        x, y, *_ = self._xy(phi)
        z, _, _ = self._z(np.asarray(t, dtype=float))
        return np.stack([x, y, z], axis=-1)

    def velocity(self, t):
        phi = self.phase.value(t)
        pd = self.phase.rate(t)
        _, _, xp, yp, _, _ = self._xy(phi)
        _, zd, _ = self._z(np.asarray(t, dtype=float))
        return np.stack([xp * pd, yp * pd, zd], axis=-1)

    def acceleration(self, t):
        phi = self.phase.value(t)
        pd = self.phase.rate(t)
        pdd = self.phase.accel(t)
        _, _, xp, yp, xpp, ypp = self._xy(phi)
        _, _, zdd = self._z(np.asarray(t, dtype=float))
        ax = xpp * pd * pd + xp * pdd
        ay = ypp * pd * pd + yp * pdd
        return np.stack([ax, ay, zdd], axis=-1)

    def rpy(self, t):
        t = np.asarray(t, dtype=float)
        phi = self.phase.value(t)
        _, _, xp, yp, _, _ = self._xy(phi)
        yaw = np.arctan2(yp, xp)
        roll = self.roll_amp * np.sin(2.0 * np.pi * self.roll_freq * t)
        pitch = self.pitch_amp * np.sin(2.0 * np.pi * self.pitch_freq * t
                                        + self.pitch_phase)
        return np.stack([roll, pitch, yaw], axis=-1)

    def rpy_rates(self, t):
        t = np.asarray(t, dtype=float)
        phi = self.phase.value(t)
        pd = self.phase.rate(t)
        _, _, xp, yp, xpp, ypp = self._xy(phi)
        dyaw_dphi = (xp * ypp - yp * xpp) / (xp * xp + yp * yp)
        wr = 2.0 * np.pi * self.roll_freq
        wp = 2.0 * np.pi * self.pitch_freq
        roll_d = self.roll_amp * wr * np.cos(wr * t)
        pitch_d = self.pitch_amp * wp * np.cos(wp * t + self.pitch_phase)
        return np.stack([roll_d, pitch_d, dyaw_dphi * pd], axis=-1)


class CirclePath(_PathBase):
    """Constant-radius loop entered through a smooth speed ramp."""

    def __init__(self, radius=25.0, speed=1.3, ramp_time=3.0,
                 center=(0.0, 0.0), **kw):
        super().__init__(RampedPhase(speed / radius, ramp_time), **kw)
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def _xy(self, phi):
        r = self.radius
        c, s = np.cos(phi), np.sin(phi)
        x = self.center[0] + r * c
        y = self.center[1] + r * s
        return x, y, -r * s, r * c, -r * c, -r * s


class FigureEightPath(_PathBase):
    """Gerono lemniscate x = A sin(phi), y = B sin(phi) cos(phi)."""

    def __init__(self, ax=10.0, ay=6.0, speed=2.0, ramp_time=3.0, **kw):
        # nominal rate: perimeter of the bounding ellipse-ish figure
        scale = math.hypot(ax, ay)
        super().__init__(RampedPhase(speed / scale, ramp_time), **kw)
        self.ax = float(ax)
        self.ay = float(ay)

    def _xy(self, phi):
        A, B = self.ax, self.ay
        s, c = np.sin(phi), np.cos(phi)
        s2, c2 = np.sin(2.0 * phi), np.cos(2.0 * phi)
        x = A * s
        y = 0.5 * B * s2
        return x, y, A * c, B * c2, -A * s, -2.0 * B * s2


class WaypointPath(_PathBase):
    """Natural cubic spline through waypoints, traversed at constant speed.

    The phase runs over the spline parameter; speed is matched to the
    chord-length of the waypoint polyline, so the true pace wobbles a few
    percent around the requested one.
    """

    def __init__(self, waypoints, speed=2.0, ramp_time=3.0, **kw):
        from scipy.interpolate import CubicSpline
        W = np.asarray(waypoints, dtype=float)
        if W.ndim != 2 or W.shape[1] != 3 or len(W) < 3:
            raise ValueError("need at least 3 xyz waypoints")
        chord = float(np.sum(np.linalg.norm(np.diff(W, axis=0), axis=1)))
        u_rate = speed * (len(W) - 1) / chord
        super().__init__(RampedPhase(u_rate, ramp_time), **kw)
        self.u_max = float(len(W) - 1)
        self.spline = CubicSpline(np.arange(len(W), dtype=float), W, axis=0,
                                  bc_type="natural")
        self._d1 = self.spline.derivative(1)
        self._d2 = self.spline.derivative(2)
        self.chord_length = chord

    def _eval(self, phi):
        u = np.clip(phi, 0.0, self.u_max)
        return self.spline(u), self._d1(u), self._d2(u)

    def _xy(self, phi):
        p, d1, d2 = self._eval(phi)
        return (p[..., 0], p[..., 1], d1[..., 0], d1[..., 1],
                d2[..., 0], d2[..., 1])

    # override the z channel: it comes from the spline, plus the bob
    def position(self, t):
        phi = self.phase.value(t)
        p, _, _ = self._eval(phi)
        z, _, _ = self._z(np.asarray(t, dtype=float))
        out = p.copy()
        out[..., 2] += z
        return out

    def velocity(self, t):
        phi = self.phase.value(t)
        pd = self.phase.rate(t)
        _, d1, _ = self._eval(phi)
        _, zd, _ = self._z(np.asarray(t, dtype=float))
        out = d1 * np.asarray(pd)[..., None]
        out[..., 2] += zd
        return out

    def acceleration(self, t):
        phi = self.phase.value(t)
        pd = np.asarray(self.phase.rate(t))
        pdd = np.asarray(self.phase.accel(t))
        _, d1, d2 = self._eval(phi)
        _, _, zdd = self._z(np.asarray(t, dtype=float))
        out = d2 * (pd * pd)[..., None] + d1 * pdd[..., None]
        out[..., 2] += zdd
        return out


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class StreamSpec:
    """One emitted measurement stream.

    rate must divide the IMU rate; sigma is (rot, trans) for abs_pose and a
    scalar stddev otherwise.  Landmark streams observe every landmark within
    max_range of the sensor.  outages are [t0, t1) windows with no output.
    """
    kind: str
    frame: str
    rate: float
    sigma: object = 0.0
    ref_frame: str = "W"
    outages: tuple = ()
    max_range: float = float("inf")

    def sigma_pair(self):
        if np.isscalar(self.sigma):
            return float(self.sigma), float(self.sigma)
        rot, trans = self.sigma
        return float(rot), float(trans)


@dataclass
class DriftSpec:
    """Random-walk densities of a reference frame, applied at `rate` Hz.

    `about` picks the point each increment is composed around: "origin"
    perturbs the frame about its own origin, "rig" about the rig's current
    position — the way scan-matcher error accrues, and the regime where
    far-from-origin anchoring choices start to matter.
    """
    sigma_rot: float = 0.0       # rad / sqrt(s)
    sigma_trans: float = 0.0     # m / sqrt(s)
    rate: float = 1.0
    about: str = "origin"


@dataclass
class ImuSpec:
    """Simulated IMU: noise densities, constant bias, optional bias walk."""
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    gyro_bias_walk: float = 0.0
    accel_bias_walk: float = 0.0
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)

    def assumed_densities(self):
        """Densities the estimator should assume (floored for clean logs)."""
        return {
            "gyro_noise": max(self.gyro_noise, 1.7e-4),
            "accel_noise": max(self.accel_noise, 2.0e-3),
            "gyro_bias_walk": max(self.gyro_bias_walk, 1.0e-5),
            "accel_bias_walk": max(self.accel_bias_walk, 1.0e-4),
        }


@dataclass
class SimConfig:
    duration: float
    path: object
    extrinsics: dict
    streams: list
    imu: ImuSpec = field(default_factory=ImuSpec)
    drift: dict = field(default_factory=dict)        # ref_frame -> DriftSpec
    landmarks: np.ndarray | None = None              # (L, 3) world points
    imu_rate: float = 200.0
    init_window: float = 0.5
    seed: int = 0
    state_rate: float = 10.0                         # hint stored in meta
    meta: dict = field(default_factory=dict)


@dataclass
class SimResult:
    log: MeasurementLog
    gt: Trajectory
    gt_vel: np.ndarray
    gt_bias: np.ndarray                              # (N, 6) at sample times
    drift: dict                                      # frame -> (times, [Pose3])
    landmarks: dict
    config: SimConfig


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def _check_divider(imu_rate, rate, what):
    step = imu_rate / rate
    if abs(step - round(step)) > 1e-9:
        raise ValueError(f"{what} rate {rate} must divide imu rate {imu_rate}")
    return int(round(step))


def _in_outage(t, outages):
    return any(t0 <= t < t1 for t0, t1 in outages)


def _drift_trace(spec: DriftSpec, duration, stream: SampleStream,
                 centers=None):
    n = int(math.ceil(duration * spec.rate)) + 1
    dtd = 1.0 / spec.rate
    sig = np.array([spec.sigma_rot] * 3 + [spec.sigma_trans] * 3) * math.sqrt(dtd)
    xi = stream.normals((n - 1, 6)) * sig
    poses = [Pose3.identity()]
    for k in range(n - 1):
        step = se3_exp(xi[k])
        if centers is not None:
            # conjugate by Trans(c): rotate/translate about the point c
            c = centers[k]
            step = Pose3(step.rot, c + step.t - step.R @ c)
        poses.append(poses[-1].compose(step))
    times = np.arange(n) / spec.rate
    return times, poses


def _drift_at(times, poses, rate, t):
    idx = min(int(math.floor(t * rate)), len(poses) - 1)
    return poses[idx]


def simulate(cfg: SimConfig) -> SimResult:
    imu_rate = float(cfg.imu_rate)
    dt = 1.0 / imu_rate
    N = int(round(cfg.duration * imu_rate))
    if N < 2:
        raise ValueError("duration too short for the IMU rate")
    times = np.arange(N + 1) * dt
    tau = times[:N]                       # interval starts carried by samples
    g_vec = np.array([0.0, 0.0, -GRAVITY])
    rng = Rng(cfg.seed)

    # analytic signals over the full stamp grid (rates needed at emissions)
    rpy_full = cfg.path.rpy(times)
    rates_full = cfg.path.rpy_rates(times)
    omega_full = zyx_rates_to_body(rpy_full, rates_full)
    acc_a = cfg.path.acceleration(tau)

    # strapdown ground-truth chain (bias-free)
    p0 = cfg.path.position(0.0)
    v0 = cfg.path.velocity(0.0)
    state = NavState(0.0, Pose3(Rot3.from_rpy(*rpy_full[0]), p0), v0, ImuBias())
    R_chain = np.empty((N + 1, 3, 3))
    p_chain = np.empty((N + 1, 3))
    v_chain = np.empty((N + 1, 3))
    f_true = np.empty((N, 3))
    R_chain[0], p_chain[0], v_chain[0] = state.pose.R, state.pose.t, state.vel
    for k in range(N):
        f_true[k] = R_chain[k].T @ (acc_a[k] - g_vec)
        state = integrate_state(state, omega_full[k], f_true[k],
                                times[k + 1] - times[k], g_vec)
        R_chain[k + 1] = state.pose.R
        p_chain[k + 1] = state.pose.t
        v_chain[k + 1] = state.vel

    # measured IMU: true signal + bias trace + white noise
    bias_g = np.tile(np.asarray(cfg.imu.gyro_bias, dtype=float), (N, 1))
    bias_a = np.tile(np.asarray(cfg.imu.accel_bias, dtype=float), (N, 1))
    if cfg.imu.gyro_bias_walk > 0:
        steps = rng.stream("gyro_bias_walk").normals((N, 3))
        bias_g = bias_g + np.cumsum(
            steps * cfg.imu.gyro_bias_walk * math.sqrt(dt), axis=0)
    if cfg.imu.accel_bias_walk > 0:
        steps = rng.stream("accel_bias_walk").normals((N, 3))
        bias_a = bias_a + np.cumsum(
            steps * cfg.imu.accel_bias_walk * math.sqrt(dt), axis=0)
    gyro_meas = omega_full[:N] + bias_g
    accel_meas = f_true + bias_a
    if cfg.imu.gyro_noise > 0:
        gyro_meas = gyro_meas + rng.stream("gyro_noise").normals((N, 3)) \
            * (cfg.imu.gyro_noise / math.sqrt(dt))
    if cfg.imu.accel_noise > 0:
        accel_meas = accel_meas + rng.stream("accel_noise").normals((N, 3)) \
            * (cfg.imu.accel_noise / math.sqrt(dt))

    # reference-frame drift traces
    drift = {}
    for frame, spec in cfg.drift.items():
        if spec.about == "rig":
            n_steps = int(math.ceil(cfg.duration * spec.rate))
            ks = np.minimum(np.round(np.arange(n_steps) / spec.rate
                                     * imu_rate).astype(int), N)
            centers = p_chain[ks]
        elif spec.about == "origin":
            centers = None
        else:
            raise ValueError(f"unknown drift composition point {spec.about!r}")
        drift[frame] = _drift_trace(spec, cfg.duration,
                                    rng.stream(f"drift/{frame}"), centers)

    landmarks = {}
    if cfg.landmarks is not None:
        lms = np.asarray(cfg.landmarks, dtype=float).reshape(-1, 3)
        landmarks = {i: lms[i] for i in range(len(lms))}

    log = MeasurementLog(gravity=GRAVITY, extrinsics=dict(cfg.extrinsics))
    for k in range(N):
        log.add(ImuSample(times[k + 1], gyro_meas[k], accel_meas[k]))

    j_start = int(round(cfg.init_window * imu_rate))
    if j_start >= N:
        raise ValueError("init window longer than the run")

    m_state = imu_rate / cfg.state_rate
    if abs(m_state - round(m_state)) > 1e-9:
        raise ValueError(f"state rate {cfg.state_rate} must divide "
                         f"imu rate {imu_rate}")
    for spec in cfg.streams:
        step = _check_divider(imu_rate, spec.rate, f"stream {spec.kind}")
        if step % int(round(m_state)) != 0:
            raise ValueError(
                f"stream {spec.kind}/{spec.frame} at {spec.rate} Hz does not "
                f"land on the {cfg.state_rate} Hz state grid")
        noise = rng.stream(f"meas/{spec.kind}/{spec.frame}")
        T_IS = cfg.extrinsics[spec.frame]
        sig_rot, sig_trans = spec.sigma_pair()
        eff_rot = max(sig_rot, SIGMA_FLOOR)
        eff_trans = max(sig_trans, SIGMA_FLOOR)
        for k in range(j_start, N + 1, step):
            t = times[k]
            if _in_outage(t, spec.outages):
                continue
            X = Pose3(Rot3(R_chain[k]), p_chain[k])
            if spec.ref_frame in drift:
                d_times, d_poses = drift[spec.ref_frame]
                T_WR = _drift_at(d_times, d_poses,
                                 cfg.drift[spec.ref_frame].rate, t)
            else:
                T_WR = None

            if spec.kind == "abs_pos":
                u = X.t + X.R @ T_IS.t
                z = u if T_WR is None else T_WR.R.T @ (u - T_WR.t)
                if sig_trans > 0:
                    z = z + noise.normals(3) * sig_trans
                log.add(AbsolutePosition(t, spec.ref_frame, spec.frame, z,
                                         np.eye(3) * eff_trans ** 2))
            elif spec.kind == "abs_pose":
                T_WS = X.compose(T_IS)
                z = T_WS if T_WR is None else T_WR.inverse().compose(T_WS)
                if sig_rot > 0 or sig_trans > 0:
                    eta = noise.normals(6) * np.array(
                        [sig_rot] * 3 + [sig_trans] * 3)
                    z = z.compose(se3_exp(eta))
                cov = np.diag([eff_rot ** 2] * 3 + [eff_trans ** 2] * 3)
                log.add(AbsolutePose(t, spec.ref_frame, spec.frame, z, cov))
            elif spec.kind == "local_vel":
                omega_I = omega_full[k]
                angular = T_IS.R.T @ omega_I
                omega_body = T_IS.R @ angular
                z = T_IS.R.T @ (X.R.T @ v_chain[k]
                                + np.cross(omega_body, T_IS.t))
                if sig_trans > 0:
                    z = z + noise.normals(3) * sig_trans
                log.add(LocalVelocity(t, spec.frame, z, angular,
                                      np.eye(3) * eff_trans ** 2))
            elif spec.kind == "landmark":
                if not landmarks:
                    raise ValueError("landmark stream needs cfg.landmarks")
                p_S = X.t + X.R @ T_IS.t
                T_SI = T_IS.inverse()
                for lid in sorted(landmarks):
                    l_w = landmarks[lid]
                    if np.linalg.norm(l_w - p_S) > spec.max_range:
                        continue
                    q = X.R.T @ (l_w - X.t)
                    z = T_SI.act(q)
                    if sig_trans > 0:
                        z = z + noise.normals(3) * sig_trans
                    log.add(LandmarkObs(t, spec.frame, lid, z,
                                        np.eye(3) * eff_trans ** 2))
            else:
                raise ValueError(f"unknown stream kind {spec.kind!r}")

    log.meta = {
        "seed": int(cfg.seed),
        "imu_rate": imu_rate,
        "duration": float(cfg.duration),
        "init_window": float(cfg.init_window),
        "state_rate": float(cfg.state_rate),
        "imu_noise": cfg.imu.assumed_densities(),
        "init": {
            "t": float(times[j_start]),
            "R": [float(x) for x in R_chain[j_start].reshape(-1)],
            "p": [float(x) for x in p_chain[j_start]],
            "v": [float(x) for x in v_chain[j_start]],
        },
    }
    log.meta.update(cfg.meta)

    quat = np.empty((N + 1, 4))
    for k in range(N + 1):
        quat[k] = Rot3(R_chain[k]).to_quat()
    gt = Trajectory(times, p_chain, quat)
    gt_bias = np.hstack([bias_g, bias_a])
    return SimResult(log, gt, v_chain, gt_bias, drift, landmarks, cfg)


# --------------------------------------------------------------------------
# canned scenarios
# --------------------------------------------------------------------------

def _default_extrinsics():
    return {
        "gnss": Pose3(Rot3.identity(), np.array([-0.11, 0.02, 0.43])),
        "lo": Pose3(Rot3.from_rpy(0.0, 0.02, 0.5),
                    np.array([0.25, 0.0, 0.18])),
        "cam": Pose3(Rot3.from_rpy(0.03, -0.35, 0.0),
                     np.array([0.3, -0.05, 0.1])),
        "wheel": Pose3(Rot3.from_rpy(0.0, 0.0, 0.1),
                       np.array([-0.3, 0.0, -0.4])),
    }


def _ring_landmarks(seed, count, radius, spread, z_lo, z_hi, center=(0, 0)):
    s = Rng(seed).stream("landmark_field")
    ang = s.uniforms(count) * 2.0 * np.pi
    rad = radius + (s.uniforms(count) - 0.5) * 2.0 * spread
    z = z_lo + s.uniforms(count) * (z_hi - z_lo)
    return np.stack([center[0] + rad * np.cos(ang),
                     center[1] + rad * np.sin(ang), z], axis=1)


def _box_landmarks(seed, count, x_rng, y_rng, z_rng):
    s = Rng(seed).stream("landmark_field")
    u = s.uniforms((3 * count)).reshape(count, 3)
    lo = np.array([x_rng[0], y_rng[0], z_rng[0]])
    hi = np.array([x_rng[1], y_rng[1], z_rng[1]])
    return lo + u * (hi - lo)


def hike_scenario(seed=0, duration=90.0, imu_rate=200.0, noise=True,
                  drift=True, landmark_count=48, **overrides) -> SimConfig:
    """Outdoor loop: GNSS position + drifting scan-matcher pose + landmarks
    + body velocity.  The workhorse scenario."""
    path = CirclePath(radius=25.0, speed=1.3, ramp_time=3.0, z_amp=0.15)
    imu = ImuSpec(gyro_noise=1.7e-4, accel_noise=2.0e-3,
                  gyro_bias_walk=1.0e-5, accel_bias_walk=1.0e-4,
                  gyro_bias=(0.002, -0.001, 0.0015),
                  accel_bias=(0.05, -0.03, 0.02)) if noise else ImuSpec()
    sig = (lambda s: s) if noise else (lambda s: 0.0)
    streams = [
        StreamSpec("abs_pos", "gnss", 1.0, sig(0.4)),
        StreamSpec("abs_pose", "lo", 2.0, (sig(0.005), sig(0.02)),
                   ref_frame="map"),
        StreamSpec("landmark", "cam", 2.0, sig(0.01), max_range=18.0),
        StreamSpec("local_vel", "wheel", 10.0, sig(0.05)),
    ]
    drift_cfg = {"map": DriftSpec(0.002, 0.02)} if drift else {}
    cfg = SimConfig(
        duration=duration, path=path, extrinsics=_default_extrinsics(),
        streams=streams, imu=imu, drift=drift_cfg,
        landmarks=_ring_landmarks(seed, landmark_count, 25.0, 7.0, 0.0, 2.5),
        imu_rate=imu_rate, seed=seed, state_rate=10.0,
        meta={"scenario": "hike"})
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def parkour_scenario(seed=0, duration=60.0, imu_rate=200.0, noise=True,
                     landmark_count=60, **overrides) -> SimConfig:
    """Aggressive figure-eight with landmark + body-velocity aiding only
    (no absolute reference)."""
    path = FigureEightPath(ax=12.0, ay=7.0, speed=2.6, ramp_time=2.5,
                           z_amp=0.25, z_freq=0.5, roll_amp=0.15,
                           pitch_amp=0.12)
    imu = ImuSpec(gyro_noise=1.7e-4, accel_noise=2.0e-3,
                  gyro_bias_walk=1.0e-5, accel_bias_walk=1.0e-4,
                  gyro_bias=(0.0015, 0.001, -0.002),
                  accel_bias=(0.03, 0.04, -0.02)) if noise else ImuSpec()
    sig = (lambda s: s) if noise else (lambda s: 0.0)
    streams = [
        StreamSpec("landmark", "cam", 5.0, sig(0.01), max_range=14.0),
        StreamSpec("local_vel", "wheel", 10.0, sig(0.05)),
    ]
    cfg = SimConfig(
        duration=duration, path=path, extrinsics=_default_extrinsics(),
        streams=streams, imu=imu, drift={},
        landmarks=_box_landmarks(seed, landmark_count, (-16, 16), (-11, 11),
                                 (0.0, 3.0)),
        imu_rate=imu_rate, seed=seed, state_rate=10.0,
        meta={"scenario": "parkour"})
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def corridor_scenario(seed=0, duration=75.0, imu_rate=400.0, noise=True,
                      outage=(30.0, 60.0), length=500.0, cheap_imu=True,
                      drift_rot=0.004, drift_trans=0.01, with_lo=True,
                      **overrides) -> SimConfig:
    """Long, fast corridor: GNSS with an outage window plus a scan matcher
    whose map frame drifts mostly in rotation.  Exercises dead-reckoning
    through the gap and the anchoring of far-from-origin alignments."""
    frac = np.array([0.0, 0.24, 0.5, 0.76, 1.0])
    lateral = np.array([0.0, 8.0, -5.0, 6.0, 0.0])
    climb = np.array([0.0, 0.5, 1.0, 0.5, 0.0])
    waypoints = np.stack([frac * length, lateral, climb], axis=1)
    # slightly under-paced so the spline is never exhausted before the end
    speed = length / (duration * 1.05)
    path = WaypointPath(waypoints, speed=speed, ramp_time=3.0, z_amp=0.1)
    if noise and cheap_imu:
        imu = ImuSpec(gyro_noise=2.0e-3, accel_noise=2.0e-2,
                      gyro_bias_walk=2.0e-4, accel_bias_walk=2.0e-3,
                      gyro_bias=(0.004, -0.003, 0.002),
                      accel_bias=(0.08, -0.06, 0.05))
    elif noise:
        imu = ImuSpec(gyro_noise=1.7e-4, accel_noise=2.0e-3,
                      gyro_bias_walk=1.0e-5, accel_bias_walk=1.0e-4,
                      gyro_bias=(0.002, -0.001, 0.0015),
                      accel_bias=(0.05, -0.03, 0.02))
    else:
        imu = ImuSpec()
    sig = (lambda s: s) if noise else (lambda s: 0.0)
    outages = (tuple(outage),) if outage else ()
    streams = [
        StreamSpec("abs_pos", "gnss", 1.0, sig(0.4), outages=outages),
    ]
    drift_cfg = {}
    if with_lo:
        # 1 Hz so every emission lands exactly on the 5 Hz state grid
        streams.append(StreamSpec("abs_pose", "lo", 1.0,
                                  (sig(0.004), sig(0.03)), ref_frame="map"))
        drift_cfg["map"] = DriftSpec(drift_rot, drift_trans, about="rig")
    cfg = SimConfig(
        duration=duration, path=path, extrinsics=_default_extrinsics(),
        streams=streams, imu=imu, drift=drift_cfg, landmarks=None,
        imu_rate=imu_rate, seed=seed, state_rate=5.0,
        meta={"scenario": "corridor"})
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


SCENARIOS = {
    "hike": hike_scenario,
    "parkour": parkour_scenario,
    "corridor": corridor_scenario,
}
