"""IMU model: bias, noise spec, preintegration between states, propagation.

Preintegration accumulates relative motion deltas between two navigation
states so the optimizer can re-linearize without touching raw samples:

    dR <- dR * Exp((w - bg) dt)
    dv <- dv + dR (a - ba) dt
    dp <- dp + dv dt + 0.5 dR (a - ba) dt^2

(dp and dv use the pre-update dR / dv).  A 9x9 covariance over
(dR, dv, dp) and 9x6 bias Jacobians are propagated alongside, so a change
of the bias estimate maps onto the deltas to first order without
re-integration.  The residual couples two nav states through the deltas
and gravity; all Jacobians here are analytic and FD-checked in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Pose3, Rot3, skew, so3_exp, so3_log,
                       so3_left_jacobian_inv, so3_right_jacobian,
                       so3_right_jacobian_inv)

MAX_SAMPLE_DT = 0.1   # gaps above this indicate a broken stream

_EYE3 = np.eye(3)
_EYE9 = np.eye(9)


@dataclass
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def vector(self):
        return np.concatenate([self.gyro, self.accel])

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float)
        return ImuBias(v[:3].copy(), v[3:].copy())

    def copy(self):
        return ImuBias(self.gyro.copy(), self.accel.copy())


@dataclass
class NoiseSpec:
    """Continuous-time IMU noise densities and gravity.

    gyro/accel noise in rad/s/sqrt(Hz) and m/s^2/sqrt(Hz); bias random walks
    in rad/s^2/sqrt(Hz) and m/s^3/sqrt(Hz).  gravity is the world-frame
    vector (default pointing down along -z with standard magnitude).
    """
    gyro_noise: float = 1.7e-4
    accel_noise: float = 2.0e-3
    gyro_bias_walk: float = 1.0e-5
    accel_bias_walk: float = 1.0e-4
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.80665]))
    allow_any_gravity: bool = False

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        g = float(np.linalg.norm(self.gravity))
        if not self.allow_any_gravity and not (9.0 <= g <= 10.5):
            raise ValueError(
                f"gravity magnitude {g:.3f} outside [9, 10.5] m/s^2 "
                "(set allow_any_gravity to override)")


@dataclass
class NavState:
    """Navigation state: world pose of the body, world velocity, IMU bias."""
    t: float
    pose: Pose3
    vel: np.ndarray
    bias: ImuBias

    def copy(self):
        return NavState(self.t, Pose3(Rot3(self.pose.R.copy()), self.pose.t.copy()),
                        self.vel.copy(), self.bias.copy())


class PreintegratedImu:
    """Single-owner accumulator of IMU deltas between two nav states.

    Construct with the bias estimate used for correction, feed samples with
    integrate(), then hand the finished object to a factor.
    """

    def __init__(self, bias: ImuBias, noise: NoiseSpec, t_start: float):
        self.bias0 = bias.copy()
        self.noise = noise
        self.t_start = float(t_start)
        self.delta_t = 0.0
        self.dR = np.eye(3)
        self.dv = np.zeros(3)
        self.dp = np.zeros(3)
        self.cov = np.zeros((9, 9))           # order (dR, dv, dp)
        self.J_dR_bg = np.zeros((3, 3))
        self.J_dv_bg = np.zeros((3, 3))
        self.J_dv_ba = np.zeros((3, 3))
        self.J_dp_bg = np.zeros((3, 3))
        self.J_dp_ba = np.zeros((3, 3))
        self.n_samples = 0
        self._corr_cache = None

    def integrate(self, gyro, accel, dt):
        """Fold one sample in. dt must be positive and below MAX_SAMPLE_DT."""
        if not (0.0 < dt < MAX_SAMPLE_DT):
            raise ValueError(f"sample dt {dt} outside (0, {MAX_SAMPLE_DT})")
        w = np.asarray(gyro, dtype=float) - self.bias0.gyro
        a = np.asarray(accel, dtype=float) - self.bias0.accel
        dR, dv = self.dR, self.dv
        dRa = dR @ a
        dRs = dR @ skew(a)
        inc = so3_exp(w * dt)
        Jr = so3_right_jacobian(w * dt)

        # covariance first (uses pre-update deltas)
        A = _EYE9.copy()
        A[0:3, 0:3] = inc.mat.T
        A[3:6, 0:3] = -dRs * dt
        A[6:9, 0:3] = -0.5 * dRs * dt * dt
        A[6:9, 3:6] = _EYE3 * dt
        # additive noise: gyro through Jr dt, accel through dR dt (and 1/2 dt^2)
        G_a = dR * dt
        G_p = 0.5 * dR * dt * dt
        sg2 = self.noise.gyro_noise ** 2 / dt    # discrete variance of density
        sa2 = self.noise.accel_noise ** 2 / dt
        cov = A @ self.cov @ A.T
        cov[0:3, 0:3] += sg2 * dt * dt * (Jr @ Jr.T)
        cov[3:6, 3:6] += sa2 * (G_a @ G_a.T)
        cov[6:9, 6:9] += sa2 * (G_p @ G_p.T)
        cov[3:6, 6:9] += sa2 * (G_a @ G_p.T)
        cov[6:9, 3:6] += sa2 * (G_p @ G_a.T)
        self.cov = cov

        # bias Jacobians (pre-update values on the right-hand side)
        J_dR_bg_new = inc.mat.T @ self.J_dR_bg - Jr * dt
        self.J_dp_bg = self.J_dp_bg + self.J_dv_bg * dt - 0.5 * dRs @ self.J_dR_bg * dt * dt
        self.J_dp_ba = self.J_dp_ba + self.J_dv_ba * dt - 0.5 * dR * dt * dt
        self.J_dv_bg = self.J_dv_bg - dRs @ self.J_dR_bg * dt
        self.J_dv_ba = self.J_dv_ba - dR * dt
        self.J_dR_bg = J_dR_bg_new

        # deltas (dp uses old dv and dR; dv uses old dR; then dR)
        self.dp = self.dp + dv * dt + 0.5 * dRa * dt * dt
        self.dv = dv + dRa * dt
        m = dR @ inc.mat
        self.dR = m @ (1.5 * _EYE3 - 0.5 * (m.T @ m))
        self.delta_t += dt
        self.n_samples += 1
        self._corr_cache = None
        return self

    def corrected_deltas(self, bias: ImuBias):
        """First-order bias-corrected (dR, dv, dp) at a new bias estimate."""
        key = (bias.gyro.tobytes(), bias.accel.tobytes())
        cached = self._corr_cache
        if cached is not None and cached[0] == key:
            return cached[1]
        dbg = bias.gyro - self.bias0.gyro
        dba = bias.accel - self.bias0.accel
        dR = self.dR @ so3_exp(self.J_dR_bg @ dbg).mat
        dv = self.dv + self.J_dv_bg @ dbg + self.J_dv_ba @ dba
        dp = self.dp + self.J_dp_bg @ dbg + self.J_dp_ba @ dba
        self._corr_cache = (key, (dR, dv, dp))
        return dR, dv, dp

    def copy(self):
        out = PreintegratedImu(self.bias0, self.noise, self.t_start)
        out.delta_t = self.delta_t
        out.dR = self.dR.copy()
        out.dv = self.dv.copy()
        out.dp = self.dp.copy()
        out.cov = self.cov.copy()
        out.J_dR_bg = self.J_dR_bg.copy()
        out.J_dv_bg = self.J_dv_bg.copy()
        out.J_dv_ba = self.J_dv_ba.copy()
        out.J_dp_bg = self.J_dp_bg.copy()
        out.J_dp_ba = self.J_dp_ba.copy()
        out.n_samples = self.n_samples
        out._corr_cache = self._corr_cache
        return out


def imu_residual(pim: PreintegratedImu, pose_i: Pose3, vel_i, bias_i: ImuBias,
                 pose_j: Pose3, vel_j, gravity, jacobians=False):
    """9-vector residual [r_dR, r_dv, r_dp] coupling states i and j.

    With jacobians=True also returns d r / d (pose_i, vel_i, bias_i, pose_j,
    vel_j) as a tuple of (9x6, 9x3, 9x6, 9x6, 9x3) arrays, for the right
    retraction on poses.
    """
    g = np.asarray(gravity, dtype=float)
    dt = pim.delta_t
    Ri, pi = pose_i.R, pose_i.t
    Rj, pj = pose_j.R, pose_j.t
    dbg = bias_i.gyro - pim.bias0.gyro
    corr = pim.J_dR_bg @ dbg
    dR, dv, dp = pim.corrected_deltas(bias_i)

    E = dR.T @ Ri.T @ Rj
    r_dR = so3_log(Rot3(E))
    wv = vel_j - vel_i - g * dt
    wp = pj - pi - vel_i * dt - 0.5 * g * dt * dt
    r_dv = Ri.T @ wv - dv
    r_dp = Ri.T @ wp - dp
    r = np.concatenate([r_dR, r_dv, r_dp])
    if not jacobians:
        return r

    Jr_inv = so3_right_jacobian_inv(r_dR)
    Jl_inv_r = so3_left_jacobian_inv(r_dR)

    J_pose_i = np.zeros((9, 6))
    J_pose_i[0:3, 0:3] = -Jr_inv @ Rj.T @ Ri
    J_pose_i[3:6, 0:3] = skew(Ri.T @ wv)
    J_pose_i[6:9, 0:3] = skew(Ri.T @ wp)
    J_pose_i[6:9, 3:6] = -_EYE3              # local position perturbation

    J_vel_i = np.zeros((9, 3))
    J_vel_i[3:6, :] = -Ri.T
    J_vel_i[6:9, :] = -Ri.T * dt

    J_bias_i = np.zeros((9, 6))
    J_bias_i[0:3, 0:3] = -Jl_inv_r @ so3_right_jacobian(corr) @ pim.J_dR_bg
    J_bias_i[3:6, 0:3] = -pim.J_dv_bg
    J_bias_i[3:6, 3:6] = -pim.J_dv_ba
    J_bias_i[6:9, 0:3] = -pim.J_dp_bg
    J_bias_i[6:9, 3:6] = -pim.J_dp_ba

    J_pose_j = np.zeros((9, 6))
    J_pose_j[0:3, 0:3] = Jr_inv
    J_pose_j[6:9, 3:6] = Ri.T @ Rj

    J_vel_j = np.zeros((9, 3))
    J_vel_j[3:6, :] = Ri.T

    return r, (J_pose_i, J_vel_i, J_bias_i, J_pose_j, J_vel_j)


def integrate_state(state: NavState, gyro, accel, dt, gravity) -> NavState:
    """One Euler step of the strapdown model, correcting with state.bias."""
    if not (0.0 < dt < MAX_SAMPLE_DT):
        raise ValueError(f"sample dt {dt} outside (0, {MAX_SAMPLE_DT})")
    g = np.asarray(gravity, dtype=float)
    w = np.asarray(gyro, dtype=float) - state.bias.gyro
    a = np.asarray(accel, dtype=float) - state.bias.accel
    R = state.pose.R
    acc_w = R @ a + g
    p = state.pose.t + state.vel * dt + 0.5 * acc_w * dt * dt
    v = state.vel + acc_w * dt
    m = R @ so3_exp(w * dt).mat
    m = m @ (1.5 * _EYE3 - 0.5 * (m.T @ m))
    return NavState(state.t + dt, Pose3(Rot3(m), p), v, state.bias)


def propagate(state: NavState, samples, gravity) -> NavState:
    """Dead-reckon through a time-ordered sample list starting after state.t.

    dt for the first sample is measured against state.t; gaps above
    MAX_SAMPLE_DT raise.
    """
    cur = state
    t_prev = state.t
    for s in samples:
        dt = s.t - t_prev
        cur = integrate_state(cur, s.gyro, s.accel, dt, gravity)
        t_prev = s.t
    return cur
