"""Factor types, noise models and robust kernels for the fusion graph.

Every factor exposes residual(values) and jacobians(values); Jacobians are
analytic, taken w.r.t. the right retraction for Pose3-valued variables and
plain addition for vector-valued ones, and FD-checked in the test suite.

Values live in a GraphValues map keyed by hashable tuples.  A value is
either a Pose3 (6-dof tangent) or a 1-d numpy array.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .geometry import (Pose3, Rot3, adjoint, se3_exp, se3_left_jacobian_inv,
                       se3_log, se3_right_jacobian_inv, skew, so3_log)
from .imu import ImuBias, PreintegratedImu, imu_residual


# --------------------------------------------------------------------------
# values
# --------------------------------------------------------------------------

def value_dim(v):
    return 6 if isinstance(v, Pose3) else int(np.asarray(v).size)


def retract_value(v, delta):
    if isinstance(v, Pose3):
        return v.compose(se3_exp(delta))
    return np.asarray(v, dtype=float) + delta


def local_value(origin, v):
    """Tangent coordinates of v relative to origin (inverse of retract_value)."""
    if isinstance(origin, Pose3):
        return se3_log(origin.inverse().compose(v))
    return np.asarray(v, dtype=float) - np.asarray(origin, dtype=float)


class GraphValues:
    """key -> Pose3 | ndarray. Values are treated as immutable snapshots."""

    __slots__ = ("_d",)

    def __init__(self, data=None):
        self._d = dict(data) if data else {}

    def copy(self):
        return GraphValues(self._d)

    def __getitem__(self, key):
        return self._d[key]

    def __setitem__(self, key, value):
        self._d[key] = value

    def __delitem__(self, key):
        del self._d[key]

    def __contains__(self, key):
        return key in self._d

    def __len__(self):
        return len(self._d)

    def keys(self):
        return self._d.keys()

    def items(self):
        return self._d.items()

    def get(self, key, default=None):
        return self._d.get(key, default)

    def dim(self, key):
        return value_dim(self._d[key])

    def retracted(self, deltas):
        """New GraphValues with per-key tangent updates applied."""
        out = self.copy()
        for key, d in deltas.items():
            out._d[key] = retract_value(self._d[key], d)
        return out


# --------------------------------------------------------------------------
# noise models and robust kernels
# --------------------------------------------------------------------------

class Gaussian:
    """Gaussian noise model; whitening via the inverse Cholesky factor."""

    __slots__ = ("cov", "sqrt_info", "dim")

    def __init__(self, cov):
        cov = np.asarray(cov, dtype=float)
        self.cov = cov
        L = np.linalg.cholesky(cov)
        self.sqrt_info = solve_triangular(L, np.eye(cov.shape[0]), lower=True)
        self.dim = cov.shape[0]

    @classmethod
    def sigmas(cls, sig):
        sig = np.asarray(sig, dtype=float)
        return cls(np.diag(sig ** 2))

    @classmethod
    def isotropic(cls, dim, sigma):
        return cls(np.eye(dim) * sigma ** 2)

    def whiten(self, r):
        return self.sqrt_info @ r

    def whiten_jac(self, J):
        return self.sqrt_info @ J


@dataclass(frozen=True)
class Huber:
    delta: float = 1.345

    def weight(self, e):
        return 1.0 if e <= self.delta else self.delta / e

    def rho(self, e):
        if e <= self.delta:
            return e * e
        return self.delta * (2.0 * e - self.delta)


@dataclass(frozen=True)
class Cauchy:
    c: float = 2.3849

    def weight(self, e):
        return 1.0 / (1.0 + (e / self.c) ** 2)

    def rho(self, e):
        return self.c ** 2 * np.log1p((e / self.c) ** 2)


@dataclass(frozen=True)
class Tukey:
    c: float = 4.6851

    def weight(self, e):
        if e >= self.c:
            return 0.0
        u = 1.0 - (e / self.c) ** 2
        return u * u

    def rho(self, e):
        if e >= self.c:
            return self.c ** 2 / 3.0
        x = (e / self.c) ** 2
        # factored form of 1 - (1 - x)^3, stable for tiny x
        return self.c ** 2 / 3.0 * x * (3.0 - 3.0 * x + x * x)


def make_kernel(name, param=None):
    """Kernel by name: none | huber | cauchy | tukey."""
    if name in (None, "none", "l2"):
        return None
    table = {"huber": Huber, "cauchy": Cauchy, "tukey": Tukey}
    try:
        cls = table[name]
    except KeyError:
        raise ValueError(f"unknown robust kernel {name!r}") from None
    return cls(param) if param is not None else cls()


# --------------------------------------------------------------------------
# factor base
# --------------------------------------------------------------------------

class Factor:
    kernel = None

    def __init__(self, keys, noise: Gaussian, kernel=None):
        self.keys = tuple(keys)
        self.noise = noise
        self.kernel = kernel

    @property
    def dim(self):
        return self.noise.dim

    def residual(self, values):  # pragma: no cover - abstract
        raise NotImplementedError

    def jacobians(self, values):  # pragma: no cover - abstract
        raise NotImplementedError

    def whitened_error(self, values):
        return self.noise.whiten(self.residual(values))

    def cost(self, values):
        e = float(np.linalg.norm(self.whitened_error(values)))
        if self.kernel is None:
            return e * e
        return self.kernel.rho(e)

    def irls_weight(self, whitened_norm):
        if self.kernel is None:
            return 1.0
        return self.kernel.weight(whitened_norm)


# --------------------------------------------------------------------------
# priors and betweens
# --------------------------------------------------------------------------

class PriorFactorPose(Factor):
    """r = log(prior^-1 X)."""

    def __init__(self, key, prior: Pose3, noise, kernel=None):
        super().__init__([key], noise, kernel)
        self.prior = prior

    def residual(self, values):
        return se3_log(self.prior.inverse().compose(values[self.keys[0]]))

    def jacobians(self, values):
        return [se3_right_jacobian_inv(self.residual(values))]


class PriorFactorVector(Factor):
    """r = x - prior."""

    def __init__(self, key, prior, noise, kernel=None):
        super().__init__([key], noise, kernel)
        self.prior = np.asarray(prior, dtype=float)

    def residual(self, values):
        return np.asarray(values[self.keys[0]], dtype=float) - self.prior

    def jacobians(self, values):
        return [np.eye(self.prior.size)]


class BetweenFactorPose(Factor):
    """r = log(Z^-1 X_i^-1 X_j) for a measured relative pose Z.

    Subclasses may override measured(values) for state-dependent means.
    """

    def __init__(self, key_i, key_j, measured: Pose3, noise, kernel=None):
        super().__init__([key_i, key_j], noise, kernel)
        self._measured = measured

    def measured(self, values) -> Pose3:
        return self._measured

    def residual(self, values):
        Xi, Xj = values[self.keys[0]], values[self.keys[1]]
        return se3_log(self.measured(values).inverse().compose(Xi.inverse()).compose(Xj))

    def jacobians(self, values):
        Xi, Xj = values[self.keys[0]], values[self.keys[1]]
        r = self.residual(values)
        Jr_inv = se3_right_jacobian_inv(r)
        D_inv = Xj.inverse().compose(Xi)
        return [-Jr_inv @ adjoint(D_inv), Jr_inv]


class BetweenFactorVector(Factor):
    """r = (x_j - x_i) - measured; used for the bias random walk."""

    def __init__(self, key_i, key_j, measured, noise, kernel=None):
        super().__init__([key_i, key_j], noise, kernel)
        self.measured_vec = np.asarray(measured, dtype=float)

    def residual(self, values):
        xi = np.asarray(values[self.keys[0]], dtype=float)
        xj = np.asarray(values[self.keys[1]], dtype=float)
        return (xj - xi) - self.measured_vec

    def jacobians(self, values):
        n = self.measured_vec.size
        return [-np.eye(n), np.eye(n)]


# --------------------------------------------------------------------------
# IMU factor
# --------------------------------------------------------------------------

class ImuFactor(Factor):
    """Preintegrated IMU constraint between consecutive nav states.

    keys: (pose_i, vel_i, bias_i, pose_j, vel_j).
    """

    def __init__(self, keys, pim: PreintegratedImu, gravity, kernel=None):
        super().__init__(keys, Gaussian(0.5 * (pim.cov + pim.cov.T)), kernel)
        self.pim = pim
        self.gravity = np.asarray(gravity, dtype=float)

    def _unpack(self, values):
        kp_i, kv_i, kb_i, kp_j, kv_j = self.keys
        return (values[kp_i], values[kv_i], ImuBias.from_vector(values[kb_i]),
                values[kp_j], values[kv_j])

    def residual(self, values):
        pose_i, vel_i, bias_i, pose_j, vel_j = self._unpack(values)
        return imu_residual(self.pim, pose_i, vel_i, bias_i, pose_j, vel_j, self.gravity)

    def jacobians(self, values):
        pose_i, vel_i, bias_i, pose_j, vel_j = self._unpack(values)
        _, J = imu_residual(self.pim, pose_i, vel_i, bias_i, pose_j, vel_j,
                            self.gravity, jacobians=True)
        return list(J)


# --------------------------------------------------------------------------
# absolute / landmark / velocity measurement factors
# --------------------------------------------------------------------------

class _Anchor:
    """Shared keyframe anchor; factors read t_RK at evaluation time so a
    deterministic re-anchor updates all attached factors at once."""

    __slots__ = ("t_RK",)

    def __init__(self, t_RK=None):
        self.t_RK = np.zeros(3) if t_RK is None else np.asarray(t_RK, dtype=float)


class AbsolutePoseFactor(Factor):
    """Measured pose of the sensor in a reference frame.

    r = log(h^-1 z') with h = T_KW T_WI T_IS T_SScorr and z' the measurement
    shifted by the keyframe anchor.  keys: (nav_pose[, align][, calib]).
    """

    def __init__(self, nav_key, z: Pose3, noise, T_IS: Pose3,
                 align_key=None, anchor: _Anchor | None = None,
                 calib_key=None, kernel=None):
        keys = [nav_key]
        if align_key is not None:
            keys.append(align_key)
        if calib_key is not None:
            keys.append(calib_key)
        super().__init__(keys, noise, kernel)
        self.nav_key = nav_key
        self.align_key = align_key
        self.calib_key = calib_key
        self.z = z
        self.T_IS = T_IS
        self.anchor = anchor

    def _z_adjusted(self):
        if self.anchor is None:
            return self.z
        return Pose3(self.z.rot, self.z.t - self.anchor.t_RK)

    def _terms(self, values):
        X = values[self.nav_key]
        C = values[self.calib_key] if self.calib_key is not None else Pose3.identity()
        zp = self._z_adjusted()
        if self.align_key is not None:
            V = values[self.align_key]
            M = C.inverse().compose(self.T_IS.inverse()).compose(X.inverse()).compose(V).compose(zp)
        else:
            V = None
            M = C.inverse().compose(self.T_IS.inverse()).compose(X.inverse()).compose(zp)
        return X, V, C, zp, M

    def residual(self, values):
        return se3_log(self._terms(values)[4])

    def jacobians(self, values):
        X, V, C, zp, M = self._terms(values)
        r = se3_log(M)
        Jl_inv = se3_left_jacobian_inv(r)
        Jr_inv = se3_right_jacobian_inv(r)
        BC = self.T_IS.compose(C)
        out = [-Jl_inv @ adjoint(BC.inverse())]
        if self.align_key is not None:
            out.append(Jr_inv @ adjoint(zp.inverse()))
        if self.calib_key is not None:
            out.append(-Jl_inv)
        return out


class AbsolutePositionFactor(Factor):
    """Measured sensor position in a reference frame.

    r = h - z' with h = T_KW (p_WI + R_WI (t_IS + R_IS c)).
    keys: (nav_pose[, align][, calib]); calib is a 3-vector lever correction.
    """

    def __init__(self, nav_key, z, noise, T_IS: Pose3,
                 align_key=None, anchor: _Anchor | None = None,
                 calib_key=None, kernel=None):
        keys = [nav_key]
        if align_key is not None:
            keys.append(align_key)
        if calib_key is not None:
            keys.append(calib_key)
        super().__init__(keys, noise, kernel)
        self.nav_key = nav_key
        self.align_key = align_key
        self.calib_key = calib_key
        self.z = np.asarray(z, dtype=float)
        self.T_IS = T_IS
        self.anchor = anchor

    def _z_adjusted(self):
        if self.anchor is None:
            return self.z
        return self.z - self.anchor.t_RK

    def _terms(self, values):
        X = values[self.nav_key]
        c = (np.asarray(values[self.calib_key], dtype=float)
             if self.calib_key is not None else np.zeros(3))
        w = self.T_IS.t + self.T_IS.R @ c
        u = X.t + X.R @ w
        if self.align_key is not None:
            V = values[self.align_key]
            h = V.R.T @ (u - V.t)
        else:
            V = None
            h = u
        return X, V, w, h

    def residual(self, values):
        return self._terms(values)[3] - self._z_adjusted()

    def jacobians(self, values):
        X, V, w, h = self._terms(values)
        R_V = V.R if V is not None else np.eye(3)
        J_nav = np.zeros((3, 6))
        RvR = R_V.T @ X.R
        J_nav[:, 0:3] = -RvR @ skew(w)
        J_nav[:, 3:6] = RvR
        out = [J_nav]
        if self.align_key is not None:
            J_align = np.zeros((3, 6))
            J_align[:, 0:3] = skew(h)
            J_align[:, 3:6] = -np.eye(3)
            out.append(J_align)
        if self.calib_key is not None:
            out.append(RvR @ self.T_IS.R)
        return out


class LandmarkFactor(Factor):
    """Landmark observed in the (possibly calibrated) sensor frame.

    r = h - z with h = T_SScorr^-1 (T_SI (T_WI^-1 p_WF)).
    keys: (nav_pose, landmark[, calib]).
    """

    def __init__(self, nav_key, lm_key, z, noise, T_IS: Pose3,
                 calib_key=None, kernel=None):
        keys = [nav_key, lm_key]
        if calib_key is not None:
            keys.append(calib_key)
        super().__init__(keys, noise, kernel)
        self.nav_key = nav_key
        self.lm_key = lm_key
        self.calib_key = calib_key
        self.z = np.asarray(z, dtype=float)
        self.T_SI = T_IS.inverse()

    def _terms(self, values):
        X = values[self.nav_key]
        p = np.asarray(values[self.lm_key], dtype=float)
        D = values[self.calib_key] if self.calib_key is not None else None
        q = X.R.T @ (p - X.t)
        s = self.T_SI.act(q)
        h = s if D is None else D.R.T @ (s - D.t)
        return X, q, s, h, D

    def residual(self, values):
        return self._terms(values)[3] - self.z

    def jacobians(self, values):
        X, q, s, h, D = self._terms(values)
        R_D = D.R if D is not None else np.eye(3)
        A = R_D.T @ self.T_SI.R
        J_nav = np.zeros((3, 6))
        J_nav[:, 0:3] = A @ skew(q)
        J_nav[:, 3:6] = -A
        J_lm = A @ X.R.T
        out = [J_nav, J_lm]
        if self.calib_key is not None:
            J_D = np.zeros((3, 6))
            J_D[:, 0:3] = skew(h)
            J_D[:, 3:6] = -np.eye(3)
            out.append(J_D)
        return out


class LocalVelocityFactor(Factor):
    """Body-frame velocity measured by a sensor with a lever arm.

    r = h - z with
    h = R_SScorr^-1 (R_SI (R_WI^-1 v_WI + w_I x t_IS) + w_S x t_SScorr);
    the angular rate w_I is taken from the nearest bias-corrected IMU sample
    and held constant.  keys: (nav_pose, nav_vel[, calib]).
    """

    def __init__(self, pose_key, vel_key, z, noise, T_IS: Pose3, omega_body,
                 calib_key=None, kernel=None):
        keys = [pose_key, vel_key]
        if calib_key is not None:
            keys.append(calib_key)
        super().__init__(keys, noise, kernel)
        self.pose_key = pose_key
        self.vel_key = vel_key
        self.calib_key = calib_key
        self.z = np.asarray(z, dtype=float)
        self.T_IS = T_IS
        self.omega_body = np.asarray(omega_body, dtype=float)

    def _terms(self, values):
        X = values[self.pose_key]
        v = np.asarray(values[self.vel_key], dtype=float)
        D = values[self.calib_key] if self.calib_key is not None else None
        R_SI = self.T_IS.R.T
        y = R_SI @ (X.R.T @ v + np.cross(self.omega_body, self.T_IS.t))
        omega_S = R_SI @ self.omega_body
        if D is not None:
            y = y + np.cross(omega_S, D.t)
            h = D.R.T @ y
        else:
            h = y
        return X, v, D, R_SI, omega_S, y, h

    def residual(self, values):
        return self._terms(values)[6] - self.z

    def jacobians(self, values):
        X, v, D, R_SI, omega_S, y, h = self._terms(values)
        R_D = D.R if D is not None else np.eye(3)
        A = R_D.T @ R_SI
        J_pose = np.zeros((3, 6))
        J_pose[:, 0:3] = A @ skew(X.R.T @ v)
        J_vel = A @ X.R.T
        out = [J_pose, J_vel]
        if self.calib_key is not None:
            J_D = np.zeros((3, 6))
            J_D[:, 0:3] = skew(h)
            J_D[:, 3:6] = R_D.T @ skew(omega_S) @ R_D
            out.append(J_D)
        return out


class LinearMarginalFactor(Factor):
    """Gaussian prior produced by marginalization.

    residual = sum_k A_k * local(lin_k, x_k) + b, already whitened, so the
    noise model is identity.  Pose blocks pick up the usual inverse right
    Jacobian when relinearized away from the stored linearization point.
    """

    def __init__(self, keys, blocks, b, lin_points):
        b = np.asarray(b, dtype=float)
        super().__init__(keys, Gaussian(np.eye(b.size)))
        self.blocks = [np.asarray(B, dtype=float) for B in blocks]
        self.b = b
        self.lin_points = dict(lin_points)

    def residual(self, values):
        r = self.b.copy()
        for key, A in zip(self.keys, self.blocks):
            r = r + A @ local_value(self.lin_points[key], values[key])
        return r

    def jacobians(self, values):
        out = []
        for key, A in zip(self.keys, self.blocks):
            lin = self.lin_points[key]
            if isinstance(lin, Pose3):
                delta = local_value(lin, values[key])
                out.append(A @ se3_right_jacobian_inv(delta))
            else:
                out.append(A)
        return out


class RandomWalkFactor(BetweenFactorPose):
    """Drift model between consecutive alignment variables of one frame.

    The expected between is a pure translation given by the difference of the
    two keyframe anchors (zero under origin anchoring); covariance is
    diag(sigma^2 * gap) with a 1e-12 floor on zero-sigma axes.
    """

    def __init__(self, key_i, key_j, anchor_i: _Anchor, anchor_j: _Anchor,
                 sigmas, gap, kernel=None):
        var = np.asarray(sigmas, dtype=float) ** 2 * float(gap)
        var = np.maximum(var, 1e-12)
        super().__init__(key_i, key_j, Pose3.identity(), Gaussian(np.diag(var)), kernel)
        self.anchor_i = anchor_i
        self.anchor_j = anchor_j
        self.gap = float(gap)

    def measured(self, values):
        return Pose3(Rot3.identity(), self.anchor_j.t_RK - self.anchor_i.t_RK)


# --------------------------------------------------------------------------
# canonical orderings (deterministic, independent of insertion order)
# --------------------------------------------------------------------------

def _coerce(x):
    if isinstance(x, (int, float, np.integer, np.floating)):
        return (0, float(x))
    return (1, str(x))


_NAV_RANK = {"P": 0, "V": 1, "B": 2}


def canonical_key_order(key):
    """Sort key: nav states time-major (P, V, B per index), then landmarks,
    then alignment variables, then calibrations."""
    if isinstance(key, tuple) and key and isinstance(key[0], str):
        kind = key[0]
        if kind in _NAV_RANK and len(key) == 2:
            return (0, _coerce(key[1]), _NAV_RANK[kind])
        if kind == "L":
            return (1,) + tuple(_coerce(x) for x in key[1:])
        if kind == "R":
            return (2,) + tuple(_coerce(x) for x in key[1:])
        if kind == "C":
            return (3,) + tuple(_coerce(x) for x in key[1:])
    return (9, _coerce(key))


def canonical_factor_order(factors):
    """Stable, insertion-independent factor ordering.

    Factors carrying a unique, comparable `tag` attribute are sorted by it;
    untagged factors keep insertion order and come last.  With all factors
    tagged the assembled system is bit-identical regardless of the order in
    which factors were added.
    """
    tagged, untagged = [], []
    for idx, f in enumerate(factors):
        tag = getattr(f, "tag", None)
        if tag is None:
            untagged.append((idx, f))
        else:
            tagged.append((tag, f))
    tagged.sort(key=lambda p: p[0])
    return [f for _, f in tagged] + [f for _, f in untagged]
