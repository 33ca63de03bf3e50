"""SO(3)/SE(3) primitives and the closed-form Jacobians used by every factor.

Conventions (fixed for the whole package):

* tangent ordering is (angular, linear): a twist is ``xi = [omega, v]``,
  so a pose tangent stacks 3 rotation components first, then 3 translation
  components.  All 6x6 Jacobians, adjoints and covariances follow this order.
* SE(3)-valued variables are updated by right retraction ``P * se3_exp(xi)``
  (local / body-frame perturbation).
* rotations are stored as 3x3 matrices; quaternions only appear at the I/O
  boundary and are ordered (qx, qy, qz, qw) as in TUM files.
* ``so3_log`` at the pi branch picks the axis whose largest-magnitude
  component is positive (ties broken by the lower index).
"""
from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8   # switch to Taylor series below this angle
_PI_BRANCH = 1e-6     # distance from pi where log switches to axis extraction
_EYE3 = np.eye(3)     # shared read-only identity; never handed out mutably


def skew(v):
    """3x3 skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _sinc_coeffs(theta):
    """Return (sin(t)/t, (1-cos(t))/t^2, (t-sin(t))/t^3) with Taylor fallbacks."""
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)


class Rot3:
    """Rotation in SO(3), stored as a 3x3 matrix.

    compose() applies one Newton orthonormalization step so long composition
    chains do not drift away from the manifold.
    """

    __slots__ = ("mat",)

    def __init__(self, mat):
        self.mat = np.asarray(mat, dtype=float)

    @staticmethod
    def identity():
        return Rot3(np.eye(3))

    def compose(self, other: "Rot3") -> "Rot3":
        m = self.mat @ other.mat
        # one Newton step toward the orthogonal polar factor; keeps drift ~eps
        m = m @ (1.5 * _EYE3 - 0.5 * (m.T @ m))
        return Rot3(m)

    def inverse(self) -> "Rot3":
        return Rot3(self.mat.T)

    def act(self, v):
        return self.mat @ np.asarray(v, dtype=float)

    def unact(self, v):
        return self.mat.T @ np.asarray(v, dtype=float)

    # --- conversions -----------------------------------------------------
    @staticmethod
    def from_quat(q):
        """Quaternion (qx, qy, qz, qw) -> Rot3. Normalizes the input."""
        x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
        return Rot3(np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]))

    def to_quat(self):
        """Rot3 -> quaternion (qx, qy, qz, qw), w >= 0."""
        m = self.mat
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        q = np.array([x, y, z, w])
        if w < 0:
            q = -q
        return q / np.linalg.norm(q)

    @staticmethod
    def rx(a):
        c, s = np.cos(a), np.sin(a)
        return Rot3(np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float))

    @staticmethod
    def ry(a):
        c, s = np.cos(a), np.sin(a)
        return Rot3(np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float))

    @staticmethod
    def rz(a):
        c, s = np.cos(a), np.sin(a)
        return Rot3(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float))

    @staticmethod
    def from_rpy(roll, pitch, yaw):
        """ZYX Euler angles: R = Rz(yaw) Ry(pitch) Rx(roll)."""
        return Rot3(Rot3.rz(yaw).mat @ Rot3.ry(pitch).mat @ Rot3.rx(roll).mat)

    def rpy(self):
        """Return (roll, pitch, yaw) for the ZYX convention."""
        m = self.mat
        pitch = -np.arcsin(np.clip(m[2, 0], -1.0, 1.0))
        if abs(m[2, 0]) > 1.0 - 1e-12:  # gimbal lock: fold yaw into roll
            roll = np.arctan2(-m[1, 2], m[1, 1])
            yaw = 0.0
        else:
            roll = np.arctan2(m[2, 1], m[2, 2])
            yaw = np.arctan2(m[1, 0], m[0, 0])
        return roll, pitch, yaw

    def __repr__(self):
        return f"Rot3({self.mat!r})"


class Pose3:
    """Rigid transform in SE(3): rotation + translation, p' = R p + t."""

    __slots__ = ("rot", "t")

    def __init__(self, rot: Rot3, t):
        self.rot = rot
        self.t = np.asarray(t, dtype=float)

    @staticmethod
    def identity():
        return Pose3(Rot3.identity(), np.zeros(3))

    @staticmethod
    def from_rt(R, t):
        return Pose3(Rot3(R), t)

    @property
    def R(self):
        return self.rot.mat

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.rot.compose(other.rot), self.rot.act(other.t) + self.t)

    def inverse(self) -> "Pose3":
        rinv = self.rot.inverse()
        return Pose3(rinv, -rinv.act(self.t))

    def act(self, p):
        """Apply to a point."""
        return self.rot.act(p) + self.t

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __repr__(self):
        return f"Pose3(t={self.t!r}, q={self.rot.to_quat()!r})"


# --------------------------------------------------------------------------
# exponential / logarithm maps
# --------------------------------------------------------------------------

def so3_exp(omega) -> Rot3:
    """Rodrigues formula, exp: R^3 -> SO(3)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    a, b, _ = _sinc_coeffs(theta)
    W = skew(omega)
    return Rot3(_EYE3 + a * W + b * (W @ W))


def so3_log(R: Rot3):
    """Inverse of so3_exp; returns the rotation vector with norm in [0, pi].

    At the pi branch the axis sign is canonical: the largest-magnitude
    component is positive (ties -> lower index wins).
    """
    m = R.mat if isinstance(R, Rot3) else np.asarray(R, dtype=float)
    tr = np.clip((m[0, 0] + m[1, 1] + m[2, 2] - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    w = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if theta < _SMALL_ANGLE:
        # w = sin(theta) * axis; 1/sinc expansion
        return w * (1.0 + theta * theta / 6.0)
    if theta > np.pi - _PI_BRANCH:
        # axis from the symmetric part: R + I = 2 (cos+ (1-cos) uu^T ...) -> uu^T
        A = 0.5 * (m + _EYE3)
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        k = int(np.argmax(axis))
        # consistent off-diagonal signs relative to the dominant component
        if axis[k] > 0:
            for i in range(3):
                if i != k:
                    axis[i] = A[k, i] / axis[k] if axis[i] > 1e-12 else A[k, i] / axis[k]
        axis = axis / np.linalg.norm(axis)
        # canonical sign: largest-|component| positive
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0:
            axis = -axis
        # refine theta using the off-axis residual when available
        s = np.linalg.norm(w)
        theta_ref = np.pi - np.arcsin(np.clip(s, -1.0, 1.0))
        return axis * theta_ref
    return w * (theta / np.sin(theta))


def se3_exp(xi) -> Pose3:
    """exp: R^6 -> SE(3) with xi = [omega, v]."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    R = so3_exp(omega)
    V = so3_left_jacobian(omega)
    return Pose3(R, V @ v)


def se3_log(P: Pose3):
    """Inverse of se3_exp; returns [omega, v]."""
    omega = so3_log(P.rot)
    v = so3_left_jacobian_inv(omega) @ P.t
    return np.concatenate([omega, v])


def retract(P: Pose3, delta) -> Pose3:
    """Right retraction P * se3_exp(delta) -- the solver's update rule."""
    return P.compose(se3_exp(delta))


def local_coords(A: Pose3, B: Pose3):
    """Tangent vector xi with B = A * se3_exp(xi)."""
    return se3_log(A.inverse().compose(B))


def adjoint(P: Pose3):
    """6x6 adjoint Ad_P = [[R, 0], [skew(t) R, R]] (angular, linear) order."""
    ad = np.zeros((6, 6))
    R = P.R
    ad[:3, :3] = R
    ad[3:, 3:] = R
    ad[3:, :3] = skew(P.t) @ R
    return ad


# --------------------------------------------------------------------------
# SO(3) Jacobians
# --------------------------------------------------------------------------

def so3_left_jacobian(omega):
    """V(omega): translation part of se3_exp, also d/dd so3_exp(w + d)|global."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    _, b, c = _sinc_coeffs(theta)
    W = skew(omega)
    return _EYE3 + b * W + c * (W @ W)


def so3_right_jacobian(omega):
    """Jr(omega) = Jl(-omega): so3_exp(w + d) ~= so3_exp(w) so3_exp(Jr d)."""
    return so3_left_jacobian(-np.asarray(omega, dtype=float))


def so3_left_jacobian_inv(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coef = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return _EYE3 - 0.5 * W + coef * (W @ W)


def so3_right_jacobian_inv(omega):
    return so3_left_jacobian_inv(-np.asarray(omega, dtype=float))


# --------------------------------------------------------------------------
# SE(3) Jacobians (block form with the Q matrix)
# --------------------------------------------------------------------------

def _se3_Q(omega, v):
    """Off-diagonal block of the SE(3) left Jacobian (linear rows, angular cols)."""
    theta = np.linalg.norm(omega)
    W = skew(omega)
    V = skew(v)
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        a = 1.0 / 6.0 - t2 / 120.0
        b = -1.0 / 24.0 + t2 / 720.0
        c = -1.0 / 120.0 + t2 / 5040.0
    else:
        s, cth = np.sin(theta), np.cos(theta)
        a = (theta - s) / (t2 * theta)
        b = (1.0 - 0.5 * t2 - cth) / (t2 * t2)
        c = (theta - s - t2 * theta / 6.0) / (t2 * t2 * theta)
    WV, VW = W @ V, V @ W
    WVW = WV @ W
    Q = (0.5 * V
         + a * (WV + VW + WVW)
         - b * (W @ WV + VW @ W - 3.0 * WVW)
         - 0.5 * (b - 3.0 * c) * (WVW @ W + W @ WVW))
    return Q


def se3_left_jacobian(xi):
    """6x6 left Jacobian of SE(3): se3_exp(xi + d) ~= se3_exp(Jl d) se3_exp(xi)."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    J3 = so3_left_jacobian(omega)
    J = np.zeros((6, 6))
    J[:3, :3] = J3
    J[3:, 3:] = J3
    J[3:, :3] = _se3_Q(omega, v)
    return J


def se3_right_jacobian(xi):
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi):
    """Inverse right Jacobian: d/dd log(se3_exp(xi) se3_exp(d)) at d = 0."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    Jinv = so3_right_jacobian_inv(omega)
    Q = _se3_Q(-omega, -v)  # right-Jacobian Q block
    J = np.zeros((6, 6))
    J[:3, :3] = Jinv
    J[3:, 3:] = Jinv
    J[3:, :3] = -Jinv @ Q @ Jinv
    return J


def se3_left_jacobian_inv(xi):
    """d/dd log(se3_exp(d) se3_exp(xi)) at d = 0."""
    return se3_right_jacobian_inv(-np.asarray(xi, dtype=float))


def rotate_covariance(pose: Pose3, cov):
    """Map a 6x6 tangent covariance through Ad_pose: cov' = Ad cov Ad^T.

    Used to express a body-frame pose covariance in the world frame.
    """
    ad = adjoint(pose)
    return ad @ np.asarray(cov, dtype=float) @ ad.T
