"""Shared numeric helpers for the test suite: series oracles and FD Jacobians."""
import numpy as np

from navfuse.geometry import Pose3, se3_exp, skew


def expm_series(A, terms=30):
    """Truncated matrix exponential sum_{n=0}^{terms} A^n / n! (independent oracle)."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms + 1):
        term = term @ A / n
        out = out + term
    return out


def so3_exp_oracle(omega):
    return expm_series(skew(np.asarray(omega, dtype=float)))


def se3_exp_oracle(xi):
    """4x4 homogeneous exp of the twist [omega, v] via the series oracle."""
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((4, 4))
    A[:3, :3] = skew(xi[:3])
    A[:3, 3] = xi[3:]
    return expm_series(A)


def perturb(value, delta):
    """Apply a tangent perturbation: right retraction for poses, + for vectors."""
    if isinstance(value, Pose3):
        return value.compose(se3_exp(delta))
    return np.asarray(value, dtype=float) + delta


def value_dim(value):
    return 6 if isinstance(value, Pose3) else np.asarray(value).size


def numeric_jacobian(fun, value, h=1e-6):
    """Central-difference Jacobian of fun w.r.t. one manifold value."""
    r0 = np.asarray(fun(value), dtype=float)
    dim = value_dim(value)
    J = np.zeros((r0.size, dim))
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = h
        rp = np.asarray(fun(perturb(value, d)), dtype=float)
        rm = np.asarray(fun(perturb(value, -d)), dtype=float)
        J[:, k] = (rp - rm) / (2.0 * h)
    return J


def factor_numeric_jacobians(factor, values, h=1e-6):
    """Central-difference Jacobians of factor.residual w.r.t. each of its keys."""
    out = []
    for key in factor.keys:
        def fun(v, key=key):
            vals = values.copy()
            vals[key] = v
            return factor.residual(vals)
        out.append(numeric_jacobian(fun, values[key], h=h))
    return out


def rel_err(J_num, J_ana):
    """max-norm relative error with a unit floor (meaningful for near-zero blocks)."""
    scale = max(1.0, float(np.max(np.abs(J_ana))) if J_ana.size else 1.0)
    return float(np.max(np.abs(J_num - J_ana))) / scale


# --------------------------------------------------------------------------
# randomized factor configurations shared by the unit and acceptance suites
# --------------------------------------------------------------------------

def random_rot(rng, scale=1.0):
    from navfuse.geometry import so3_exp
    return so3_exp(rng.standard_normal(3) * scale)


def random_pose(rng, rot_scale=0.8, trans_scale=2.0):
    return Pose3(random_rot(rng, rot_scale), rng.standard_normal(3) * trans_scale)


def random_spd(rng, n, scale=0.1):
    A = rng.standard_normal((n, n)) * scale
    return A @ A.T + np.eye(n) * scale ** 2


def _random_pim(rng):
    from navfuse.imu import ImuBias, NoiseSpec, PreintegratedImu
    bias0 = ImuBias(rng.standard_normal(3) * 0.01, rng.standard_normal(3) * 0.05)
    pim = PreintegratedImu(bias0, NoiseSpec(), t_start=0.0)
    for _ in range(20):
        pim.integrate(rng.standard_normal(3) * 0.5,
                      rng.standard_normal(3) * 2.0 + np.array([0, 0, 9.8]),
                      0.005)
    return pim


def factor_builders():
    """(name, build(rng) -> (factor, GraphValues)) for every factor type.

    Used both for unit FD checks and for the large randomized Jacobian sweep.
    """
    from navfuse import factors as F
    from navfuse.geometry import Pose3 as P3

    def vals(d):
        return F.GraphValues(d)

    def prior_pose(rng):
        f = F.PriorFactorPose(("P", 0), random_pose(rng), F.Gaussian(random_spd(rng, 6)))
        return f, vals({("P", 0): random_pose(rng)})

    def prior_vec(rng):
        f = F.PriorFactorVector(("V", 0), rng.standard_normal(3),
                                F.Gaussian(random_spd(rng, 3)))
        return f, vals({("V", 0): rng.standard_normal(3)})

    def between_pose(rng):
        f = F.BetweenFactorPose(("P", 0), ("P", 1), random_pose(rng),
                                F.Gaussian(random_spd(rng, 6)))
        return f, vals({("P", 0): random_pose(rng), ("P", 1): random_pose(rng)})

    def between_vec(rng):
        f = F.BetweenFactorVector(("B", 0), ("B", 1), rng.standard_normal(6),
                                  F.Gaussian(random_spd(rng, 6)))
        return f, vals({("B", 0): rng.standard_normal(6), ("B", 1): rng.standard_normal(6)})

    def imu(rng):
        pim = _random_pim(rng)
        keys = (("P", 0), ("V", 0), ("B", 0), ("P", 1), ("V", 1))
        f = F.ImuFactor(keys, pim, np.array([0.0, 0.0, -9.81]))
        v = vals({("P", 0): random_pose(rng), ("V", 0): rng.standard_normal(3),
                  ("B", 0): rng.standard_normal(6) * 0.05,
                  ("P", 1): random_pose(rng), ("V", 1): rng.standard_normal(3)})
        return f, v

    def _abs_pose(rng, align, calib):
        anchor = F._Anchor(rng.standard_normal(3)) if align else None
        f = F.AbsolutePoseFactor(
            ("P", 0), random_pose(rng), F.Gaussian(random_spd(rng, 6)),
            T_IS=random_pose(rng, 0.5, 0.3),
            align_key=("R", "m", 0) if align else None, anchor=anchor,
            calib_key=("C", "s") if calib else None)
        v = {("P", 0): random_pose(rng)}
        if align:
            v[("R", "m", 0)] = random_pose(rng)
        if calib:
            v[("C", "s")] = random_pose(rng, 0.2, 0.1)
        return f, vals(v)

    def _abs_pos(rng, align, calib):
        anchor = F._Anchor(rng.standard_normal(3)) if align else None
        f = F.AbsolutePositionFactor(
            ("P", 0), rng.standard_normal(3) * 3, F.Gaussian(random_spd(rng, 3)),
            T_IS=random_pose(rng, 0.5, 0.3),
            align_key=("R", "g", 0) if align else None, anchor=anchor,
            calib_key=("C", "g") if calib else None)
        v = {("P", 0): random_pose(rng)}
        if align:
            v[("R", "g", 0)] = random_pose(rng)
        if calib:
            v[("C", "g")] = rng.standard_normal(3) * 0.1
        return f, vals(v)

    def _landmark(rng, calib):
        f = F.LandmarkFactor(
            ("P", 0), ("L", 7), rng.standard_normal(3) * 2,
            F.Gaussian(random_spd(rng, 3)), T_IS=random_pose(rng, 0.5, 0.3),
            calib_key=("C", "c") if calib else None)
        v = {("P", 0): random_pose(rng), ("L", 7): rng.standard_normal(3) * 5}
        if calib:
            v[("C", "c")] = random_pose(rng, 0.2, 0.1)
        return f, vals(v)

    def _local_vel(rng, calib):
        f = F.LocalVelocityFactor(
            ("P", 0), ("V", 0), rng.standard_normal(3),
            F.Gaussian(random_spd(rng, 3)), T_IS=random_pose(rng, 0.5, 0.3),
            omega_body=rng.standard_normal(3) * 0.5,
            calib_key=("C", "w") if calib else None)
        v = {("P", 0): random_pose(rng), ("V", 0): rng.standard_normal(3) * 2}
        if calib:
            v[("C", "w")] = random_pose(rng, 0.2, 0.1)
        return f, vals(v)

    def random_walk(rng):
        a_i = F._Anchor(rng.standard_normal(3))
        a_j = F._Anchor(rng.standard_normal(3))
        f = F.RandomWalkFactor(("R", "m", 0), ("R", "m", 1), a_i, a_j,
                               sigmas=np.full(6, 0.1), gap=2.5)
        return f, vals({("R", "m", 0): random_pose(rng), ("R", "m", 1): random_pose(rng)})

    def linear_marginal(rng):
        m = 7
        lin_pose = random_pose(rng)
        lin_vec = rng.standard_normal(3)
        blocks = [rng.standard_normal((m, 6)), rng.standard_normal((m, 3))]
        f = F.LinearMarginalFactor(
            [("P", 0), ("V", 0)], blocks, rng.standard_normal(m),
            {("P", 0): lin_pose, ("V", 0): lin_vec})
        v = vals({("P", 0): F.retract_value(lin_pose, rng.standard_normal(6) * 0.3),
                  ("V", 0): lin_vec + rng.standard_normal(3)})
        return f, v

    builders = [
        ("prior_pose", prior_pose),
        ("prior_vector", prior_vec),
        ("between_pose", between_pose),
        ("between_vector", between_vec),
        ("imu", imu),
        ("random_walk", random_walk),
        ("linear_marginal", linear_marginal),
    ]
    for align in (False, True):
        for calib in (False, True):
            builders.append((f"abs_pose_a{int(align)}_c{int(calib)}",
                             lambda rng, a=align, c=calib: _abs_pose(rng, a, c)))
            builders.append((f"abs_pos_a{int(align)}_c{int(calib)}",
                             lambda rng, a=align, c=calib: _abs_pos(rng, a, c)))
    for calib in (False, True):
        builders.append((f"landmark_c{int(calib)}",
                         lambda rng, c=calib: _landmark(rng, c)))
        builders.append((f"local_velocity_c{int(calib)}",
                         lambda rng, c=calib: _local_vel(rng, c)))
    return builders
