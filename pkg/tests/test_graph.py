"""GraphBuilder: alignment cells, anchors, landmarks, calibration, lifecycle."""
import numpy as np
import pytest

import util
from navfuse import factors as F
from navfuse import graph as G
from navfuse.geometry import Pose3, Rot3
from navfuse.measurements import (AbsolutePose, AbsolutePosition, LandmarkObs,
                                  LocalVelocity)


EXT = {"lo": Pose3(Rot3.rz(0.3), np.array([0.1, -0.2, 0.05])),
       "gps": Pose3(Rot3.identity(), np.array([0.0, 0.0, 0.3])),
       "cam": Pose3(Rot3.rx(0.1), np.array([0.2, 0.0, 0.0])),
       "wheel": Pose3(Rot3.identity(), np.array([-0.3, 0.0, -0.5]))}


def make_builder(**kw):
    kw.setdefault("keyframe_dt", 10.0)
    return G.GraphBuilder(EXT, **kw)


def seed_nav(builder, rng, n=12):
    for i in range(n):
        builder.values[G.pose_key(i)] = util.random_pose(rng)
        builder.values[G.vel_key(i)] = rng.standard_normal(3)
        builder.values[G.bias_key(i)] = np.zeros(6)


def abs_pose(t, ref="m", frame="lo", pose=None, rng=None):
    pose = pose if pose is not None else util.random_pose(rng)
    return AbsolutePose(t, ref, frame, pose, np.eye(6) * 0.01)


def abs_pos(t, ref="g", frame="gps", pos=None, rng=None):
    pos = pos if pos is not None else rng.standard_normal(3) * 5
    return AbsolutePosition(t, ref, frame, pos, np.eye(3) * 0.04)


def test_world_referenced_measurement_needs_no_alignment():
    rng = np.random.default_rng(0)
    b = make_builder()
    seed_nav(b, rng)
    created = b.add_measurement(abs_pose(1.0, ref="W", rng=rng), 0)
    assert len(created) == 1
    assert isinstance(created[-1], F.AbsolutePoseFactor)
    assert created[-1].align_key is None
    assert not b.alignments


def test_alignment_variable_created_with_zero_residual_and_prior():
    rng = np.random.default_rng(1)
    b = make_builder()
    seed_nav(b, rng)
    created = b.add_measurement(abs_pose(3.0, rng=rng), 0)
    var = b.alignments["m"][0]
    assert var.first_of_frame and np.allclose(var.anchor.t_RK, 0.0)
    kinds = [type(f).__name__ for f in created]
    assert kinds == ["PriorFactorPose", "AbsolutePoseFactor"]
    assert np.linalg.norm(created[-1].residual(b.values)) < 1e-10
    assert np.linalg.norm(created[0].residual(b.values)) < 1e-12


def test_same_cell_shares_variable_later_cell_adds_walk():
    rng = np.random.default_rng(2)
    b = make_builder()
    seed_nav(b, rng)
    b.add_measurement(abs_pose(3.0, rng=rng), 0)
    c2 = b.add_measurement(abs_pose(7.0, rng=rng), 1)
    assert len(b.alignments["m"]) == 1
    assert len(c2) == 1  # just the measurement factor

    z3 = abs_pose(14.0, rng=rng)
    c3 = b.add_measurement(z3, 2)
    assert len(b.alignments["m"]) == 2
    walks = [f for f in c3 if isinstance(f, F.RandomWalkFactor)]
    assert len(walks) == 1
    w = walks[0]
    assert w.gap == pytest.approx(10.0)
    var1 = b.alignments["m"][1]
    assert not var1.first_of_frame
    assert np.allclose(var1.anchor.t_RK, z3.pose.t)
    assert np.allclose(w.measured(b.values).t, z3.pose.t - 0.0)
    assert np.allclose(np.diag(w.noise.cov)[:3], 0.01 ** 2 * 10.0)
    assert np.allclose(np.diag(w.noise.cov)[3:], 0.03 ** 2 * 10.0)


def test_reanchor_keeps_world_alignment_and_prior_residual():
    rng = np.random.default_rng(3)
    b = make_builder()
    seed_nav(b, rng)
    b.add_measurement(abs_pose(3.0, rng=rng), 0)       # cell 0 (first, origin)
    z_late = abs_pose(25.0, rng=rng)
    b.add_measurement(z_late, 2)                       # cell 2, anchored at z_late
    var = b.alignments["m"][2]
    assert np.allclose(var.anchor.t_RK, z_late.pose.t)

    V_before = b.values[var.key]
    T_WR_before = V_before.compose(Pose3(Rot3.identity(), -var.anchor.t_RK))
    r_prior_before = var.prior.residual(b.values)

    z_early = abs_pose(21.0, rng=rng)                  # same cell, earlier
    b.add_measurement(z_early, 2)
    assert np.allclose(var.anchor.t_RK, z_early.pose.t)
    V_after = b.values[var.key]
    T_WR_after = V_after.compose(Pose3(Rot3.identity(), -var.anchor.t_RK))
    assert np.allclose(T_WR_after.matrix(), T_WR_before.matrix(), atol=1e-12)
    assert np.allclose(var.prior.residual(b.values), r_prior_before, atol=1e-12)


def test_first_cell_demotion_on_out_of_order_arrival():
    rng = np.random.default_rng(4)
    b = make_builder()
    seed_nav(b, rng)
    z1 = abs_pose(14.0, rng=rng)
    b.add_measurement(z1, 1)                           # cell 1 believes it is first
    v1 = b.alignments["m"][1]
    assert v1.first_of_frame and np.allclose(v1.anchor.t_RK, 0.0)
    T_WR_before = b.values[v1.key].compose(Pose3(Rot3.identity(), -v1.anchor.t_RK))

    z0 = abs_pose(4.0, rng=rng)
    b.add_measurement(z0, 0)                           # cell 0 takes over as first
    v0 = b.alignments["m"][0]
    assert v0.first_of_frame and np.allclose(v0.anchor.t_RK, 0.0)
    assert not v1.first_of_frame
    assert np.allclose(v1.anchor.t_RK, z1.pose.t)
    T_WR_after = b.values[v1.key].compose(Pose3(Rot3.identity(), -v1.anchor.t_RK))
    assert np.allclose(T_WR_after.matrix(), T_WR_before.matrix(), atol=1e-12)
    walks = [f for f in b.factors if isinstance(f, F.RandomWalkFactor)]
    assert len(walks) == 1
    assert walks[0].keys == (v0.key, v1.key)


def test_middle_cell_insertion_splices_walk_chain():
    rng = np.random.default_rng(5)
    b = make_builder()
    seed_nav(b, rng)
    b.add_measurement(abs_pose(2.0, rng=rng), 0)       # cell 0
    b.add_measurement(abs_pose(25.0, rng=rng), 2)      # cell 2, walk 0->2
    walks = [f for f in b.factors if isinstance(f, F.RandomWalkFactor)]
    assert len(walks) == 1 and walks[0].gap == pytest.approx(20.0)

    b.add_measurement(abs_pose(13.0, rng=rng), 1)      # cell 1 in between
    walks = [f for f in b.factors if isinstance(f, F.RandomWalkFactor)]
    assert len(walks) == 2
    gaps = sorted(w.gap for w in walks)
    assert gaps == [pytest.approx(10.0), pytest.approx(10.0)]
    chain = sorted(tuple(w.keys) for w in walks)
    assert chain == [(("R", "m", 0), ("R", "m", 1)), (("R", "m", 1), ("R", "m", 2))]


def test_ingestion_is_order_invariant_with_reinit():
    rng = np.random.default_rng(6)
    nav = {}
    rng_nav = np.random.default_rng(99)
    for i in range(12):
        nav[G.pose_key(i)] = util.random_pose(rng_nav)
        nav[G.vel_key(i)] = rng_nav.standard_normal(3)

    meas = []
    for k, t in enumerate([2.0, 7.0, 13.0, 21.0, 25.0, 33.0, 47.0]):
        meas.append((abs_pose(t, rng=rng), k))
    for k, t in enumerate([1.5, 11.0, 44.0]):
        meas.append((abs_pos(t, rng=rng), k))
    for k, t in enumerate([3.0, 12.0, 24.0]):
        meas.append((LandmarkObs(t, "cam", 5, rng.standard_normal(3),
                                 np.eye(3) * 0.01), k))

    def run(order):
        b = make_builder(alignment_priors=False, reinit_on_reanchor=True)
        for key, val in nav.items():
            b.values[key] = val
        for idx in order:
            m, s = meas[idx]
            b.add_measurement(m, s)
        return b

    b1 = run(range(len(meas)))
    order = np.random.default_rng(7).permutation(len(meas))
    b2 = run(order)

    assert set(b1.values.keys()) == set(b2.values.keys())
    for key in b1.values.keys():
        a, c = b1.values[key], b2.values[key]
        if isinstance(a, Pose3):
            assert np.array_equal(a.matrix(), c.matrix()), key
        else:
            assert np.array_equal(np.asarray(a), np.asarray(c)), key
    tags1 = sorted(f.tag for f in b1.factors)
    tags2 = sorted(f.tag for f in b2.factors)
    assert tags1 == tags2
    for cells1, cells2 in [(b1.alignments["m"], b2.alignments["m"])]:
        for cell, v1 in cells1.items():
            assert np.array_equal(v1.anchor.t_RK, cells2[cell].anchor.t_RK)


def test_landmark_created_then_reused():
    rng = np.random.default_rng(8)
    b = make_builder()
    seed_nav(b, rng)
    z = LandmarkObs(1.0, "cam", 42, rng.standard_normal(3), np.eye(3) * 0.01)
    c1 = b.add_measurement(z, 0)
    assert len(c1) == 1
    assert np.linalg.norm(c1[-1].residual(b.values)) < 1e-12
    c2 = b.add_measurement(LandmarkObs(2.0, "cam", 42, rng.standard_normal(3),
                                       np.eye(3) * 0.01), 1)
    assert len(c2) == 1
    assert len(b.landmarks) == 1
    assert b.landmarks[42].last_seen_t == 2.0


def test_calibration_state_created_once_with_prior():
    rng = np.random.default_rng(9)
    b = make_builder(calibration={"lo": {"sigma_rot": 0.02, "sigma_trans": 0.1}})
    seed_nav(b, rng)
    c1 = b.add_measurement(abs_pose(1.0, rng=rng), 0)
    assert any(isinstance(f, F.PriorFactorPose) and f.keys == (("C", "lo"),)
               for f in c1)
    assert ("C", "lo") in b.values
    c2 = b.add_measurement(abs_pose(2.0, rng=rng), 0)
    assert not any(f.keys == (("C", "lo"),) for f in c2)
    # measurement factor carries the calib key
    assert ("C", "lo") in c2[-1].keys


def test_position_calibration_is_vector_and_kind_mismatch_raises():
    rng = np.random.default_rng(10)
    b = make_builder(calibration={"gps": {"sigma_trans": 0.2}})
    seed_nav(b, rng)
    b.add_measurement(abs_pos(1.0, rng=rng), 0)
    assert isinstance(b.values[("C", "gps")], np.ndarray)
    bad = AbsolutePose(2.0, "g", "gps", util.random_pose(rng), np.eye(6) * 0.01)
    with pytest.raises(ValueError):
        b.add_measurement(bad, 0)


def test_local_velocity_factor_uses_measured_angular_rate():
    rng = np.random.default_rng(11)
    b = make_builder()
    seed_nav(b, rng)
    z = LocalVelocity(1.0, "wheel", rng.standard_normal(3),
                      rng.standard_normal(3), np.eye(3) * 0.01)
    created = b.add_measurement(z, 0)
    f = created[-1]
    assert isinstance(f, F.LocalVelocityFactor)
    assert np.allclose(f.omega_body, EXT["wheel"].R @ z.angular)
    assert f.keys == (("P", 0), ("V", 0))


def test_alignment_reactivation_same_cell_virtual_prior():
    rng = np.random.default_rng(12)
    b = make_builder()
    seed_nav(b, rng)
    b.add_measurement(abs_pose(3.0, rng=rng), 0)
    var = b.alignments["m"][0]
    mean = b.values[var.key]
    cov = np.eye(6) * 0.25
    b.deactivate_alignment(var, mean, cov)
    assert not var.active and var.key not in b.values

    created = b.add_measurement(abs_pose(6.0, rng=rng), 1)
    assert var.active
    virtual = [f for f in created if isinstance(f, F.PriorFactorPose)]
    assert len(virtual) == 1
    assert virtual[0].tag[1] == "align_virtual"
    assert np.allclose(virtual[0].noise.cov, cov + 1e-12 * np.eye(6))
    assert np.linalg.norm(virtual[0].residual(b.values)) < 1e-12
    assert len(b.alignments["m"]) == 1


def test_alignment_reactivation_later_cell_adds_walk():
    rng = np.random.default_rng(13)
    b = make_builder()
    seed_nav(b, rng)
    b.add_measurement(abs_pose(3.0, rng=rng), 0)
    var0 = b.alignments["m"][0]
    b.deactivate_alignment(var0, b.values[var0.key], np.eye(6) * 0.25)

    created = b.add_measurement(abs_pose(34.0, rng=rng), 3)
    assert var0.active  # reactivated to host the walk link
    var3 = b.alignments["m"][3]
    walks = [f for f in created if isinstance(f, F.RandomWalkFactor)]
    assert len(walks) == 1
    assert walks[0].gap == pytest.approx(30.0)
    assert walks[0].keys == (var0.key, var3.key)


def test_landmark_reactivation_virtual_prior():
    rng = np.random.default_rng(14)
    b = make_builder()
    seed_nav(b, rng)
    b.add_measurement(LandmarkObs(1.0, "cam", 9, rng.standard_normal(3),
                                  np.eye(3) * 0.01), 0)
    var = b.landmarks[9]
    mean = b.values[var.key].copy()
    b.deactivate_landmark(var, mean, np.eye(3) * 0.5)
    assert var.key not in b.values

    created = b.add_measurement(LandmarkObs(9.0, "cam", 9, rng.standard_normal(3),
                                            np.eye(3) * 0.01), 2)
    assert var.active
    virtual = [f for f in created if isinstance(f, F.PriorFactorVector)]
    assert len(virtual) == 1
    assert np.allclose(virtual[0].prior, mean)
    assert np.allclose(b.values[var.key], mean)


def test_origin_anchoring_keeps_all_anchors_at_zero():
    rng = np.random.default_rng(15)
    b = make_builder(origin_anchoring=True)
    seed_nav(b, rng)
    b.add_measurement(abs_pose(3.0, rng=rng), 0)
    b.add_measurement(abs_pose(14.0, rng=rng), 1)
    b.add_measurement(abs_pose(27.0, rng=rng), 2)
    for var in b.alignments["m"].values():
        assert np.allclose(var.anchor.t_RK, 0.0)
    for f in b.factors:
        if isinstance(f, F.RandomWalkFactor):
            m = f.measured(b.values)
            assert np.allclose(m.matrix(), np.eye(4))


def test_zero_sigma_walk_is_rigid_with_floor():
    rng = np.random.default_rng(16)
    b = make_builder(walk_sigmas={"m": (0.0, 0.0)})
    seed_nav(b, rng)
    b.add_measurement(abs_pose(3.0, rng=rng), 0)
    created = b.add_measurement(abs_pose(14.0, rng=rng), 1)
    walk = [f for f in created if isinstance(f, F.RandomWalkFactor)][0]
    assert np.allclose(np.diag(walk.noise.cov), 1e-12)


def test_create_holistic_factor_alias():
    rng = np.random.default_rng(17)
    b = make_builder()
    seed_nav(b, rng)
    out = G.create_holistic_factor(b, abs_pose(1.0, rng=rng), 0)
    assert out and out[-1] in b.factors
