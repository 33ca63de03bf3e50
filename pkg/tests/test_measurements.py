import json

import numpy as np
import pytest

from navfuse.geometry import Pose3, Rot3, so3_exp
from navfuse.measurements import (
    AbsolutePose, AbsolutePosition, ImuSample, LandmarkObs, LocalVelocity,
    LogFormatError, MeasurementLog, NotSpdError, ReplayEvent, merged_replay,
    pack_upper, parse_log, unpack_upper, validate_spd, write_log,
)


def make_log():
    rng = np.random.default_rng(42)
    log = MeasurementLog(gravity=9.81)
    log.extrinsics["G"] = Pose3(Rot3.identity(), [0.1, 0.0, 0.3])
    log.extrinsics["L"] = Pose3(so3_exp([0.0, 0.0, 0.2]), [0.3, 0.1, 0.0])
    for i in range(50):
        t = i * 0.01
        log.add(ImuSample(t, rng.standard_normal(3) * 0.1,
                          rng.standard_normal(3) * 0.1 + [0, 0, 9.81]))
    cov3 = np.diag([0.01, 0.01, 0.02])
    cov6 = np.diag([0.001, 0.001, 0.001, 0.01, 0.01, 0.01])
    for i in range(5):
        t = i * 0.1 + 0.005
        log.add(AbsolutePosition(t, "W", "G", rng.standard_normal(3), cov3))
        log.add(AbsolutePose(t, "map", "L",
                             Pose3(so3_exp(rng.standard_normal(3) * 0.3),
                                   rng.standard_normal(3)), cov6))
        log.add(LandmarkObs(t, "L", i % 3, rng.standard_normal(3), cov3))
        log.add(LocalVelocity(t, "L", rng.standard_normal(3),
                              rng.standard_normal(3) * 0.1, cov3))
    return log


def test_roundtrip_field_for_field(tmp_path):
    log = make_log()
    path = tmp_path / "log.jsonl"
    write_log(log, path)
    log2 = parse_log(path)
    assert log2 == log
    assert log2.gravity == log.gravity
    # second roundtrip is stable too
    path2 = tmp_path / "log2.jsonl"
    write_log(log2, path2)
    assert parse_log(path2) == log


def test_header_line_schema(tmp_path):
    path = tmp_path / "log.jsonl"
    write_log(make_log(), path)
    first = path.read_text().splitlines()[0]
    obj = json.loads(first)
    assert obj["schema"] == "hf_log_v1"
    assert "gravity" in obj and "extrinsics" in obj


def test_parse_error_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_log(make_log(), path)
    lines = path.read_text().splitlines()
    lines[3] = '{"kind": "imu", "t": "oops"}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError) as ei:
        parse_log(path)
    assert "line 4" in str(ei.value)


def test_parse_rejects_unknown_kind(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"schema": "hf_log_v1", "gravity": 9.81}\n'
                    '{"kind": "sonar", "t": 0.0}\n')
    with pytest.raises(LogFormatError) as ei:
        parse_log(path)
    assert "unknown measurement kind" in str(ei.value)


def test_parse_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"schema": "hf_log_v0"}\n')
    with pytest.raises(LogFormatError):
        parse_log(path)


def test_out_of_order_stream_rejected(tmp_path):
    log = MeasurementLog()
    log.add(ImuSample(0.0, np.zeros(3), np.zeros(3)))
    with pytest.raises(ValueError):
        log.add(ImuSample(0.0, np.zeros(3), np.zeros(3)))
    with pytest.raises(ValueError):
        log.add(ImuSample(-1.0, np.zeros(3), np.zeros(3)))


def test_landmark_stream_allows_shared_timestamp():
    log = MeasurementLog()
    cov = np.eye(3) * 1e-4
    log.add(LandmarkObs(1.0, "C", 3, np.ones(3), cov))
    log.add(LandmarkObs(1.0, "C", 4, np.ones(3), cov))
    with pytest.raises(ValueError):
        log.add(LandmarkObs(0.5, "C", 5, np.ones(3), cov))
    assert len(log.streams[("landmark", "C")]) == 2


def test_non_spd_cov_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    header = '{"schema": "hf_log_v1", "gravity": 9.81, "extrinsics": {"G": [0,0,0,0,0,0,1]}}'
    bad = {"kind": "abs_pos", "t": 0.0, "ref_frame": "W", "sensor_frame": "G",
           "position": [0, 0, 0], "cov": pack_upper(np.diag([1.0, -1.0, 1.0]))}
    path.write_text(header + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(LogFormatError) as ei:
        parse_log(path)
    assert "positive definite" in str(ei.value)


def test_missing_extrinsic_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    header = '{"schema": "hf_log_v1", "gravity": 9.81}'
    m = {"kind": "abs_pos", "t": 0.0, "ref_frame": "W", "sensor_frame": "G",
         "position": [0, 0, 0], "cov": pack_upper(np.eye(3))}
    path.write_text(header + "\n" + json.dumps(m) + "\n")
    with pytest.raises(LogFormatError) as ei:
        parse_log(path)
    assert "extrinsic" in str(ei.value)


def test_reserved_frames_rejected():
    log = MeasurementLog()
    log.extrinsics["S"] = Pose3.identity()
    log.add(AbsolutePosition(0.0, "O", "S", np.zeros(3), np.eye(3)))
    with pytest.raises(ValueError):
        log.validate()


def test_validate_spd():
    validate_spd(np.diag([1.0, 2.0, 3.0]))
    with pytest.raises(NotSpdError):
        validate_spd(np.diag([1.0, 0.0, 3.0]))
    M = np.eye(3)
    M[0, 1] = 0.5  # asymmetric
    with pytest.raises(NotSpdError):
        validate_spd(M)


def test_pack_unpack_upper():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    M = A @ A.T
    packed = pack_upper(M)
    assert len(packed) == 21
    assert np.array_equal(unpack_upper(packed, 6), M)


def test_merged_replay_ordering_and_delays():
    log = make_log()
    events = merged_replay(log)
    arrivals = [e.arrival for e in events]
    assert arrivals == sorted(arrivals)
    assert all(e.arrival == e.t for e in events)

    # delay one stream by 0.25 s: its events shift, others keep arrival == t
    events = merged_replay(log, delays={("abs_pos", "G"): 0.25}, lag=3.0)
    arrivals = [e.arrival for e in events]
    assert arrivals == sorted(arrivals)
    for e in events:
        if e.stream == ("abs_pos", "G"):
            assert e.arrival == pytest.approx(e.t + 0.25)
            assert not e.droppable
        else:
            assert e.arrival == e.t


def test_merged_replay_droppable_flag():
    log = make_log()
    # delay beyond the lag: flagged droppable
    events = merged_replay(log, delays={"landmark": 1.0}, lag=0.5)
    lm = [e for e in events if e.stream[0] == "landmark"]
    assert lm and all(e.droppable for e in lm)
    other = [e for e in events if e.stream[0] != "landmark"]
    assert all(not e.droppable for e in other)


def test_merged_replay_validates_delays():
    log = make_log()
    with pytest.raises(ValueError):
        merged_replay(log, delays={"imu": -0.1})
    with pytest.raises(ValueError):
        merged_replay(log, delays={"imu": 2.0}, max_delay=1.0)


def test_kind_wide_delay_applies_to_all_frames():
    log = make_log()
    events = merged_replay(log, delays={"abs_pose": 0.1})
    for e in events:
        if e.stream[0] == "abs_pose":
            assert e.arrival == pytest.approx(e.t + 0.1)
