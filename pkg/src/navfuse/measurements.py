"""Typed measurement records, the JSONL log format, and replay utilities.

Log format (one JSON object per line):

* line 1 is the header: ``{"schema": "hf_log_v1", "gravity": <m/s^2>,
  "extrinsics": {<sensor_frame>: [tx,ty,tz,qx,qy,qz,qw], ...}}`` plus optional
  free-form ``meta``.
* every other line is a measurement with a ``kind`` field:
    - ``imu``:       t, gyro [rad/s], accel [m/s^2] (specific force)
    - ``abs_pose``:  t, ref_frame, sensor_frame, pose [tx..qw], cov (21 floats)
    - ``abs_pos``:   t, ref_frame, sensor_frame, position [m], cov (6 floats)
    - ``landmark``:  t, sensor_frame, landmark_id, position [m], cov (6 floats)
    - ``local_vel``: t, sensor_frame, velocity [m/s], angular [rad/s], cov (6)
* covariances are row-major upper triangles of the SPD matrix; pose
  covariances are 6x6 in tangent order (rotation first, then translation).
* timestamps are float64 seconds and strictly increase within each stream.

Frames ``W`` (world), ``O`` (odometry) and ``I`` (imu/body) are reserved:
they cannot name a sensor and only ``W`` may appear as a reference frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .geometry import Pose3, Rot3

SCHEMA = "hf_log_v1"
RESERVED_FRAMES = ("W", "O", "I")


class LogFormatError(ValueError):
    """Malformed measurement log; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NotSpdError(ValueError):
    pass


def validate_spd(M, tol=1e-9, context=""):
    """Raise NotSpdError unless M is symmetric positive definite."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSpdError(f"{context}: covariance must be square, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > tol * scale:
        raise NotSpdError(f"{context}: covariance not symmetric")
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError:
        raise NotSpdError(f"{context}: covariance not positive definite") from None
    return M


def pack_upper(M):
    """SPD matrix -> row-major upper triangle list."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    return [float(M[i, j]) for i in range(n) for j in range(i, n)]


def unpack_upper(vals, n):
    """Row-major upper triangle -> full symmetric matrix."""
    vals = list(vals)
    if len(vals) != n * (n + 1) // 2:
        raise ValueError(f"expected {n*(n+1)//2} entries, got {len(vals)}")
    M = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            M[i, j] = M[j, i] = vals[k]
            k += 1
    return M


def _pose_to_list(pose: Pose3):
    q = pose.rot.to_quat()
    return [float(x) for x in np.concatenate([pose.t, q])]


def _pose_from_list(vals):
    vals = np.asarray(vals, dtype=float)
    if vals.shape != (7,):
        raise ValueError("pose must be [tx,ty,tz,qx,qy,qz,qw]")
    return Pose3(Rot3.from_quat(vals[3:]), vals[:3])


def _arr_eq(a, b, atol=0.0):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return a.shape == b.shape and np.allclose(a, b, rtol=0.0, atol=atol)


@dataclass(eq=False)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray
    kind = "imu"
    sensor_frame = "I"

    def __eq__(self, other):
        return (isinstance(other, ImuSample) and self.t == other.t
                and _arr_eq(self.gyro, other.gyro) and _arr_eq(self.accel, other.accel))


@dataclass(eq=False)
class AbsolutePose:
    """Pose of sensor_frame expressed in ref_frame, with 6x6 tangent covariance."""
    t: float
    ref_frame: str
    sensor_frame: str
    pose: Pose3
    cov: np.ndarray
    kind = "abs_pose"

    def __eq__(self, other):
        return (isinstance(other, AbsolutePose) and self.t == other.t
                and self.ref_frame == other.ref_frame
                and self.sensor_frame == other.sensor_frame
                and _arr_eq(self.pose.t, other.pose.t, atol=1e-12)
                and _arr_eq(self.pose.R, other.pose.R, atol=1e-12)
                and _arr_eq(self.cov, other.cov))


@dataclass(eq=False)
class AbsolutePosition:
    """Position of sensor_frame expressed in ref_frame, 3x3 covariance."""
    t: float
    ref_frame: str
    sensor_frame: str
    position: np.ndarray
    cov: np.ndarray
    kind = "abs_pos"

    def __eq__(self, other):
        return (isinstance(other, AbsolutePosition) and self.t == other.t
                and self.ref_frame == other.ref_frame
                and self.sensor_frame == other.sensor_frame
                and _arr_eq(self.position, other.position) and _arr_eq(self.cov, other.cov))


@dataclass(eq=False)
class LandmarkObs:
    """Landmark position observed in the sensor frame; ids are stable."""
    t: float
    sensor_frame: str
    landmark_id: int
    position: np.ndarray
    cov: np.ndarray
    kind = "landmark"

    def __eq__(self, other):
        return (isinstance(other, LandmarkObs) and self.t == other.t
                and self.sensor_frame == other.sensor_frame
                and self.landmark_id == other.landmark_id
                and _arr_eq(self.position, other.position) and _arr_eq(self.cov, other.cov))


@dataclass(eq=False)
class LocalVelocity:
    """Linear velocity of the sensor expressed in the sensor frame."""
    t: float
    sensor_frame: str
    velocity: np.ndarray
    angular: np.ndarray
    cov: np.ndarray
    kind = "local_vel"

    def __eq__(self, other):
        return (isinstance(other, LocalVelocity) and self.t == other.t
                and self.sensor_frame == other.sensor_frame
                and _arr_eq(self.velocity, other.velocity)
                and _arr_eq(self.angular, other.angular) and _arr_eq(self.cov, other.cov))


Measurement = ImuSample | AbsolutePose | AbsolutePosition | LandmarkObs | LocalVelocity


@dataclass(eq=False)
class MeasurementLog:
    """All streams of one run plus global metadata.

    streams are keyed by (kind, sensor_frame) and time-ordered.
    """
    gravity: float = 9.80665
    extrinsics: dict = field(default_factory=dict)   # sensor_frame -> Pose3 (T_IS)
    streams: dict = field(default_factory=dict)      # (kind, frame) -> [measurements]
    meta: dict = field(default_factory=dict)

    def add(self, meas: Measurement):
        key = (meas.kind, meas.sensor_frame)
        lst = self.streams.setdefault(key, [])
        if lst and meas.t < lst[-1].t:
            raise ValueError(
                f"stream {key}: timestamps must not decrease "
                f"({meas.t} after {lst[-1].t})")
        # several landmarks may be seen in the same shot; other streams
        # produce one measurement per instant
        if lst and meas.t == lst[-1].t and meas.kind != "landmark":
            raise ValueError(
                f"stream {key}: duplicate timestamp {meas.t}")
        lst.append(meas)

    def imu(self):
        return self.streams.get(("imu", "I"), [])

    def by_kind(self, kind):
        out = []
        for (k, _), lst in self.streams.items():
            if k == kind:
                out.extend(lst)
        out.sort(key=lambda m: m.t)
        return out

    def non_imu(self):
        out = []
        for (k, _), lst in self.streams.items():
            if k != "imu":
                out.extend(lst)
        out.sort(key=lambda m: m.t)
        return out

    def all_measurements(self):
        out = []
        for lst in self.streams.values():
            out.extend(lst)
        out.sort(key=lambda m: (m.t, m.kind, m.sensor_frame))
        return out

    def ref_frames(self):
        frames = set()
        for (k, _), lst in self.streams.items():
            if k in ("abs_pose", "abs_pos"):
                frames.update(m.ref_frame for m in lst)
        return frames

    def time_span(self):
        ts = [lst[0].t for lst in self.streams.values() if lst]
        te = [lst[-1].t for lst in self.streams.values() if lst]
        if not ts:
            raise ValueError("empty log")
        return min(ts), max(te)

    def extrinsic(self, sensor_frame) -> Pose3:
        if sensor_frame == "I":
            return Pose3.identity()
        try:
            return self.extrinsics[sensor_frame]
        except KeyError:
            raise KeyError(f"no extrinsic declared for sensor frame {sensor_frame!r}") from None

    def validate(self):
        imu_streams = [k for k in self.streams if k[0] == "imu"]
        if len(imu_streams) > 1:
            raise ValueError("multiple IMU streams are out of scope")
        for (kind, frame), lst in self.streams.items():
            if kind != "imu":
                if frame in RESERVED_FRAMES:
                    raise ValueError(f"sensor frame {frame!r} is reserved")
                if frame not in self.extrinsics:
                    raise ValueError(f"sensor frame {frame!r} has no extrinsic entry")
            for m in lst:
                rf = getattr(m, "ref_frame", None)
                if rf is not None:
                    if rf in ("O", "I"):
                        raise ValueError(f"reference frame {rf!r} is reserved")
                    if rf == m.sensor_frame:
                        raise ValueError("ref_frame must differ from sensor_frame")
        return self

    def __eq__(self, other):
        if not isinstance(other, MeasurementLog):
            return NotImplemented
        if self.gravity != other.gravity or set(self.streams) != set(other.streams):
            return False
        if set(self.extrinsics) != set(other.extrinsics):
            return False
        for f, p in self.extrinsics.items():
            q = other.extrinsics[f]
            if not (_arr_eq(p.t, q.t, atol=1e-12) and _arr_eq(p.R, q.R, atol=1e-12)):
                return False
        return all(self.streams[k] == other.streams[k] for k in self.streams)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _meas_to_obj(m: Measurement):
    if isinstance(m, ImuSample):
        return {"kind": "imu", "t": m.t,
                "gyro": [float(x) for x in m.gyro],
                "accel": [float(x) for x in m.accel]}
    if isinstance(m, AbsolutePose):
        return {"kind": "abs_pose", "t": m.t, "ref_frame": m.ref_frame,
                "sensor_frame": m.sensor_frame, "pose": _pose_to_list(m.pose),
                "cov": pack_upper(m.cov)}
    if isinstance(m, AbsolutePosition):
        return {"kind": "abs_pos", "t": m.t, "ref_frame": m.ref_frame,
                "sensor_frame": m.sensor_frame,
                "position": [float(x) for x in m.position], "cov": pack_upper(m.cov)}
    if isinstance(m, LandmarkObs):
        return {"kind": "landmark", "t": m.t, "sensor_frame": m.sensor_frame,
                "landmark_id": int(m.landmark_id),
                "position": [float(x) for x in m.position], "cov": pack_upper(m.cov)}
    if isinstance(m, LocalVelocity):
        return {"kind": "local_vel", "t": m.t, "sensor_frame": m.sensor_frame,
                "velocity": [float(x) for x in m.velocity],
                "angular": [float(x) for x in m.angular], "cov": pack_upper(m.cov)}
    raise TypeError(f"unknown measurement type {type(m)}")


def _require(obj, key, line):
    if key not in obj:
        raise LogFormatError(f"missing field {key!r} in {obj.get('kind', '?')}", line)
    return obj[key]


def _meas_from_obj(obj, line):
    kind = _require(obj, "kind", line)
    try:
        t = float(_require(obj, "t", line))
        if kind == "imu":
            return ImuSample(t, np.asarray(obj["gyro"], dtype=float),
                             np.asarray(obj["accel"], dtype=float))
        if kind == "abs_pose":
            cov = unpack_upper(_require(obj, "cov", line), 6)
            validate_spd(cov, context=f"abs_pose cov (line {line})")
            return AbsolutePose(t, _require(obj, "ref_frame", line),
                                _require(obj, "sensor_frame", line),
                                _pose_from_list(_require(obj, "pose", line)), cov)
        if kind == "abs_pos":
            cov = unpack_upper(_require(obj, "cov", line), 3)
            validate_spd(cov, context=f"abs_pos cov (line {line})")
            return AbsolutePosition(t, _require(obj, "ref_frame", line),
                                    _require(obj, "sensor_frame", line),
                                    np.asarray(_require(obj, "position", line), dtype=float),
                                    cov)
        if kind == "landmark":
            cov = unpack_upper(_require(obj, "cov", line), 3)
            validate_spd(cov, context=f"landmark cov (line {line})")
            return LandmarkObs(t, _require(obj, "sensor_frame", line),
                               int(_require(obj, "landmark_id", line)),
                               np.asarray(_require(obj, "position", line), dtype=float),
                               cov)
        if kind == "local_vel":
            cov = unpack_upper(_require(obj, "cov", line), 3)
            validate_spd(cov, context=f"local_vel cov (line {line})")
            return LocalVelocity(t, _require(obj, "sensor_frame", line),
                                 np.asarray(_require(obj, "velocity", line), dtype=float),
                                 np.asarray(obj.get("angular", [0, 0, 0]), dtype=float),
                                 cov)
    except LogFormatError:
        raise
    except (ValueError, NotSpdError) as e:
        raise LogFormatError(str(e), line) from None
    raise LogFormatError(f"unknown measurement kind {kind!r}", line)


def write_log(log: MeasurementLog, path):
    """Serialize a MeasurementLog to JSONL. Deterministic for identical logs."""
    header = {"schema": SCHEMA, "gravity": float(log.gravity),
              "extrinsics": {f: _pose_to_list(p) for f, p in sorted(log.extrinsics.items())}}
    if log.meta:
        header["meta"] = log.meta
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for m in log.all_measurements():
            fh.write(json.dumps(_meas_to_obj(m)) + "\n")


def parse_log(path) -> MeasurementLog:
    """Parse a JSONL measurement log; raises LogFormatError with line numbers."""
    log = MeasurementLog()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"invalid JSON: {e}", lineno) from None
            if lineno == 1:
                if obj.get("schema") != SCHEMA:
                    raise LogFormatError(
                        f"expected header with schema {SCHEMA!r}, got {obj.get('schema')!r}", 1)
                log.gravity = float(obj.get("gravity", 9.80665))
                for f, vals in obj.get("extrinsics", {}).items():
                    try:
                        log.extrinsics[f] = _pose_from_list(vals)
                    except ValueError as e:
                        raise LogFormatError(f"extrinsic {f!r}: {e}", 1) from None
                log.meta = obj.get("meta", {})
                continue
            m = _meas_from_obj(obj, lineno)
            try:
                log.add(m)
            except ValueError as e:
                raise LogFormatError(str(e), lineno) from None
    try:
        log.validate()
    except ValueError as e:
        raise LogFormatError(str(e)) from None
    return log


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------

@dataclass
class ReplayEvent:
    t: float                 # true measurement timestamp
    arrival: float           # timestamp at which the consumer sees it
    meas: Measurement
    stream: tuple
    droppable: bool = False  # arrival delay exceeds the smoother lag


def stream_delay(delays, kind, frame):
    """Delay lookup: exact (kind, frame) match first, then kind-wide, then 0."""
    if not delays:
        return 0.0
    if (kind, frame) in delays:
        return float(delays[(kind, frame)])
    if kind in delays:
        return float(delays[kind])
    return 0.0


def merged_replay(log: MeasurementLog, delays=None, max_delay=None, lag=None):
    """Time-ordered event stream over all streams with optional injected delays.

    delays maps kind or (kind, sensor_frame) to seconds; arrival = t + delay.
    Events whose delay exceeds `lag` are flagged droppable (they would arrive
    behind the smoother window).
    """
    if delays:
        for key, d in delays.items():
            if d < 0:
                raise ValueError(f"negative delay for {key}")
            if max_delay is not None and d > max_delay:
                raise ValueError(f"delay {d} for {key} exceeds max_delay {max_delay}")
    events = []
    for (kind, frame), lst in log.streams.items():
        d = stream_delay(delays, kind, frame)
        for m in lst:
            droppable = lag is not None and d > lag
            events.append(ReplayEvent(m.t, m.t + d, m, (kind, frame), droppable))
    events.sort(key=lambda e: (e.arrival, e.t, e.stream))
    return events
