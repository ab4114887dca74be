"""Synthetic scenario generator and protocol client.

Entities move under uniformly random accelerations integrated with
velocity drag and a soft tether to their start points, so motion stays
bench-scale over arbitrarily long runs (right-multiplicative on
rotation); sensors observe every target with body-frame Gaussian noise
and lose track with a configurable probability.
All randomness flows from one seed through a counter-based Philox
generator with one child stream per entity, so logs are bit-reproducible
across runs and platforms and adding noise never perturbs trajectories.
Per entity the draws are blocked, not interleaved: one uniform block of
accelerations, one of angular accelerations (observe: one uniform block
for losses, one normal block for noise), which keeps consumption
independent of how many samples end up blocked.

Blocked samples still carry a pose with status=false, matching the edge
semantics where lost tracks keep their last geometry at zero weight.
Trajectories are stored as stacked arrays (Track); a 500 s scenario is
15k samples per entity and per-sample objects are too slow for the
calibration statistics run over them.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from . import protocol, se3
from .se3 import Pose


class ConnectionLost(RuntimeError):
    """A drive client failed mid-stream; partial results were kept."""


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 10.0
    rate_hz: float = 30.0
    n_sensors: int = 2
    n_targets: int = 2
    p_block: float = 0.1
    accel_linear: float = 0.5  # m/s^2, uniform limit per axis
    accel_angular: float = 0.5  # rad/s^2
    sigma_t: float = 1e-3  # m
    sigma_r: float = 1.7e-3  # rad (about 0.1 deg)
    sensors_static: bool = False
    sensor_type: str = "ots"
    circle_radius: float = 2.0  # sensor ring, meters
    cube_side: float = 0.5  # target start region, meters
    vel_damping: float = 0.3  # 1/s, drag keeping speeds bounded
    tether: float = 0.05  # 1/s^2, pull toward the start point
    burst_p_enter: float | None = None  # Markov occlusion, off by default
    burst_p_exit: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_block <= 1.0:
            raise ValueError("p_block must be within [0, 1]")
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("duration and rate must be positive")
        if self.n_sensors < 1 or self.n_targets < 1:
            raise ValueError("need at least one sensor and one target")
        if (self.burst_p_enter is None) != (self.burst_p_exit is None):
            raise ValueError("burst occlusion needs both p_enter and p_exit")
        if self.vel_damping < 0 or self.tether < 0:
            raise ValueError("damping and tether must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s * self.rate_hz)) + 1

    def timestamps_us(self) -> np.ndarray:
        return np.round(np.arange(self.n_steps) * 1e6 / self.rate_hz).astype(np.int64)

    def sensor_names(self) -> list[str]:
        return [f"sensor-{i}" for i in range(self.n_sensors)]

    def target_names(self) -> list[str]:
        return [f"target-{j}" for j in range(self.n_targets)]

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class Track:
    """One entity's trajectory as stacked arrays over a shared time grid.

    t_us is (n,) int64, q is (n, 4) canonical unit quaternions, t is (n, 3)
    meters. Arrays are frozen on construction.
    """

    t_us: np.ndarray
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        self.t_us = np.asarray(self.t_us, dtype=np.int64)
        self.q = se3.quat_canonical(np.asarray(self.q, dtype=float).reshape(-1, 4))
        self.t = np.asarray(self.t, dtype=float).reshape(-1, 3)
        if not len(self.t_us) == len(self.q) == len(self.t):
            raise ValueError("track arrays must share their first dimension")
        for a in (self.t_us, self.q, self.t):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.t_us)

    def pose(self, k: int) -> Pose:
        return Pose(self.q[k], self.t[k])

    def samples(self):
        """Iterate (t_us, Pose) pairs; convenience for non-hot paths."""
        for k in range(len(self.t_us)):
            yield int(self.t_us[k]), Pose(self.q[k], self.t[k])


@dataclass
class TrajectoryLog:
    """Per-entity timestamped pose samples, shared timestamp grid."""

    entities: dict[str, Track]

    def names(self) -> list[str]:
        return sorted(self.entities)

    def path_length(self, entity: str) -> float:
        pts = self.entities[entity].t
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    def write_ndjson(self, path) -> int:
        def rows():
            for name in self.names():
                tr = self.entities[name]
                wire = np.concatenate([tr.t, tr.q], axis=1).tolist()
                for t, w in zip(tr.t_us.tolist(), wire):
                    yield {"t_us": t, "entity": name, "pose": w}

        return protocol.write_ndjson(path, rows())

    @classmethod
    def read_ndjson(cls, path) -> "TrajectoryLog":
        buckets: dict[str, list[tuple[int, list[float]]]] = {}
        for rec in protocol.read_ndjson(path):
            buckets.setdefault(rec["entity"], []).append((int(rec["t_us"]), rec["pose"]))
        entities = {}
        for name, rows in buckets.items():
            rows.sort(key=lambda s: s[0])
            wire = np.array([w for _, w in rows], dtype=float)
            entities[name] = Track(
                np.array([t for t, _ in rows]), wire[:, 3:7], wire[:, 0:3]
            )
        return cls(entities)


def _philox_children(seed: int, n: int, stream: int) -> list[np.random.Generator]:
    # two fixed top-level streams (generate=0, observe=1) so that calling one
    # never disturbs the other
    root = np.random.SeedSequence(seed).spawn(2)[stream]
    return [np.random.Generator(np.random.Philox(child)) for child in root.spawn(n)]


def _ring_pose(i: int, n: int, radius: float) -> Pose:
    theta = 2.0 * np.pi * i / max(n, 1)
    position = np.array([radius * np.cos(theta), radius * np.sin(theta), 0.0])
    # z-rotation by theta + pi points the local x axis at the ring center
    half = 0.5 * (theta + np.pi)
    q = np.array([np.cos(half), 0.0, 0.0, np.sin(half)])
    return Pose(q, position)


def _random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(0.0, 1.0, 4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def _integrate_quats(q0: np.ndarray, step_rotvecs: np.ndarray) -> np.ndarray:
    """Sequential right-multiply of per-step rotation increments from q0."""
    n = len(step_rotvecs) + 1
    out = np.empty((n, 4))
    out[0] = q0
    steps = se3.quat_from_rotvec(step_rotvecs).tolist()
    w, x, y, z = q0
    for k, (bw, bx, by, bz) in enumerate(steps):
        nw = w * bw - x * bx - y * by - z * bz
        nx = w * bx + x * bw + y * bz - z * by
        ny = w * by - x * bz + y * bw + z * bx
        nz = w * bz + x * by - y * bx + z * bw
        inv = 1.0 / np.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
        w, x, y, z = nw * inv, nx * inv, ny * inv, nz * inv
        out[k + 1] = (w, x, y, z)
    return out


def generate(config: ScenarioConfig) -> TrajectoryLog:
    """Ground-truth trajectories for every sensor and target."""
    names = config.sensor_names() + config.target_names()
    rngs = _philox_children(config.seed, len(names), stream=0)
    dt = 1.0 / config.rate_hz
    t_grid = config.timestamps_us()
    n = config.n_steps
    entities: dict[str, Track] = {}
    for idx, (name, rng) in enumerate(zip(names, rngs)):
        is_sensor = idx < config.n_sensors
        if is_sensor:
            start = _ring_pose(idx, config.n_sensors, config.circle_radius)
        else:
            t0 = rng.uniform(-0.5, 0.5, 3) * config.cube_side
            start = Pose(_random_quat(rng), t0)
        if is_sensor and config.sensors_static:
            entities[name] = Track(
                t_grid, np.tile(start.q, (n, 1)), np.tile(start.t, (n, 1))
            )
            continue
        accel = rng.uniform(-config.accel_linear, config.accel_linear, (n - 1, 3))
        alpha = rng.uniform(-config.accel_angular, config.accel_angular, (n - 1, 3))
        # semi-implicit Euler with velocity drag and a soft tether to the
        # start point: a plain double integrator random-walks off to
        # unbounded speeds and separations, while tracked rigs wander a
        # bounded bench-scale region. Both recurrences are linear, so the
        # integration is two IIR filters over the acceleration draws:
        #   v' = keep*v + (a - tether*y)*dt,  y' = y + v'*dt  (y = p - p0)
        # eliminating v gives y_{k+1} in terms of y_k, y_{k-1}, a_k.
        keep = max(0.0, 1.0 - config.vel_damping * dt)
        kdt2 = config.tether * dt * dt
        pos = np.empty((n, 3))
        pos[0] = start.t
        pos[1:] = start.t + lfilter(
            [dt * dt], [1.0, -(1.0 + keep - kdt2), keep], accel, axis=0
        )
        omega = lfilter([dt], [1.0, -keep], alpha, axis=0)
        quats = _integrate_quats(start.q, omega * dt)
        entities[name] = Track(t_grid, quats, pos)
    return TrajectoryLog(entities)


def _loss_flags(u: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """Per-sample blocked flags from a (n_steps, n_targets) uniform block."""
    if config.burst_p_enter is None:
        return u < config.p_block
    blocked = np.zeros_like(u, dtype=bool)
    p_in, p_out = config.burst_p_enter, config.burst_p_exit
    for j in range(u.shape[1]):
        col = u[:, j]
        state = False
        flags = blocked[:, j]
        for k in range(len(col)):
            state = col[k] >= p_out if state else col[k] < p_in
            flags[k] = state
    return blocked


def observe(gt: TrajectoryLog, config: ScenarioConfig) -> list[dict]:
    """Measurement records (wire schema) for every sensor/target/step."""
    sensors = config.sensor_names()
    targets = config.target_names()
    rngs = _philox_children(config.seed, len(sensors), stream=1)
    scale = np.array([config.sigma_t] * 3 + [config.sigma_r] * 3)
    n, m = config.n_steps, len(targets)
    stamps = config.timestamps_us().tolist()
    per_sensor: list[list[list[dict]]] = []
    for sensor, rng in zip(sensors, rngs):
        u = rng.random((n, m))
        nu = rng.normal(0.0, 1.0, (n, m, 6)) * scale
        status = ~_loss_flags(u, config)
        tr_a = gt.entities[sensor]
        q_nu, t_nu = se3.exp_arrays(nu[:, :, 0:3], nu[:, :, 3:6])
        rows: list[list[dict]] = [[] for _ in range(n)]
        for j, target in enumerate(targets):
            tr_p = gt.entities[target]
            q_rel, t_rel = se3.relative_arrays(tr_a.q, tr_a.t, tr_p.q, tr_p.t)
            q_meas, t_meas = se3.compose_arrays(q_rel, t_rel, q_nu[:, j], t_nu[:, j])
            wire = np.concatenate([t_meas, se3.quat_canonical(q_meas)], axis=1).tolist()
            ok = status[:, j].tolist()
            for k in range(n):
                rows[k].append(
                    protocol.measurement(sensor, target, stamps[k], wire[k], ok[k])
                )
        per_sensor.append(rows)
    # interleave chronologically: step-major, sensor, target
    records: list[dict] = []
    for k in range(n):
        for rows in per_sensor:
            records.extend(rows[k])
    return records


def _group_by_sensor(measurements) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = {}
    for rec in measurements:
        groups.setdefault(rec["sensor_id"], []).append(rec)
    for recs in groups.values():
        recs.sort(key=lambda r: r["t_us"])
    return groups


class _DriveClient(threading.Thread):
    def __init__(self, addr, sensor_id, sensor_type, records, speed, results,
                 results_lock, linger_s):
        super().__init__(daemon=True, name=f"drive-{sensor_id}")
        self.addr = addr
        self.sensor_id = sensor_id
        self.sensor_type = sensor_type
        self.records = records
        self.speed = speed
        self.results = results
        self.results_lock = results_lock
        self.linger_s = linger_s
        self.failure: Exception | None = None

    def run(self) -> None:
        try:
            self._run()
        except Exception as exc:  # recorded, re-raised by drive()
            self.failure = exc

    def _run(self) -> None:
        targets = sorted({r["target"] for r in self.records})
        with socket.create_connection(self.addr, timeout=10.0) as sock:
            reader = sock.makefile("rb")
            sock.sendall(protocol.encode(
                protocol.hello(self.sensor_id, self.sensor_type, targets)))
            line = reader.readline()
            if not line or protocol.parse_line(line)["type"] != "welcome":
                raise ConnectionLost(f"{self.sensor_id}: no welcome")

            stop = threading.Event()
            collector = threading.Thread(
                target=self._collect, args=(reader, stop), daemon=True)
            collector.start()

            t_start = time.monotonic()
            t0_us = self.records[0]["t_us"] if self.records else 0
            for rec in self.records:
                if self.speed == "realtime":
                    due = t_start + (rec["t_us"] - t0_us) / 1e6
                    delay = due - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                sock.sendall(protocol.encode(rec))
            time.sleep(self.linger_s)
            sock.sendall(protocol.encode(protocol.bye()))
            stop.set()
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            collector.join(timeout=5.0)

    def _collect(self, reader, stop) -> None:
        try:
            for msg in protocol.read_messages(reader):
                if msg["type"] == "update":
                    msg["sensor_id"] = self.sensor_id
                    with self.results_lock:
                        self.results.append(msg)
                elif msg["type"] == "error":
                    self.failure = ConnectionLost(
                        f"{self.sensor_id}: server error {msg['code']}: {msg['detail']}")
                    return
        except (OSError, ValueError) as exc:
            if not stop.is_set():
                self.failure = ConnectionLost(f"{self.sensor_id}: {exc}")


def drive(addr, measurements, speed: str = "max", sensor_type: str | dict = "ots",
          linger_s: float = 0.5) -> list[dict]:
    """Replay a measurement log as one live client per sensor.

    Received POSE_UPDATE messages, tagged with the receiving sensor, become
    the results log. Raises ConnectionLost after joining all clients when
    any of them failed; the partial results list is still populated.
    """
    if speed not in ("max", "realtime"):
        raise ValueError("speed must be 'max' or 'realtime'")
    results: list[dict] = []
    lock = threading.Lock()
    clients = []
    for sensor_id, records in sorted(_group_by_sensor(measurements).items()):
        kind = sensor_type if isinstance(sensor_type, str) else sensor_type[sensor_id]
        clients.append(_DriveClient(addr, sensor_id, kind, records, speed,
                                    results, lock, linger_s))
    for c in clients:
        c.start()
    for c in clients:
        c.join()
    failures = [c.failure for c in clients if c.failure is not None]
    if failures:
        raise ConnectionLost("; ".join(str(f) for f in failures))
    results.sort(key=lambda r: (r["solve_t_us"], r["sensor_id"]))
    return results
