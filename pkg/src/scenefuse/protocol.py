"""Wire protocol: newline-delimited JSON messages over TCP.

One UTF-8 JSON object per line. Unknown fields are ignored so the protocol
can grow; unknown types and malformed payloads raise ProtocolError, which
the server answers with an ERROR message. Poses travel as 7 numbers
[tx, ty, tz, qw, qx, qy, qz] in meters with the quaternion canonicalized
(qw >= 0); timestamps are microseconds since the Unix epoch.

The same record shapes double as file formats: measurement logs reuse the
MEASUREMENT schema verbatim and ground-truth logs are {t_us, entity, pose}.
"""

from __future__ import annotations

import json
from typing import IO, Iterable, Iterator

import numpy as np

from .se3 import Pose


class ProtocolError(ValueError):
    def __init__(self, code: str, detail: str) -> None:
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


# required field name -> type tuple per message type
_SCHEMAS: dict[str, dict[str, tuple]] = {
    "hello": {"sensor_id": (str,), "sensor_type": (str,), "targets": (list,)},
    "welcome": {"server_time_us": (int,)},
    "meas": {
        "sensor_id": (str,),
        "target": (str,),
        "t_us": (int,),
        "pose": (list,),
        "status": (bool,),
    },
    "update": {"solve_t_us": (int,), "poses": (list,)},
    "query": {"target": (str,)},
    "result": {
        "target": (str,),
        "direct": (bool,),
        "path": (list,),
        "age_us": (int,),
        "lose_track": (bool,),
    },
    "bye": {},
    "error": {"code": (str,), "detail": (str,)},
}


def parse_line(line: str | bytes) -> dict:
    """Validated message dict from one wire line."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("bad_encoding", str(exc)) from exc
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError("bad_json", str(exc)) from exc
    if not isinstance(msg, dict):
        raise ProtocolError("bad_json", "message is not an object")
    kind = msg.get("type")
    if kind not in _SCHEMAS:
        raise ProtocolError("unknown_type", f"unknown message type {kind!r}")
    for name, types in _SCHEMAS[kind].items():
        if name not in msg:
            raise ProtocolError("missing_field", f"{kind} lacks {name!r}")
        value = msg[name]
        # bool is an int subclass; an int field must not accept True
        if types == (int,) and isinstance(value, bool):
            raise ProtocolError("bad_field", f"{kind}.{name} must be an integer")
        if not isinstance(value, types):
            raise ProtocolError("bad_field", f"{kind}.{name} has wrong type")
    if kind == "meas":
        _check_pose(msg["pose"], "meas.pose")
        if "info_diag" in msg:
            _check_vector(msg["info_diag"], 6, "meas.info_diag")
    if kind == "result" and not msg["lose_track"]:
        _check_pose(msg.get("pose"), "result.pose")
        _check_vector(msg.get("uncertainty"), 6, "result.uncertainty")
    return msg


def _check_pose(value, where: str) -> None:
    _check_vector(value, 7, where)


def _check_vector(value, n: int, where: str) -> None:
    if (
        not isinstance(value, list)
        or len(value) != n
        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
    ):
        raise ProtocolError("bad_field", f"{where} must be {n} numbers")


def encode(msg: dict) -> bytes:
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def pose_to_wire(pose) -> list[float]:
    """Pose (or an already-flat [tx,ty,tz,qw,qx,qy,qz] sequence) to wire order."""
    if isinstance(pose, Pose):
        return [float(x) for x in pose.as_array()]
    out = [float(x) for x in pose]
    if len(out) != 7:
        raise ValueError(f"wire pose needs 7 values, got {len(out)}")
    return out


def pose_from_wire(values) -> Pose:
    return Pose.from_array(np.asarray(values, dtype=float))


# -- constructors ----------------------------------------------------------------


def hello(sensor_id: str, sensor_type: str, targets: Iterable[str] = ()) -> dict:
    return {
        "type": "hello",
        "sensor_id": sensor_id,
        "sensor_type": sensor_type,
        "targets": list(targets),
    }


def welcome(server_time_us: int) -> dict:
    return {"type": "welcome", "server_time_us": int(server_time_us)}


def measurement(
    sensor_id: str,
    target: str,
    t_us: int,
    pose,
    status: bool,
    info_diag=None,
) -> dict:
    msg = {
        "type": "meas",
        "sensor_id": sensor_id,
        "target": target,
        "t_us": int(t_us),
        "pose": pose_to_wire(pose),
        "status": bool(status),
    }
    if info_diag is not None:
        msg["info_diag"] = [float(x) for x in info_diag]
    return msg


def pose_update(solve_t_us: int, poses: list[dict]) -> dict:
    return {"type": "update", "solve_t_us": int(solve_t_us), "poses": poses}


def query(target: str) -> dict:
    return {"type": "query", "target": target}


def query_result(
    target: str,
    pose: Pose | None,
    direct: bool,
    uncertainty,
    path: list[str],
    age_us: int,
    lose_track: bool,
) -> dict:
    msg = {
        "type": "result",
        "target": target,
        "direct": bool(direct),
        "path": list(path),
        "age_us": int(age_us),
        "lose_track": bool(lose_track),
    }
    if pose is not None:
        msg["pose"] = pose_to_wire(pose)
    if uncertainty is not None:
        msg["uncertainty"] = [float(x) for x in uncertainty]
    return msg


def bye() -> dict:
    return {"type": "bye"}


def error(code: str, detail: str) -> dict:
    return {"type": "error", "code": code, "detail": detail}


# -- NDJSON files ----------------------------------------------------------------


def write_ndjson(path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_ndjson(path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_messages(stream: IO[bytes]) -> Iterator[dict]:
    """Validated messages from a socket file; stops cleanly at EOF."""
    for line in stream:
        if line.strip():
            yield parse_line(line)
