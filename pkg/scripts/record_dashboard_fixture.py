"""Record an operator-bridge event stream for the dashboard replay tests.

Drives a live server through a scripted six-second scene and captures every
/stream frame to NDJSON. The scene exercises all three indicator states:

  0.0 - 2.0 s  everything tracked (p1, p2, p3 green)
  2.0 - 4.0 s  s1 loses sight of p1; s2 still sees it (p1 yellow)
  4.0 - 6.0 s  s1 sees p1 again; s2 disconnects, taking the only view of
               p2 with it (p1, p3 green, p2 lost)

The first output line is a meta record with the phase timestamps; the rest
are {"type": "frame", ...} records in arrival order. Re-recording produces
equivalent content but not byte-identical files (cycle counters and frame
timing depend on scheduling), so the fixture is committed, not rebuilt in CI.
"""

import argparse
import json
import math
import socket
import threading
import time
from pathlib import Path

import numpy as np

from scenefuse import protocol
from scenefuse.se3 import Pose, relative
from scenefuse.server import FusionServer

TICK_US = 100_000
OCCLUDE_T_US = 2_000_000  # s1 -> p1 status goes false here
RESTORE_T_US = 4_000_000  # ... and true again here
KILL_TICK = 39  # s2's socket dies right after its 3.9 s sends

SENSORS = {
    "s1": Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([-1.2, 0.0, 0.8])),
    "s2": Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([1.2, 0.3, 0.8])),
}
# p3 is shared so the weighted graph stays connected while s1 -> p1 is
# occluded; a split graph would drop s2's component from the report
SEES = {"s1": ("p1", "p3"), "s2": ("p1", "p2", "p3")}


def target_pose(name: str, t_s: float) -> Pose:
    # gentle deterministic wobble so the dashboard has something to draw
    phase = {"p1": 0.0, "p2": 2.1, "p3": 4.2}[name]
    a = 0.25 * math.sin(0.8 * t_s + phase)
    q = np.array([math.cos(a / 2), 0.0, 0.0, math.sin(a / 2)])
    base = {"p1": (0.2, 0.5, 0.1), "p2": (-0.3, -0.4, 0.2), "p3": (0.6, -0.2, 0.15)}
    t = np.array(base[name]) + 0.1 * np.array(
        [math.sin(0.6 * t_s + phase), math.cos(0.5 * t_s + phase), 0.0]
    )
    return Pose(q, t)


def capture_stream(addr, frames, stop):
    sock = socket.create_connection(addr)
    sock.sendall(b"GET /stream HTTP/1.1\r\nHost: fixture\r\n\r\n")
    reader = sock.makefile("rb")
    while not reader.readline().strip():
        pass  # status line arrives first; headers end at the blank line
    for raw in reader:
        if stop.is_set():
            break
        line = raw.decode("utf-8").strip()
        if line.startswith("data: "):
            frames.append(json.loads(line[len("data: "):]))
    sock.close()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument(
        "--out",
        default=str(Path(__file__).resolve().parent.parent
                    / "frontend" / "tests" / "fixtures" / "stream.ndjson"),
    )
    args = ap.parse_args(argv)

    frames: list[dict] = []
    stop = threading.Event()
    with FusionServer(fusion_hz=10.0) as server:
        cap = threading.Thread(
            target=capture_stream, args=(server.operator_addr, frames, stop),
            daemon=True,
        )
        cap.start()
        conns = {}
        for sid, tgts in SEES.items():
            conns[sid] = socket.create_connection(server.addr)
            conns[sid].sendall(protocol.encode(protocol.hello(sid, "ots", tgts)))
        time.sleep(0.3)  # welcome handshake before the first tick lands

        start = time.monotonic()
        for k in range(61):
            while time.monotonic() < start + k * TICK_US / 1e6:
                time.sleep(0.005)
            t_us = k * TICK_US
            for sid, tgts in SEES.items():
                if sid == "s2" and k > KILL_TICK:
                    continue
                for tgt in tgts:
                    status = not (
                        sid == "s1" and tgt == "p1"
                        and OCCLUDE_T_US <= t_us < RESTORE_T_US
                    )
                    pose = relative(SENSORS[sid], target_pose(tgt, t_us / 1e6))
                    conns[sid].sendall(protocol.encode(
                        protocol.measurement(sid, tgt, t_us, pose, status)))
            if k == KILL_TICK:
                conns["s2"].close()
        time.sleep(0.6)  # let the last cycle flush
        stop.set()
        conns["s1"].close()
    cap.join(timeout=5.0)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        meta = {
            "type": "meta",
            "occlude_t_us": OCCLUDE_T_US,
            "restore_t_us": RESTORE_T_US,
            "kill_t_us": KILL_TICK * TICK_US,
            "occluded_edge": {"sensor": "s1", "target": "p1"},
            "lost_target": "p2",
        }
        fh.write(json.dumps(meta, separators=(",", ":")) + "\n")
        for frame in frames:
            fh.write(json.dumps({"type": "frame", "frame": frame},
                                separators=(",", ":")) + "\n")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
