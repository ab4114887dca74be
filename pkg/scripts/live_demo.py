"""Run a fusion server fed by simulated sensors, for poking at the bridge.

Starts the server on fixed local ports, streams a seeded scenario in real
time, and prints the operator endpoints. Point the dashboard (or curl) at
the bridge while it runs; Ctrl-C stops everything.
"""

import argparse
import time

from scenefuse import sim
from scenefuse.server import FusionServer


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--duration", type=float, default=120.0, help="seconds per pass")
    ap.add_argument("--sensors", type=int, default=2)
    ap.add_argument("--targets", type=int, default=3)
    ap.add_argument("--p-block", type=float, default=0.08,
                    help="per-measurement occlusion probability")
    ap.add_argument("--port", type=int, default=7800, help="sensor TCP port")
    ap.add_argument("--operator-port", type=int, default=7801, help="bridge HTTP port")
    ap.add_argument("--fusion-hz", type=float, default=20.0)
    args = ap.parse_args(argv)

    cfg = sim.ScenarioConfig(
        seed=args.seed, duration_s=args.duration, rate_hz=30.0,
        n_sensors=args.sensors, n_targets=args.targets, p_block=args.p_block,
    )
    meas = sim.observe(sim.generate(cfg), cfg)
    with FusionServer(
        listen=("127.0.0.1", args.port),
        operator_listen=("127.0.0.1", args.operator_port),
        fusion_hz=args.fusion_hz,
    ) as server:
        print(f"sensor port    tcp://{server.addr[0]}:{server.addr[1]}")
        print(f"operator bridge http://{server.operator_addr[0]}:{server.operator_addr[1]}")
        print(f"event stream   http://{server.operator_addr[0]}:{server.operator_addr[1]}/stream")
        print(f"replaying seed {args.seed}: {args.sensors} sensors, "
              f"{args.targets} targets, {args.duration:.0f}s per pass")
        passes = 0
        try:
            while True:
                sim.drive(server.addr, meas, speed="realtime",
                          sensor_type=cfg.sensor_type, linger_s=0.5)
                passes += 1
                print(f"pass {passes} done, restarting stream")
                time.sleep(1.0)
        except KeyboardInterrupt:
            print("\nstopping")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
