"""Fused-vs-single comparison tables over a batch of seeded scenarios.

Runs the deterministic pipeline (generate, observe, batch-fuse, score) for
each seed and prints the per-seed table plus a ratio summary at the end.
The defaults reproduce the ten-seed sweep used by the acceptance suite;
expect a few minutes of wall time for that.
"""

import argparse
import time

import numpy as np

from scenefuse import metrics, sim
from scenefuse.fusion import fuse_log, info_diag_for


def gt_rows(log):
    for name in log.names():
        tr = log.entities[name]
        wire = np.concatenate([tr.t, tr.q], axis=1).tolist()
        for t, w in zip(tr.t_us.tolist(), wire):
            yield {"t_us": t, "entity": name, "pose": w}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10, help="seeds 0..N-1")
    ap.add_argument("--duration", type=float, default=500.0, help="seconds")
    ap.add_argument("--rate", type=float, default=30.0, help="Hz")
    ap.add_argument("--sensors", type=int, default=2)
    ap.add_argument("--targets", type=int, default=2)
    ap.add_argument("--p-block", type=float, default=0.1)
    args = ap.parse_args(argv)

    worst_ate = worst_loss = 0.0
    t0 = time.monotonic()
    for seed in range(args.seeds):
        cfg = sim.ScenarioConfig(
            seed=seed, duration_s=args.duration, rate_hz=args.rate,
            n_sensors=args.sensors, n_targets=args.targets, p_block=args.p_block,
        )
        gt = sim.generate(cfg)
        meas = sim.observe(gt, cfg)
        fused = fuse_log(meas, default_info_diag=info_diag_for(cfg.sensor_type))
        reports = metrics.evaluate(list(meas) + fused, list(gt_rows(gt)))
        print(f"== seed {seed}")
        print(metrics.format_table(reports))
        singles = {k: r for k, r in reports.items() if k[0] != "fused"}
        for (source, target), rep in sorted(reports.items()):
            if source != "fused":
                continue
            best_ate = min(r.ate_trans for k, r in singles.items() if k[1] == target)
            best_loss = min(
                r.loss_track_ratio for k, r in singles.items() if k[1] == target
            )
            ra = rep.ate_trans / best_ate
            rl = rep.loss_track_ratio / best_loss if best_loss else float("inf")
            worst_ate = max(worst_ate, ra)
            worst_loss = max(worst_loss, rl)
            print(f"   {target}: ATE ratio {ra:.3f}, loss ratio {rl:.3f}")
        print()
    print(f"worst over {args.seeds} seeds: ATE ratio {worst_ate:.3f}, "
          f"loss ratio {worst_loss:.3f}, {time.monotonic() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
