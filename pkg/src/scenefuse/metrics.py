"""Trajectory evaluation on recorded logs.

Estimates are compared to ground truth on intra-layer relative
trajectories (reference target to each other target), which makes the
numbers independent of sensor placement and of the solver's gauge choice.
ATE aligns the matched translations with a rigid Umeyama fit before
averaging; RTE differences out everything constant over a fixed interval;
the loss ratio counts untracked time. Occluded samples are scored with the
last tracked pose held, since that is what a consumer of the stream sees
during a dropout, and the tracking gap itself is reported separately by
the loss ratio.

Units are meters, radians and microseconds throughout; only the
human-readable table converts to millimeters and degrees.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import protocol, se3
from .se3 import DegenerateGeometry, Pose, umeyama_align

ASSOC_TOL_US = 20_000
MAX_LAG_US = 200_000
DEFAULT_DELTA_S = 1.0


class TooFewSamples(ValueError):
    """Not enough associated samples to form the statistic."""


class NoOverlap(ValueError):
    """Estimate and ground truth share no usable time range."""


@dataclass(frozen=True)
class Trajectory:
    """Timed pose sequence as arrays: t_us (n,), q (n,4) wxyz, t (n,3)."""

    t_us: np.ndarray
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not (len(self.t_us) == len(self.q) == len(self.t)):
            raise ValueError("trajectory arrays disagree on length")
        if np.any(np.diff(self.t_us) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t_us)

    @classmethod
    def from_samples(cls, samples) -> "Trajectory":
        """Build from an iterable of (t_us, Pose), sorted by time."""
        rows = sorted(samples, key=lambda s: s[0])
        t_us = np.array([r[0] for r in rows], dtype=np.int64)
        q = np.array([r[1].q for r in rows], dtype=float).reshape(-1, 4)
        t = np.array([r[1].t for r in rows], dtype=float).reshape(-1, 3)
        return cls(t_us, q, t)

    def pose(self, k: int) -> Pose:
        return Pose(self.q[k], self.t[k])


@dataclass(frozen=True)
class TrajectoryPair:
    """Estimate and ground truth with their matched sample indices."""

    est: Trajectory
    gt: Trajectory
    idx_est: np.ndarray
    idx_gt: np.ndarray
    lag_us: int
    unmatched: int

    def __len__(self) -> int:
        return len(self.idx_est)


def _speed_series(traj: Trajectory):
    """Translational speed at interval midpoints, for lag correlation."""
    dt = np.diff(traj.t_us) * 1e-6
    v = np.linalg.norm(np.diff(traj.t, axis=0), axis=1) / dt
    mid = traj.t_us[:-1] + np.diff(traj.t_us) // 2
    return mid.astype(float), v


def _best_lag(est: Trajectory, gt: Trajectory, max_lag_us: int) -> int:
    """Lag (est time minus gt time) maximizing speed cross-correlation.

    Candidates are multiples of the ground-truth sample period, tried in
    order of increasing magnitude so that zero wins all ties (a static
    scene correlates equally everywhere)."""
    if len(est) < 3 or len(gt) < 3:
        return 0
    est_mid, est_v = _speed_series(est)
    gt_mid, gt_v = _speed_series(gt)
    period = int(np.median(np.diff(gt.t_us)))
    if period <= 0:
        return 0
    ks = sorted(range(-(max_lag_us // period), max_lag_us // period + 1), key=abs)
    best, best_score = 0, -np.inf
    for k in ks:
        lag = k * period
        lo = max(est_mid[0] - lag, gt_mid[0])
        hi = min(est_mid[-1] - lag, gt_mid[-1])
        inside = (gt_mid >= lo) & (gt_mid <= hi)
        if inside.sum() < 3:
            continue
        a = np.interp(gt_mid[inside] + lag, est_mid, est_v)
        b = gt_v[inside]
        a = a - a.mean()
        b = b - b.mean()
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        if denom <= 0:
            continue
        score = float(a @ b) / denom
        if score > best_score + 1e-12:
            best, best_score = lag, score
    return best


def associate(
    est: Trajectory,
    gt: Trajectory,
    tol_us: int = ASSOC_TOL_US,
    max_lag_us: int = MAX_LAG_US,
) -> TrajectoryPair:
    """Match estimate samples to ground truth samples.

    A fixed lag is estimated first from translational-speed correlation,
    then each estimate sample is greedily paired with its nearest ground
    truth neighbor within tol_us, closest gaps first, each side used at
    most once. Raises NoOverlap when nothing matches."""
    if len(est) == 0 or len(gt) == 0:
        raise NoOverlap("empty trajectory")
    lag = _best_lag(est, gt, max_lag_us)
    shifted = est.t_us - lag
    pos = np.searchsorted(gt.t_us, shifted)
    lo = np.clip(pos - 1, 0, len(gt) - 1)
    hi = np.clip(pos, 0, len(gt) - 1)
    pick_hi = np.abs(gt.t_us[hi] - shifted) < np.abs(shifted - gt.t_us[lo])
    nn = np.where(pick_hi, hi, lo)
    gap = np.abs(gt.t_us[nn] - shifted)
    cand = np.where(gap <= tol_us)[0]
    used_gt = set()
    kept = []
    for i in cand[np.argsort(gap[cand], kind="stable")]:
        if int(nn[i]) in used_gt:
            continue
        used_gt.add(int(nn[i]))
        kept.append(i)
    if not kept:
        raise NoOverlap("no samples within association tolerance")
    kept.sort()
    idx_est = np.array(kept, dtype=np.intp)
    idx_gt = nn[idx_est]
    return TrajectoryPair(est, gt, idx_est, idx_gt, lag, len(est) - len(kept))


def _log_errors(qa, ta, qb, tb):
    """Per-row twist norms of relative(a, b): (trans norms, rot norms)."""
    dq, dt = se3.relative_arrays(qa, ta, qb, tb)
    rho, phi = se3.log_arrays(dq, dt)
    return np.linalg.norm(rho, axis=1), np.linalg.norm(phi, axis=1)


def ate(pair: TrajectoryPair):
    """Absolute trajectory error after rigid alignment.

    Returns (translational RMSE, rotational RMSE, translational SD); the
    per-sample error is the twist of gt_i^-1 (S est_i) with S the Umeyama
    fit of matched translations."""
    if len(pair) < 3:
        raise TooFewSamples(f"{len(pair)} matched samples, need 3")
    s = umeyama_align(pair.est.t[pair.idx_est], pair.gt.t[pair.idx_gt])
    eq, et = pair.est.q[pair.idx_est], pair.est.t[pair.idx_est]
    sq, st = se3.compose_arrays(
        np.broadcast_to(s.q, eq.shape), np.broadcast_to(s.t, et.shape), eq, et
    )
    trans, rot = _log_errors(pair.gt.q[pair.idx_gt], pair.gt.t[pair.idx_gt], sq, st)
    return (
        float(np.sqrt(np.mean(trans**2))),
        float(np.sqrt(np.mean(rot**2))),
        float(np.std(trans)),
    )


def _rte_errors(pair: TrajectoryPair, delta_s: float):
    """Per-pair relative error twist norms over a fixed interval."""
    t_us = pair.est.t_us[pair.idx_est]
    if len(pair) < 2 or t_us[-1] - t_us[0] <= delta_s * 1e6:
        raise TooFewSamples("trajectory shorter than the interval")
    target = t_us + int(round(delta_s * 1e6))
    pos = np.searchsorted(t_us, target)
    lo = np.clip(pos - 1, 0, len(t_us) - 1)
    hi = np.clip(pos, 0, len(t_us) - 1)
    pick_hi = np.abs(t_us[hi] - target) < np.abs(target - t_us[lo])
    j = np.where(pick_hi, hi, lo)
    valid = (np.abs(t_us[j] - target) <= ASSOC_TOL_US) & (j > np.arange(len(j)))
    if not np.any(valid):
        raise TooFewSamples("no sample pairs spaced by the interval")
    i = np.where(valid)[0]
    j = j[valid]

    def rel(traj, idx, a, b):
        return se3.relative_arrays(
            traj.q[idx[a]], traj.t[idx[a]], traj.q[idx[b]], traj.t[idx[b]]
        )

    gq, gt_ = rel(pair.gt, pair.idx_gt, i, j)
    eq, et = rel(pair.est, pair.idx_est, i, j)
    return _log_errors(gq, gt_, eq, et)


def rte(pair: TrajectoryPair, delta_s: float = DEFAULT_DELTA_S):
    """Relative trajectory error RMSE over a fixed time interval.

    Per valid sample i with a partner j near t_i + delta:
    E = (gt_i^-1 gt_j)^-1 (est_i^-1 est_j); constant offsets cancel."""
    trans, rot = _rte_errors(pair, delta_s)
    return float(np.sqrt(np.mean(trans**2))), float(np.sqrt(np.mean(rot**2)))


def top_fraction(errors: np.ndarray, fraction: float = 0.05) -> float:
    """Mean of the largest `fraction` of the error samples (at least one)."""
    if len(errors) == 0:
        raise TooFewSamples("no error samples")
    k = max(1, math.ceil(fraction * len(errors)))
    return float(np.mean(np.sort(errors)[-k:]))


def untracked_intervals(t_us, tracked, horizon_us: int | None = None):
    """Merge per-sample tracked flags into untracked [start, end) spans.

    Sample k covers [t_k, t_{k+1}); the last sample runs to horizon_us
    when given, else contributes nothing."""
    t_us = np.asarray(t_us, dtype=np.int64)
    tracked = np.asarray(tracked, dtype=bool)
    ends = list(t_us[1:]) + [horizon_us if horizon_us is not None else int(t_us[-1])]
    spans = []
    for k in range(len(t_us)):
        if tracked[k] or ends[k] <= t_us[k]:
            continue
        if spans and spans[-1][1] == t_us[k]:
            spans[-1] = (spans[-1][0], int(ends[k]))
        else:
            spans.append((int(t_us[k]), int(ends[k])))
    return spans


def loss_ratio(intervals, total_us: int) -> float:
    """Summed untracked time over total duration, intervals clipped and
    merged first."""
    if total_us <= 0:
        raise ValueError("total duration must be positive")
    spans = sorted(
        (max(0, int(a)), min(int(total_us), int(b))) for a, b in intervals
    )
    lost = 0
    cursor = 0
    for a, b in spans:
        a = max(a, cursor)
        if b > a:
            lost += b - a
            cursor = b
    return lost / total_us


@dataclass(frozen=True)
class ErrorReport:
    source: str
    target: str
    ate_trans: float
    ate_rot: float
    ate_std: float
    rte_trans: float
    rte_rot: float
    top5_trans: float
    loss_track_ratio: float
    n_samples: int
    lag_us: int


# -- log evaluation ----------------------------------------------------------


def _records(source):
    if isinstance(source, (str, Path)):
        return list(protocol.read_ndjson(source))
    return list(source)


def _gt_trajectories(rows) -> dict[str, Trajectory]:
    per: dict[str, list] = {}
    for row in rows:
        per.setdefault(row["entity"], []).append(
            (int(row["t_us"]), protocol.pose_from_wire(row["pose"]))
        )
    return {name: Trajectory.from_samples(v) for name, v in per.items()}


_IDENTITY_WIRE = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]


def _estimate_streams(rows):
    """Per-source target streams from measurement, report and update records.

    Measurement records each form a single-sensor source. Solve report
    records form the "fused" source: every pose in one report shares the
    optimizer's frame, so relatives between them are the fused estimate,
    and a target missing from a report (nothing weighted reached it) counts
    as untracked at that instant. Logs without report records fall back to
    the update stream of the lexicographically first receiving sensor,
    whose entries carry whatever completion handed that sensor.
    """
    meas: dict[str, dict[str, list]] = {}
    upd: dict[str, dict[str, list]] = {}
    rep: dict[str, dict[int, tuple]] = {}
    for row in rows:
        kind = row.get("type")
        if kind == "meas":
            by = meas.setdefault(row["sensor_id"], {})
            by.setdefault(row["target"], []).append(
                (int(row["t_us"]), row["pose"], bool(row["status"]))
            )
        elif kind == "update":
            by = upd.setdefault(row.get("sensor_id", ""), {})
            for entry in row["poses"]:
                by.setdefault(entry["target"], []).append(
                    (int(row["solve_t_us"]), entry["pose"], not entry["lose_track"])
                )
        elif kind == "report":
            t = int(row["solve_t_us"])
            for name, wire in row["poses"].items():
                layer, _, short = name.partition(":")
                if layer == "passive":
                    rep.setdefault(short, {})[t] = (wire, True)
    streams = dict(sorted(meas.items()))
    if rep:
        # pad each target with untracked rows at solve instants it missed
        solves = sorted({t for d in rep.values() for t in d})
        streams["fused"] = {
            tgt: [(t, *d.get(t, (_IDENTITY_WIRE, False))) for t in solves]
            for tgt, d in rep.items()
        }
    elif upd:
        streams["fused"] = upd[min(upd)]
    return streams


def _held_relative(by_target: dict[str, list], ref: str, other: str):
    """Reference-to-target relative estimate series with dropouts held.

    Instants where either endpoint is untracked reuse the last tracked
    relative pose; leading untracked instants are dropped. Returns the
    Trajectory or None when the pair is never co-tracked."""
    ref_at = {t: (p, ok) for t, p, ok in by_target.get(ref, [])}
    rows = []
    for t, pose, ok in by_target.get(other, []):
        if t in ref_at:
            rp, rok = ref_at[t]
            rows.append((t, rp, pose, ok and rok))
    if not rows:
        return None
    rows.sort(key=lambda r: r[0])
    t_us = np.array([r[0] for r in rows], dtype=np.int64)
    ok = np.array([r[3] for r in rows], dtype=bool)
    if not ok.any():
        return None
    carry = np.maximum.accumulate(np.where(ok, np.arange(len(ok)), -1))
    keep = carry >= 0
    valid = np.where(ok)[0]
    qr = np.array([r[1][3:] for r in rows], dtype=float)[valid]
    tr = np.array([r[1][:3] for r in rows], dtype=float)[valid]
    qo = np.array([r[2][3:] for r in rows], dtype=float)[valid]
    to = np.array([r[2][:3] for r in rows], dtype=float)[valid]
    rel_q, rel_t = se3.relative_arrays(qr, tr, qo, to)
    gather = np.searchsorted(valid, carry[keep])
    return Trajectory(t_us[keep], rel_q[gather], rel_t[gather])


def _target_loss(by_target: dict[str, list], target: str) -> float:
    rows = sorted(by_target.get(target, []))
    if len(rows) < 2:
        return 1.0
    t_us = [r[0] for r in rows]
    tracked = [r[2] for r in rows]
    spans = untracked_intervals(t_us, tracked, horizon_us=t_us[-1])
    shifted = [(a - t_us[0], b - t_us[0]) for a, b in spans]
    return loss_ratio(shifted, t_us[-1] - t_us[0])


def evaluate(
    results,
    ground_truth,
    out_dir=None,
    delta_s: float = DEFAULT_DELTA_S,
    tol_us: int = ASSOC_TOL_US,
    max_lag_us: int = MAX_LAG_US,
) -> dict[tuple[str, str], ErrorReport]:
    """Score a results log against ground truth, per source and target.

    Both inputs are NDJSON paths or iterables of already-parsed records.
    Relative trajectories run from the lexicographically first target to
    each other target. Pairs that cannot be scored (never co-tracked,
    degenerate geometry, too short) are skipped; if nothing is scorable
    NoOverlap is raised. When out_dir is given, writes report.csv,
    table.txt and traj_xyz.csv there.
    """
    gt = _gt_trajectories(_records(ground_truth))
    streams = _estimate_streams(_records(results))
    targets = sorted(
        {tgt for by in streams.values() for tgt in by} & set(gt)
    )
    if len(targets) < 2:
        raise NoOverlap("need at least two targets common to estimates and truth")
    ref = targets[0]
    reports: dict[tuple[str, str], ErrorReport] = {}
    matched_rows = []
    for source, by_target in streams.items():
        for target in targets[1:]:
            est = _held_relative(by_target, ref, target)
            if est is None:
                continue
            gt_idx = sorted(set(gt[ref].t_us) & set(gt[target].t_us))
            ga = np.searchsorted(gt[ref].t_us, gt_idx)
            gb = np.searchsorted(gt[target].t_us, gt_idx)
            rq, rt = se3.relative_arrays(
                gt[ref].q[ga], gt[ref].t[ga], gt[target].q[gb], gt[target].t[gb]
            )
            gt_rel = Trajectory(np.asarray(gt_idx, dtype=np.int64), rq, rt)
            try:
                pair = associate(est, gt_rel, tol_us=tol_us, max_lag_us=max_lag_us)
                a_trans, a_rot, a_std = ate(pair)
                r_t, r_r = _rte_errors(pair, delta_s)
            except (NoOverlap, TooFewSamples, DegenerateGeometry):
                continue
            reports[(source, target)] = ErrorReport(
                source=source,
                target=target,
                ate_trans=a_trans,
                ate_rot=a_rot,
                ate_std=a_std,
                rte_trans=float(np.sqrt(np.mean(r_t**2))),
                rte_rot=float(np.sqrt(np.mean(r_r**2))),
                top5_trans=top_fraction(r_t),
                loss_track_ratio=_target_loss(by_target, target),
                n_samples=len(pair),
                lag_us=pair.lag_us,
            )
            matched_rows.append((source, target, pair))
    if not reports:
        raise NoOverlap("no (source, target) pair could be scored")
    if out_dir is not None:
        _write_outputs(Path(out_dir), reports, matched_rows)
    return reports


_CSV_FIELDS = (
    "ate_trans",
    "ate_rot",
    "ate_std",
    "rte_trans",
    "rte_rot",
    "top5_trans",
    "loss_track_ratio",
    "n_samples",
    "lag_us",
)


def _write_outputs(out_dir: Path, reports, matched_rows) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "target", "metric", "value"])
        for (source, target), rep in sorted(reports.items()):
            for field in _CSV_FIELDS:
                w.writerow([source, target, field, getattr(rep, field)])
    with open(out_dir / "table.txt", "w") as f:
        f.write(format_table(reports))
    with open(out_dir / "traj_xyz.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["source", "target", "t_us", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z"]
        )
        for source, target, pair in matched_rows:
            et = pair.est.t[pair.idx_est]
            gt_ = pair.gt.t[pair.idx_gt]
            ts = pair.est.t_us[pair.idx_est]
            for k in range(len(pair)):
                w.writerow(
                    [source, target, int(ts[k])]
                    + [f"{x:.9f}" for x in et[k]]
                    + [f"{x:.9f}" for x in gt_[k]]
                )


def format_table(reports: dict[tuple[str, str], ErrorReport]) -> str:
    """Comparison table, millimeters and degrees."""
    head = (
        f"{'source':<12} {'target':<10} {'ATE[mm]':>9} {'SD':>7} {'ATErot[deg]':>12} "
        f"{'RTE[mm]':>9} {'top5%[mm]':>10} {'loss':>6} {'n':>7}"
    )
    lines = [head, "-" * len(head)]
    for (source, target), r in sorted(reports.items()):
        lines.append(
            f"{source:<12} {target:<10} {r.ate_trans * 1e3:>9.3f} {r.ate_std * 1e3:>7.3f} "
            f"{math.degrees(r.ate_rot):>12.4f} {r.rte_trans * 1e3:>9.3f} "
            f"{r.top5_trans * 1e3:>10.3f} {r.loss_track_ratio:>6.3f} {r.n_samples:>7d}"
        )
    return "\n".join(lines) + "\n"
