"""Metric tests: absolute/relative error oracles, alignment invariance,
loss accounting, timestamp association, and log evaluation end to end."""

import csv
import math

import numpy as np
import pytest

from scenefuse import fusion, metrics, protocol, se3, sim
from scenefuse.metrics import (
    NoOverlap,
    TooFewSamples,
    Trajectory,
    associate,
    ate,
    loss_ratio,
    rte,
    top_fraction,
    untracked_intervals,
)
from scenefuse.se3 import DegenerateGeometry, Pose, exp, relative

from conftest import random_pose, random_twist


def walk_traj(rng, n=120, dt_us=20_000, step=0.02, start_us=1_000_000):
    """Smooth random-walk trajectory, one pose per grid instant."""
    poses = [random_pose(rng, max_angle=1.0, span=0.5)]
    for _ in range(n - 1):
        poses.append(poses[-1] @ exp(random_twist(rng, 0.05, step)))
    t = start_us + np.arange(n, dtype=np.int64) * dt_us
    return Trajectory.from_samples(zip(t, poses))


def left_composed(traj, c):
    poses = [c @ traj.pose(k) for k in range(len(traj))]
    return Trajectory.from_samples(zip(traj.t_us, poses))


class TestAte:
    def test_identical_is_zero(self, rng):
        traj = walk_traj(rng)
        a_t, a_r, a_sd = ate(associate(traj, traj))
        assert a_t < 1e-12 and a_r < 1e-12 and a_sd < 1e-12

    def test_rigid_offset_removed(self, rng):
        gt = walk_traj(rng)
        est = left_composed(gt, random_pose(rng))
        a_t, a_r, a_sd = ate(associate(est, gt))
        assert a_t < 1e-9 and a_r < 1e-9 and a_sd < 1e-9

    def test_invariant_to_precomposition(self, rng):
        gt = walk_traj(rng)
        noisy = [
            gt.pose(k) @ exp(random_twist(rng, 0.01, 0.002))
            for k in range(len(gt))
        ]
        est = Trajectory.from_samples(zip(gt.t_us, noisy))
        base = ate(associate(est, gt))
        moved = ate(associate(left_composed(est, random_pose(rng)), gt))
        assert all(abs(a - b) < 1e-9 for a, b in zip(base, moved))

    def test_matches_hand_summed_oracle(self, rng):
        gt = walk_traj(rng, n=60)
        offsets = [exp(random_twist(rng, 0.02, 0.005)) for _ in range(60)]
        est = Trajectory.from_samples(
            (gt.t_us[k], gt.pose(k) @ offsets[k]) for k in range(60)
        )
        pair = associate(est, gt)
        got = ate(pair)

        s = se3.umeyama_align(
            [est.pose(k) for k in range(60)], [gt.pose(k) for k in range(60)]
        )
        trans, rot = [], []
        for k in range(60):
            err = se3.log(relative(gt.pose(k), s @ est.pose(k)))
            trans.append(np.linalg.norm(err.rho))
            rot.append(np.linalg.norm(err.phi))
        want = (
            math.sqrt(sum(x * x for x in trans) / 60),
            math.sqrt(sum(x * x for x in rot) / 60),
            float(np.std(trans)),
        )
        assert got == pytest.approx(want, abs=1e-12)

    def test_too_few_samples(self, rng):
        traj = walk_traj(rng, n=2)
        with pytest.raises(TooFewSamples):
            ate(associate(traj, traj))

    def test_degenerate_static_scene(self):
        t = 1_000_000 + np.arange(10, dtype=np.int64) * 20_000
        static = Trajectory.from_samples((ts, Pose.identity()) for ts in t)
        with pytest.raises(DegenerateGeometry):
            ate(associate(static, static))


class TestRte:
    def test_identical_is_zero(self, rng):
        traj = walk_traj(rng, n=80, dt_us=100_000)
        assert rte(associate(traj, traj)) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_constant_offset_cancels(self, rng):
        gt = walk_traj(rng, n=80, dt_us=100_000)
        est = left_composed(gt, random_pose(rng))
        r_t, r_r = rte(associate(est, gt))
        assert r_t < 1e-12 and r_r < 1e-12

    def test_linear_drift_closed_form(self):
        n, dt_us = 201, 100_000
        t = 1_000_000 + np.arange(n, dtype=np.int64) * dt_us
        gt = Trajectory.from_samples((ts, Pose.identity()) for ts in t)
        drift = Trajectory.from_samples(
            (ts, Pose.from_translation(1e-3 * k * dt_us * 1e-6, 0.0, 0.0))
            for k, ts in enumerate(t)
        )
        pair = associate(drift, gt)
        r_t, r_r = rte(pair, delta_s=1.0)
        assert abs(r_t - 1e-3) < 1e-9
        assert r_r < 1e-12
        errs, _ = metrics._rte_errors(pair, 1.0)
        assert abs(top_fraction(errs) - 1e-3) < 1e-9

    def test_interval_longer_than_span(self, rng):
        traj = walk_traj(rng, n=10, dt_us=20_000)
        with pytest.raises(TooFewSamples):
            rte(associate(traj, traj), delta_s=5.0)

    def test_top_fraction_at_least_median(self, rng):
        errs = rng.exponential(1.0, size=400)
        assert top_fraction(errs) >= float(np.median(errs))


class TestLossRatio:
    def test_boundaries(self):
        assert loss_ratio([], 100) == 0.0
        assert loss_ratio([(0, 100)], 100) == 1.0
        assert loss_ratio([(10, 20)], 100) == 0.1

    def test_overlaps_merge(self):
        assert loss_ratio([(0, 30), (20, 50)], 100) == 0.5

    def test_clipped_to_total(self):
        assert loss_ratio([(-50, 20), (90, 400)], 100) == 0.3

    def test_untracked_intervals(self):
        t = [0, 10, 20, 30, 40]
        spans = untracked_intervals(t, [True, False, False, True, False], horizon_us=50)
        assert spans == [(10, 30), (40, 50)]
        assert untracked_intervals(t, [True] * 5, horizon_us=50) == []


class TestAssociate:
    def test_exact_grid(self, rng):
        traj = walk_traj(rng)
        pair = associate(traj, traj)
        assert len(pair) == len(traj)
        assert pair.lag_us == 0 and pair.unmatched == 0
        assert np.array_equal(pair.idx_est, pair.idx_gt)

    def test_recovers_known_lag(self, rng):
        gt = walk_traj(rng, n=200)
        est = Trajectory(gt.t_us + 60_000, gt.q, gt.t)
        pair = associate(est, gt)
        assert pair.lag_us == 60_000
        assert np.array_equal(pair.idx_est, pair.idx_gt)
        assert ate(pair)[0] < 1e-12

    def test_matching_is_injective(self, rng):
        gt = walk_traj(rng, n=50, dt_us=40_000)
        dense = walk_traj(rng, n=100, dt_us=20_000)
        pair = associate(dense, gt, max_lag_us=0)
        assert len(np.unique(pair.idx_gt)) == len(pair.idx_gt)
        gaps = np.abs(gt.t_us[pair.idx_gt] - (dense.t_us[pair.idx_est] - pair.lag_us))
        assert np.all(gaps <= metrics.ASSOC_TOL_US)

    def test_disjoint_ranges_raise(self, rng):
        a = walk_traj(rng, n=20, start_us=0)
        b = walk_traj(rng, n=20, start_us=10_000_000)
        with pytest.raises(NoOverlap):
            associate(a, b, max_lag_us=0)


def write_logs(tmp_path, cfg):
    gt = sim.generate(cfg)
    recs = sim.observe(gt, cfg)
    gt_path = tmp_path / "gt.ndjson"
    est_path = tmp_path / "meas.ndjson"
    gt.write_ndjson(gt_path)
    protocol.write_ndjson(est_path, recs)
    return gt_path, est_path, recs


class TestEvaluate:
    def test_noise_free_log_scores_zero(self, tmp_path):
        cfg = sim.ScenarioConfig(
            seed=5, duration_s=10.0, rate_hz=20.0, n_sensors=2, n_targets=2,
            p_block=0.0, sigma_t=0.0, sigma_r=0.0,
        )
        gt_path, est_path, _ = write_logs(tmp_path, cfg)
        reports = metrics.evaluate(est_path, gt_path)
        assert set(reports) == {("sensor-0", "target-1"), ("sensor-1", "target-1")}
        for rep in reports.values():
            assert rep.ate_trans < 1e-9 and rep.rte_trans < 1e-9
            assert rep.loss_track_ratio == 0.0
            assert rep.lag_us == 0

    def test_blocked_stream_and_fused_side_by_side(self, tmp_path):
        cfg = sim.ScenarioConfig(
            seed=9, duration_s=20.0, rate_hz=20.0, n_sensors=2, n_targets=2,
            p_block=0.2, sigma_t=1e-4, sigma_r=1e-4,
        )
        gt_path, est_path, recs = write_logs(tmp_path, cfg)
        upds = fusion.fuse_log(recs, default_info_diag=1.0 / np.full(6, 1e-4) ** 2)
        reports = metrics.evaluate(list(recs) + upds, gt_path)
        assert ("fused", "target-1") in reports
        singles = [
            reports[(s, "target-1")].loss_track_ratio for s in ("sensor-0", "sensor-1")
        ]
        fused = reports[("fused", "target-1")]
        assert all(0.13 < r < 0.27 for r in singles)
        assert fused.loss_track_ratio < min(singles) / 2
        assert fused.ate_trans < min(
            reports[(s, "target-1")].ate_trans for s in ("sensor-0", "sensor-1")
        )

    def test_output_files(self, tmp_path):
        cfg = sim.ScenarioConfig(
            seed=3, duration_s=5.0, rate_hz=20.0, n_sensors=1, n_targets=2,
            p_block=0.0, sigma_t=1e-4, sigma_r=1e-4,
        )
        gt_path, est_path, _ = write_logs(tmp_path, cfg)
        out = tmp_path / "eval"
        reports = metrics.evaluate(est_path, gt_path, out_dir=out)
        with open(out / "report.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(reports) * len(metrics._CSV_FIELDS)
        assert {r["metric"] for r in rows} == set(metrics._CSV_FIELDS)
        table = (out / "table.txt").read_text()
        assert "sensor-0" in table and "ATE[mm]" in table
        with open(out / "traj_xyz.csv") as f:
            traj_rows = list(csv.DictReader(f))
        assert traj_rows and {"est_x", "gt_z"} <= set(traj_rows[0])

    def test_no_common_targets_raises(self, tmp_path):
        cfg = sim.ScenarioConfig(
            seed=3, duration_s=2.0, rate_hz=10.0, n_sensors=1, n_targets=2,
            p_block=0.0,
        )
        gt_path, est_path, recs = write_logs(tmp_path, cfg)
        renamed = [dict(r, target=r["target"] + "-x") for r in recs]
        with pytest.raises(NoOverlap):
            metrics.evaluate(renamed, gt_path)
