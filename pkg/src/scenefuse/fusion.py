"""Fusion engine shared by the batch and live paths.

One engine instance owns the scene graph, the warm-started solver state,
and the latest snapshot/report pair; it turns those into per-sensor pose
updates and query replies. The TCP server wraps this with sessions and a
timer, the batch path (fuse_log) feeds it a recorded measurement log step
by step, so replaying a server log offline reproduces the same solves.
"""

from __future__ import annotations

import math

import numpy as np

from . import completion, pgo, protocol
from .graph import (
    DEFAULT_STALE_AFTER_US,
    DEFAULT_SYNC_WINDOW_US,
    DynamicSceneGraph,
    GraphSnapshot,
    InterEdge,
    NodeId,
    StaleTimestamp,
    UnknownNode,
    active,
    passive,
)


def _diag(sigma_t: float, sigma_r: float) -> np.ndarray:
    return np.array([1.0 / sigma_t**2] * 3 + [1.0 / sigma_r**2] * 3)


# Default measurement weights per declared sensor type. Configuration, not
# ground truth: optical trackers get 0.25 mm / 0.05 deg, headsets 2 mm /
# 0.5 deg, anything else unit weights.
INFO_DIAGS: dict[str, np.ndarray] = {
    "ots": _diag(0.25e-3, math.radians(0.05)),
    "hmd": _diag(2.0e-3, math.radians(0.5)),
}


def info_diag_for(sensor_type: str) -> np.ndarray:
    return INFO_DIAGS.get(sensor_type, np.ones(6)).copy()


IDENTITY_WIRE = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]

# Operating tolerance for the per-cycle solves. Stopping once the relative
# cost gain drops below 1e-8 leaves the poses within nanometers of the
# optimum (measurement noise sits six orders above that) and saves the
# iterations that only polish decimals nobody consumes. Offline replay and
# the live server share this engine, so both sides stop identically.
ENGINE_COST_TOL = 1e-8


class TargetNotAllowed(ValueError):
    """Measurement names a target outside the configured allow-list."""


class AnchorIneligible(ValueError):
    """Requested anchor is not an active node with a weighted edge."""


class FusionEngine:
    """Scene graph + warm-started solver + update/query assembly.

    Not thread-safe; callers serialize access (the server holds one lock
    around every call, the batch path is single-threaded).
    """

    def __init__(
        self,
        stale_after_us: int = DEFAULT_STALE_AFTER_US,
        sync_window_us: int = DEFAULT_SYNC_WINDOW_US,
        allow_targets=None,
        max_iter: int = pgo.DEFAULT_MAX_ITER,
        cost_tol: float = ENGINE_COST_TOL,
        step_tol: float = pgo.DEFAULT_STEP_TOL,
    ) -> None:
        self.graph = DynamicSceneGraph(stale_after_us, sync_window_us)
        self.allow_targets = None if allow_targets is None else frozenset(allow_targets)
        self.max_iter = max_iter
        self.cost_tol = cost_tol
        self.step_tol = step_tol
        self.snapshot: GraphSnapshot | None = None
        self.report: pgo.SolveReport | None = None
        self.stale_drops = 0
        self.solve_failures = 0
        self._state: pgo.StateVector | None = None
        self._anchor_hint: NodeId | None = None

    # -- registry ----------------------------------------------------------

    def ensure_sensor(self, name: str) -> NodeId:
        node = active(name)
        if not self.graph.has_node(node):
            self.graph.add_node(node)
        return node

    def ensure_target(self, name: str) -> NodeId:
        if self.allow_targets is not None and name not in self.allow_targets:
            raise TargetNotAllowed(name)
        node = passive(name)
        if not self.graph.has_node(node):
            self.graph.add_node(node)
        return node

    def remove(self, node: NodeId) -> None:
        self.graph.remove_node(node)
        if self._anchor_hint == node:
            self._anchor_hint = None

    def force_anchor(self, name: str) -> None:
        """Pin the gauge anchor for subsequent solves.

        Eligibility is judged against the graph as it stands now: the node
        must be active and carry at least one weighted fresh edge.
        """
        node = active(name)
        now = self.graph.latest_timestamp()
        snap = self.graph.snapshot(now if now is not None else 0)
        eligible = {e.sensor for e in snap.edges if e.weighted}
        if node not in eligible:
            raise AnchorIneligible(name)
        self._anchor_hint = node

    # -- ingestion ---------------------------------------------------------

    def ingest(self, rec: dict, default_info_diag=None) -> bool:
        """Upsert one measurement record; False when dropped as stale.

        Nodes are auto-registered on first sight. rec follows the
        measurement wire schema; info_diag falls back to `default_info_diag`
        then to unit weights.
        """
        sensor = self.ensure_sensor(rec["sensor_id"])
        target = self.ensure_target(rec["target"])
        diag = rec.get("info_diag", default_info_diag)
        info = np.diag(diag) if diag is not None else np.eye(6)
        edge = InterEdge(
            sensor=sensor,
            target=target,
            pose=protocol.pose_from_wire(rec["pose"]),
            t_us=int(rec["t_us"]),
            status=bool(rec["status"]),
            info=info,
        )
        try:
            self.graph.upsert_measurement(edge)
        except StaleTimestamp:
            self.stale_drops += 1
            return False
        return True

    # -- fusion cycle --------------------------------------------------------

    def step(self, now_us: int | None = None) -> GraphSnapshot:
        """Snapshot at `now_us` (default: newest measurement) and re-solve.

        A failed solve (nothing weighted, singular system) keeps the
        previous report so queries can still use the last good relative
        estimates; the snapshot always moves forward.
        """
        if now_us is None:
            now_us = self.graph.latest_timestamp() or 0
        now_us = int(now_us)
        snap = self.graph.snapshot(now_us)
        self.snapshot = snap
        try:
            init = self._state
            if self._anchor_hint is not None:
                init = pgo.initial_state(snap, anchor=self._anchor_hint, previous=init)
            report = pgo.solve(
                snap,
                init=init,
                max_iter=self.max_iter,
                cost_tol=self.cost_tol,
                step_tol=self.step_tol,
            )
        except pgo.SolveError:
            self.solve_failures += 1
            return snap
        self.report = report
        self._state = report.state
        return snap

    # -- outputs -------------------------------------------------------------

    def update_for(self, sensor_name: str) -> dict:
        """POSE_UPDATE payload for one sensor from the latest cycle."""
        snap = self.snapshot
        if snap is None or active(sensor_name) not in snap.active:
            return protocol.pose_update(0, [])
        results = completion.complete_all(snap, active(sensor_name), self.report)
        entries = []
        for target in sorted(results, key=lambda n: n.name):
            res = results[target]
            if res is None:
                entries.append(
                    {
                        "target": target.name,
                        "pose": list(IDENTITY_WIRE),
                        "direct": False,
                        "uncertainty": [0.0] * 6,
                        "lose_track": True,
                    }
                )
                continue
            entries.append(
                {
                    "target": target.name,
                    "pose": protocol.pose_to_wire(res.pose),
                    "direct": res.direct,
                    "uncertainty": self._uncertainty_of(target),
                    "lose_track": False,
                }
            )
        return protocol.pose_update(snap.taken_at_us, entries)

    def query(self, sensor_name: str, target_name: str) -> dict:
        """QUERY_RESULT payload answered from the latest snapshot/report."""
        snap = self.snapshot
        lost = protocol.query_result(
            target_name, None, False, None, [], 0, lose_track=True
        )
        if snap is None:
            return lost
        try:
            res = completion.query_pose(
                snap, active(sensor_name), passive(target_name), report=self.report
            )
        except (UnknownNode, completion.NoPath):
            return lost
        age = max(snap.taken_at_us - res.path.freshness, 0)
        return protocol.query_result(
            target_name,
            res.pose,
            res.direct,
            self._uncertainty_of(passive(target_name)),
            [str(n) for n in res.path.nodes()],
            age,
            lose_track=False,
        )

    def _uncertainty_of(self, node: NodeId) -> list[float]:
        if self.report is not None and node in self.report.uncertainties:
            return [float(x) for x in self.report.uncertainties[node]]
        return [0.0] * 6


def report_record(solve_t_us: int, report: pgo.SolveReport) -> dict:
    """Loggable record of one solve, same shape live and offline."""
    return {"type": "report", "solve_t_us": int(solve_t_us), **report.to_json_dict()}


def fuse_log(
    measurements,
    default_info_diag=None,
    engine: FusionEngine | None = None,
    solve_period_us: int | None = None,
    **engine_kwargs,
) -> list[dict]:
    """Batch-replay a measurement log through a fusion engine.

    Measurements are grouped by timestamp; each distinct t_us becomes one
    fusion cycle solved at that instant. Every cycle that produces a fresh
    solve emits one report record (the optimizer's own pose table, which
    is the fused estimate), then every sensor present gets a tagged update
    record. Records come back in cycle order, sensors sorted within a
    cycle.

    solve_period_us decouples the solve cadence from the measurement rate
    the way the live server's timer does: all records are still ingested
    in timestamp order, but a cycle only runs once at least a period has
    passed since the previous one (the final timestamp always solves, so
    no tail of the log goes unfused).
    """
    if engine is None:
        engine = FusionEngine(**engine_kwargs)
    by_step: dict[int, list[dict]] = {}
    for rec in measurements:
        by_step.setdefault(int(rec["t_us"]), []).append(rec)
    steps = sorted(by_step)
    out: list[dict] = []
    last_solve: int | None = None
    for t_us in steps:
        for rec in by_step[t_us]:
            engine.ingest(rec, default_info_diag=default_info_diag)
        due = (
            solve_period_us is None
            or last_solve is None
            or t_us - last_solve >= solve_period_us
            or t_us == steps[-1]
        )
        if not due:
            continue
        last_solve = t_us
        prev_report = engine.report
        snap = engine.step(t_us)
        if engine.report is not None and engine.report is not prev_report:
            out.append(report_record(snap.taken_at_us, engine.report))
        for sensor in snap.active:
            upd = engine.update_for(sensor.name)
            upd["sensor_id"] = sensor.name
            out.append(upd)
    return out
