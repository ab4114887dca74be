"""Two-layer dynamic scene graph.

Active nodes are sensors; passive nodes are tracked rigid bodies. The only
stored edges are inter-layer measurements (one per sensor/target pair,
newest timestamp wins). Relative poses between passive nodes are never
stored: they are derived on demand by pairing two fresh measurements from a
common sensor, so the graph carries no absolute reference frame anywhere.

Mutations must be serialized by the owner (the fusion server holds one lock);
readers work on immutable snapshots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose, relative

DEFAULT_STALE_AFTER_US = 500_000
DEFAULT_SYNC_WINDOW_US = 100_000


class Layer(enum.Enum):
    ACTIVE = "active"
    PASSIVE = "passive"


@dataclass(frozen=True, order=True)
class NodeId:
    layer: Layer = field(compare=False)
    name: str

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("node name must be non-empty")

    def __str__(self) -> str:
        return f"{self.layer.value}:{self.name}"


def active(name: str) -> NodeId:
    return NodeId(Layer.ACTIVE, name)


def passive(name: str) -> NodeId:
    return NodeId(Layer.PASSIVE, name)


class GraphError(Exception):
    pass


class DuplicateNode(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class StaleTimestamp(GraphError):
    """Measurement older than the stored edge; dropped, not reordered."""


@dataclass(frozen=True)
class InterEdge:
    """Direct measurement: pose of `target` in `sensor`'s frame.

    status=False marks a lose-track sample; its info matrix is forced to
    zero so the optimizer weight vanishes, but the edge (and its carried
    pose) stays visible for diagnostics.
    """

    sensor: NodeId
    target: NodeId
    pose: Pose
    t_us: int
    status: bool
    info: np.ndarray

    def __post_init__(self) -> None:
        if self.sensor.layer is not Layer.ACTIVE or self.target.layer is not Layer.PASSIVE:
            raise ValueError("inter edge must run active -> passive")
        info = np.zeros((6, 6)) if not self.status else np.asarray(self.info, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("info matrix must be 6x6")
        info = info.copy()
        info.setflags(write=False)
        object.__setattr__(self, "info", info)

    @property
    def weighted(self) -> bool:
        """True when the edge carries optimizer weight (tracked, nonzero info)."""
        return self.status and bool(np.any(self.info))


@dataclass(frozen=True)
class IntraEstimate:
    via: NodeId
    pose: Pose
    t_us: int


@dataclass(frozen=True)
class IntraEdgeSet:
    """Parallel estimates of relative(P_j1, P_j2) derived via common sensors."""

    pair: tuple[NodeId, NodeId]
    estimates: tuple[IntraEstimate, ...]


@dataclass(frozen=True)
class GraphSnapshot:
    """Immutable view of the graph at `taken_at_us` with stale edges pruned."""

    active: tuple[NodeId, ...]
    passive: tuple[NodeId, ...]
    edges: tuple[InterEdge, ...]
    taken_at_us: int
    stale_after_us: int
    sync_window_us: int

    def edge(self, sensor_name: str, target_name: str) -> InterEdge | None:
        for e in self.edges:
            if e.sensor.name == sensor_name and e.target.name == target_name:
                return e
        return None

    def intra_edges(self) -> list[IntraEdgeSet]:
        return _derive_intra(self.edges, self.sync_window_us)

    def to_json_dict(self) -> dict:
        return {
            "active": [n.name for n in self.active],
            "passive": [n.name for n in self.passive],
            "edges": [
                {
                    "sensor": e.sensor.name,
                    "target": e.target.name,
                    "pose": [round(float(x), 12) for x in e.pose.as_array()],
                    "t_us": e.t_us,
                    "status": e.status,
                    "info_diag": [float(x) for x in np.diag(e.info)],
                }
                for e in self.edges
            ],
        }


class DynamicSceneGraph:
    """Node registries plus the single mutable inter-edge store."""

    def __init__(
        self,
        stale_after_us: int = DEFAULT_STALE_AFTER_US,
        sync_window_us: int = DEFAULT_SYNC_WINDOW_US,
    ) -> None:
        self.stale_after_us = int(stale_after_us)
        self.sync_window_us = int(sync_window_us)
        self._active: set[NodeId] = set()
        self._passive: set[NodeId] = set()
        self._edges: dict[tuple[str, str], InterEdge] = {}

    # -- registry ----------------------------------------------------------

    @property
    def active_nodes(self) -> set[NodeId]:
        return set(self._active)

    @property
    def passive_nodes(self) -> set[NodeId]:
        return set(self._passive)

    def has_node(self, node: NodeId) -> bool:
        return node in self._active or node in self._passive

    def add_node(self, node: NodeId) -> None:
        if self.has_node(node):
            raise DuplicateNode(str(node))
        (self._active if node.layer is Layer.ACTIVE else self._passive).add(node)

    def remove_node(self, node: NodeId) -> None:
        """Remove the node and every incident edge atomically."""
        if node not in self._active and node not in self._passive:
            raise UnknownNode(str(node))
        self._active.discard(node)
        self._passive.discard(node)
        name = node.name
        if node.layer is Layer.ACTIVE:
            self._edges = {k: e for k, e in self._edges.items() if k[0] != name}
        else:
            self._edges = {k: e for k, e in self._edges.items() if k[1] != name}

    # -- measurements --------------------------------------------------------

    def upsert_measurement(self, edge: InterEdge) -> None:
        if edge.sensor not in self._active:
            raise UnknownNode(str(edge.sensor))
        if edge.target not in self._passive:
            raise UnknownNode(str(edge.target))
        key = (edge.sensor.name, edge.target.name)
        stored = self._edges.get(key)
        if stored is not None and edge.t_us < stored.t_us:
            raise StaleTimestamp(f"{key}: {edge.t_us} < stored {stored.t_us}")
        self._edges[key] = edge

    def edges(self) -> list[InterEdge]:
        return list(self._edges.values())

    def edge_for(self, sensor_name: str, target_name: str) -> InterEdge | None:
        return self._edges.get((sensor_name, target_name))

    def latest_timestamp(self) -> int | None:
        """Logical clock of the graph: newest measurement timestamp."""
        if not self._edges:
            return None
        return max(e.t_us for e in self._edges.values())

    # -- derived views -------------------------------------------------------

    def _fresh_edges(self, now_us: int) -> list[InterEdge]:
        cutoff = now_us - self.stale_after_us
        return [e for e in self._edges.values() if e.t_us >= cutoff]

    def derive_intra_edges(self, now_us: int) -> list[IntraEdgeSet]:
        return _derive_intra(self._fresh_edges(now_us), self.sync_window_us)

    def snapshot(self, now_us: int) -> GraphSnapshot:
        return GraphSnapshot(
            active=tuple(sorted(self._active)),
            passive=tuple(sorted(self._passive)),
            edges=tuple(
                sorted(self._fresh_edges(now_us), key=lambda e: (e.sensor.name, e.target.name))
            ),
            taken_at_us=now_us,
            stale_after_us=self.stale_after_us,
            sync_window_us=self.sync_window_us,
        )


def _derive_intra(edges, sync_window_us: int) -> list[IntraEdgeSet]:
    """Pair valid measurements sharing a sensor into relative-pose estimates.

    Pairs are ordered j1 < j2 by name; the reverse direction is the inverse
    and is not materialized. Estimates with timestamps further apart than
    sync_window_us would relate poses sampled at different instants and are
    skipped.
    """
    by_sensor: dict[str, list[InterEdge]] = {}
    for e in edges:
        if e.status:
            by_sensor.setdefault(e.sensor.name, []).append(e)
    sets: dict[tuple[NodeId, NodeId], list[IntraEstimate]] = {}
    for sensor_edges in by_sensor.values():
        sensor_edges.sort(key=lambda e: e.target.name)
        for i in range(len(sensor_edges)):
            for j in range(i + 1, len(sensor_edges)):
                e1, e2 = sensor_edges[i], sensor_edges[j]
                if abs(e1.t_us - e2.t_us) > sync_window_us:
                    continue
                est = IntraEstimate(
                    via=e1.sensor,
                    pose=relative(e1.pose, e2.pose),
                    t_us=min(e1.t_us, e2.t_us),
                )
                sets.setdefault((e1.target, e2.target), []).append(est)
    return [
        IntraEdgeSet(pair=pair, estimates=tuple(sorted(ests, key=lambda s: s.via.name)))
        for pair, ests in sorted(sets.items(), key=lambda kv: (kv[0][0].name, kv[0][1].name))
    ]
