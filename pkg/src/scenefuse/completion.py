"""Kinematic completion: pose of an occluded target in a sensor's frame.

When the direct measurement edge is lost, the target may still be placed by
chaining other fresh edges: inter-layer measurements traversed in either
direction and derived relative poses between targets. The search is an
iterative-deepening DFS over simple paths; among the shortest paths the
freshest wins (largest minimum timestamp along the path), and any remaining
tie falls to the lexicographically smallest node-name sequence, which makes
results reproducible byte for byte.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .graph import GraphSnapshot, Layer, NodeId, UnknownNode
from .pgo import SolveReport
from .se3 import Pose


class NoPath(Exception):
    """Target unreachable through currently valid edges: report lose-track."""


class EdgeKind(enum.Enum):
    INTER = "inter"
    INTRA = "intra"


@dataclass(frozen=True)
class PathEdge:
    """One traversed link; endpoints and pose are in traversal order."""

    kind: EdgeKind
    endpoints: tuple[NodeId, NodeId]
    pose: Pose
    t_us: int


@dataclass(frozen=True)
class KinematicPath:
    edges: tuple[PathEdge, ...]

    @property
    def freshness(self) -> int:
        return min(e.t_us for e in self.edges)

    def nodes(self) -> tuple[NodeId, ...]:
        return (self.edges[0].endpoints[0],) + tuple(e.endpoints[1] for e in self.edges)


@dataclass(frozen=True)
class QueryResult:
    pose: Pose
    direct: bool
    path: KinematicPath


@dataclass(frozen=True)
class _Link:
    other: NodeId
    pose: Pose
    t_us: int
    kind: EdgeKind


def _link_table(snapshot: GraphSnapshot, report: SolveReport | None):
    """Traversable links: tracked inter-edges both ways plus intra estimates.

    An intra link carries the optimized relative pose when the last solve
    covers both endpoints (stamped with the newest supporting measurement),
    otherwise its freshest raw estimate.
    """
    table: dict[NodeId, list[_Link]] = {}

    def add(a: NodeId, b: NodeId, pose: Pose, t_us: int, kind: EdgeKind) -> None:
        table.setdefault(a, []).append(_Link(b, pose, t_us, kind))
        table.setdefault(b, []).append(_Link(a, pose.inverse(), t_us, kind))

    for e in snapshot.edges:
        if e.status:
            add(e.sensor, e.target, e.pose, e.t_us, EdgeKind.INTER)
    for s in snapshot.intra_edges():
        j1, j2 = s.pair
        solved = (
            report is not None
            and j1 in report.state.passive
            and j2 in report.state.passive
        )
        if solved:
            pose = report.relative_pose(j1, j2)
            t_us = max(est.t_us for est in s.estimates)
        else:
            best = max(s.estimates, key=lambda est: (est.t_us, est.via.name))
            pose, t_us = best.pose, best.t_us
        add(j1, j2, pose, t_us, EdgeKind.INTRA)

    for links in table.values():
        links.sort(key=lambda l: (l.other.name, l.other.layer.value, l.kind.value, l.t_us))
    return table


def _path_key(path: tuple[PathEdge, ...]):
    names = tuple((e.endpoints[1].name, e.endpoints[1].layer.value) for e in path)
    return (-min(e.t_us for e in path), names)


def _search(table, sensor: NodeId, target: NodeId, n_nodes: int):
    """Iterative deepening: all simple paths at the first depth that reaches
    the target, then the selection rule picks one."""
    for limit in range(1, n_nodes):
        found: list[tuple[PathEdge, ...]] = []
        visited = {sensor}

        def dfs(node: NodeId, depth: int, acc: list[PathEdge]) -> None:
            if depth == limit:
                return
            for link in table.get(node, ()):
                if link.other in visited:
                    continue
                edge = PathEdge(link.kind, (node, link.other), link.pose, link.t_us)
                if link.other == target:
                    found.append(tuple(acc) + (edge,))
                    continue
                visited.add(link.other)
                acc.append(edge)
                dfs(link.other, depth + 1, acc)
                acc.pop()
                visited.remove(link.other)

        dfs(sensor, 0, [])
        if found:
            return min(found, key=_path_key)
    return None


def _compose(path: tuple[PathEdge, ...]) -> Pose:
    pose = path[0].pose
    for e in path[1:]:
        pose = pose @ e.pose
    return pose


def query_pose(
    snapshot: GraphSnapshot,
    sensor: NodeId,
    target: NodeId,
    report: SolveReport | None = None,
) -> QueryResult:
    if sensor.layer is not Layer.ACTIVE or sensor not in snapshot.active:
        raise UnknownNode(str(sensor))
    if target.layer is not Layer.PASSIVE or target not in snapshot.passive:
        raise UnknownNode(str(target))

    direct = snapshot.edge(sensor.name, target.name)
    if direct is not None and direct.status:
        edge = PathEdge(EdgeKind.INTER, (sensor, target), direct.pose, direct.t_us)
        return QueryResult(direct.pose, True, KinematicPath((edge,)))

    table = _link_table(snapshot, report)
    n_nodes = len(snapshot.active) + len(snapshot.passive)
    path = _search(table, sensor, target, n_nodes)
    if path is None:
        raise NoPath(f"{sensor} -> {target}")
    return QueryResult(_compose(path), False, KinematicPath(path))


def complete_all(
    snapshot: GraphSnapshot,
    sensor: NodeId,
    report: SolveReport | None = None,
) -> dict[NodeId, QueryResult | None]:
    """Every target's pose in `sensor`'s frame; None marks lose-track."""
    if sensor not in snapshot.active:
        raise UnknownNode(str(sensor))
    out: dict[NodeId, QueryResult | None] = {}
    for target in snapshot.passive:
        try:
            out[target] = query_pose(snapshot, sensor, target, report=report)
        except NoPath:
            out[target] = None
    return out
