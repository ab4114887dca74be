"""Pose-graph optimization over scene graph snapshots.

State is one pose per node with a single active node anchored to identity:
only relative geometry is observable, so the anchor fixes the six gauge
freedoms. Residuals compare each stored measurement against the pose the
current state predicts for it, and Gauss-Newton minimizes the information-
weighted sum of squares. Jacobians are analytic (right perturbation on
every node) and finite-difference checked in the tests.

For an edge (i, j) with measurement T and state poses A, P the residual is

    r = log(T^-1 A^-1 P)

and with E = exp-map perturbations A exp(da), P exp(dp):

    dr/ddp = Jr_inv(r)
    dr/dda = -Jr_inv(r) Ad(P^-1 A)

where Jr_inv is the inverse right Jacobian of SE(3) evaluated at r.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from . import se3
from .graph import GraphSnapshot, InterEdge, Layer, NodeId
from .graph import UnknownNode
from .se3 import AngleNearPi, Pose, log, relative

DEFAULT_MAX_ITER = 50
DEFAULT_COST_TOL = 1e-10
DEFAULT_STEP_TOL = 1e-12
# accepted damping in warm fusion cycles clusters between 1e-3 and 1e2, and
# h + lam*diag(h) shrinks the step gently (lam=0.1 is a ~9% shrink), so wide
# rungs cost little precision and keep failed-step walks short
_DAMPING_LADDER = (1e-3, 1e-1, 1e1, 1e3)
_OFFDIAG = ~np.eye(6, dtype=bool)


class SolveError(Exception):
    pass


class DisconnectedNode(SolveError):
    """No anchor-connected structure to optimize."""


class SingularNormalEquations(SolveError):
    """Normal equations stayed rank-deficient through the damping ladder."""


@dataclass
class StateVector:
    """Current pose per node, expressed in the anchor sensor's frame."""

    active: dict[NodeId, Pose]
    passive: dict[NodeId, Pose]
    anchor: NodeId

    def __post_init__(self) -> None:
        if self.anchor not in self.active:
            raise ValueError(f"anchor {self.anchor} missing from active poses")

    def pose_of(self, node: NodeId) -> Pose:
        table = self.active if node.layer is Layer.ACTIVE else self.passive
        if node not in table:
            raise UnknownNode(str(node))
        return table[node]

    def clone(self) -> "StateVector":
        return StateVector(dict(self.active), dict(self.passive), self.anchor)


@dataclass
class SolveReport:
    state: StateVector
    cost_trace: list[float]
    iterations: int
    converged: bool
    uncertainties: dict[NodeId, np.ndarray]
    excluded: tuple[NodeId, ...] = ()
    damping_used: bool = False

    def relative_pose(self, j1: NodeId, j2: NodeId) -> Pose:
        """Optimized pose of j2 in j1's frame (gauge cancels)."""
        return relative(self.state.pose_of(j1), self.state.pose_of(j2))

    def to_json_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "cost": [float(c) for c in self.cost_trace],
            "anchor": str(self.state.anchor),
            "poses": {
                str(n): [float(x) for x in p.as_array()]
                for table in (self.state.active, self.state.passive)
                for n, p in sorted(table.items(), key=lambda kv: str(kv[0]))
            },
            "uncertainty": {
                str(n): [float(x) for x in u]
                for n, u in sorted(self.uncertainties.items(), key=lambda kv: str(kv[0]))
            },
            "excluded": [str(n) for n in self.excluded],
            "damping_used": self.damping_used,
        }


# -- residuals and cost --------------------------------------------------------


def residual(t_ij: Pose, a_i: Pose, p_j: Pose):
    """log(T^-1 A^-1 P): zero iff the measurement matches the state exactly."""
    return log(relative(a_i @ t_ij, p_j))


def cost(snapshot: GraphSnapshot, state: StateVector) -> float:
    total = 0.0
    for e in snapshot.edges:
        if not e.weighted:
            continue
        r = residual(e.pose, state.pose_of(e.sensor), state.pose_of(e.target)).as_vector()
        total += float(r @ e.info @ r)
    return total


# -- linearization ---------------------------------------------------------------


def column_order(state: StateVector) -> list[NodeId]:
    """Jacobian column blocks: non-anchor actives by name, then passives."""
    actives = sorted(n for n in state.active if n != state.anchor)
    passives = sorted(state.passive)
    return actives + passives


def _weighted_edges(snapshot: GraphSnapshot) -> list[InterEdge]:
    return [e for e in snapshot.edges if e.weighted]


def _edge_blocks(qa, ta, qt, tt, qp, tp, anchored):
    """Batched residuals and analytic blocks from stacked pose arrays.

    Returns (r (n,6), blocks_a (n,6,6), blocks_p (n,6,6)); blocks_a rows of
    anchored edges are zeroed and carry no information.
    """
    q1, t1 = se3.compose_arrays(qa, ta, qt, tt)
    qr, tr = se3.relative_arrays(q1, t1, qp, tp)
    rho, phi = se3.log_arrays(qr, tr)
    r = np.concatenate([rho, phi], axis=1)
    blocks_p = se3.right_jacobian_inv_arrays(r)
    qpa, tpa = se3.relative_arrays(qp, tp, qa, ta)
    blocks_a = -(blocks_p @ se3.adjoint_arrays(qpa, tpa))
    blocks_a[anchored] = 0.0
    return r, blocks_a, blocks_p


def _gather(edges: list[InterEdge], state: StateVector):
    n = len(edges)
    qa = np.empty((n, 4))
    ta = np.empty((n, 3))
    qp = np.empty((n, 4))
    tp = np.empty((n, 3))
    qt = np.empty((n, 4))
    tt = np.empty((n, 3))
    anchored = np.zeros(n, dtype=bool)
    for k, e in enumerate(edges):
        a = state.pose_of(e.sensor)
        p = state.pose_of(e.target)
        qa[k], ta[k] = a.q, a.t
        qp[k], tp[k] = p.q, p.t
        qt[k], tt[k] = e.pose.q, e.pose.t
        anchored[k] = e.sensor == state.anchor
    return qa, ta, qt, tt, qp, tp, anchored


def jacobian(snapshot: GraphSnapshot, state: StateVector):
    """Stacked residual and sparse J.

    Rows: 6 per weighted edge, ordered by (sensor name, target name).
    Columns: 6 per node in column_order(state); the anchor has no block.
    """
    edges = _weighted_edges(snapshot)
    cols = {n: 6 * i for i, n in enumerate(column_order(state))}
    qa, ta, qt, tt, qp, tp, anchored = _gather(edges, state)
    r, blocks_a, blocks_p = _edge_blocks(qa, ta, qt, tt, qp, tp, anchored)
    data, ri, ci = [], [], []

    def put(row0, col0, block):
        for a in range(6):
            for b in range(6):
                data.append(block[a, b])
                ri.append(row0 + a)
                ci.append(col0 + b)

    for k, e in enumerate(edges):
        if not anchored[k]:
            put(6 * k, cols[e.sensor], blocks_a[k])
        put(6 * k, cols[e.target], blocks_p[k])
    j = scipy.sparse.coo_matrix(
        (data, (ri, ci)), shape=(6 * len(edges), 6 * len(cols))
    ).tocsr()
    return r.reshape(-1), j


@functools.lru_cache(maxsize=128)
def _scatter_fabric(order: tuple[NodeId, ...], endpoints: tuple[tuple[NodeId, NodeId], ...]):
    """Edge index arrays and flat scatter targets for H and g assembly.

    Pure function of the graph topology, which is stable across fusion
    cycles, so the cache turns per-solve index fabrication into a lookup.
    Anchored edges have no sensor block; their (a,a), (a,p), (p,a)
    entries are dropped.
    """
    m = len(order)
    idx = {n: i for i, n in enumerate(order)}
    ia = np.array([idx.get(s, m) for s, _ in endpoints], dtype=int)
    ip = np.array([idx[t] for _, t in endpoints], dtype=int)
    anchored = ia == m
    na = ~anchored
    dim = 6 * m
    grid = (np.arange(6)[:, None] * dim + np.arange(6)).ravel()
    six = np.arange(6)
    op = 6 * ip
    opn = op[na]
    oa = 6 * ia[na]
    h_idx = np.concatenate([
        ((op * (dim + 1))[:, None] + grid).ravel(),
        ((oa * (dim + 1))[:, None] + grid).ravel(),
        ((oa * dim + opn)[:, None] + grid).ravel(),
        ((opn * dim + oa)[:, None] + grid).ravel(),
    ])
    g_idx = np.concatenate([(op[:, None] + six).ravel(), (oa[:, None] + six).ravel()])
    for arr in (ia, ip, anchored, na, h_idx, g_idx):
        arr.setflags(write=False)
    return ia, ip, anchored, na, h_idx, g_idx, dim


class _Problem:
    """Array-resident solve workspace.

    Poses live in stacked (q, t) arrays ordered by column_order with one
    extra identity row for the anchor; edges index into them. Keeping the
    iteration loop free of per-node objects is what holds a warm solve
    near a millisecond.
    """

    def __init__(self, edges: list[InterEdge], state: StateVector, order: list[NodeId]):
        self.edges = edges
        self.order = order
        self.m = len(order)
        self.qs = np.empty((self.m + 1, 4))
        self.ts = np.empty((self.m + 1, 3))
        for i, n in enumerate(order):
            p = state.pose_of(n)
            self.qs[i], self.ts[i] = p.q, p.t
        self.qs[self.m] = (1.0, 0.0, 0.0, 0.0)
        self.ts[self.m] = 0.0
        (self.ia, self.ip, self.anchored, self._na, self._h_idx, self._g_idx,
         self.dim) = _scatter_fabric(
            tuple(order), tuple((e.sensor, e.target) for e in edges)
        )
        self.qt = np.array([e.pose.q for e in edges])
        self.tt = np.array([e.pose.t for e in edges])
        self.omega = np.array([e.info for e in edges])
        wd = self.omega.diagonal(axis1=1, axis2=2)
        self._wdiag = (
            None if self.omega[:, _OFFDIAG].any() else np.ascontiguousarray(wd)
        )
        # Ad(T^-1) is constant per edge; with r = log((A T)^-1 P) the sensor
        # block -Jr_inv(r) Ad(P^-1 A) equals -Jl_inv(r) Ad(T^-1), which
        # spares the iteration loop a second relative pose and its adjoint
        qti = se3.quat_conj(self.qt)
        self.ad_tinv = se3.adjoint_arrays(qti, -se3.quat_rotate(qti, self.tt))

    def normal_equations(self, qs, ts):
        """Dense H = J^T W J, g = J^T W r0, and the weighted cost."""
        q1, t1 = se3.compose_arrays(qs[self.ia], ts[self.ia], self.qt, self.tt)
        qr, tr = se3.relative_arrays(q1, t1, qs[self.ip], ts[self.ip])
        rho, phi, jl, blocks_p = se3.log_and_jinvs_arrays(qr, tr)
        r = np.concatenate([rho, phi], axis=1)
        blocks_a = -(jl @ self.ad_tinv)
        blocks_a[self.anchored] = 0.0
        na = self._na
        wd = self._wdiag
        if wd is None:
            wr = (self.omega @ r[..., None])[..., 0]
            wp = self.omega @ blocks_p
            wa = self.omega[na] @ blocks_a[na]
        else:
            # diagonal weights are by far the common case; row scaling
            # beats three batched 6x6 matmuls at fusion-cycle edge counts
            wr = wd * r
            wp = wd[:, :, None] * blocks_p
            wa = wd[na, :, None] * blocks_a[na]
        c = float((r * wr).sum())
        pt = blocks_p.transpose(0, 2, 1)
        at = blocks_a[na].transpose(0, 2, 1)
        hpp = pt @ wp
        hap = at @ wp[na]
        haa = at @ wa
        gp = (pt @ wr[..., None])[..., 0]
        ga = (at @ wr[na, :, None])[..., 0]
        hvals = np.concatenate([
            hpp.ravel(), haa.ravel(), hap.ravel(),
            hap.transpose(0, 2, 1).ravel(),
        ])
        h = np.bincount(
            self._h_idx, weights=hvals, minlength=self.dim * self.dim
        ).reshape(self.dim, self.dim)
        g = np.bincount(
            self._g_idx,
            weights=np.concatenate([gp.ravel(), ga.ravel()]),
            minlength=self.dim,
        )
        return h, g, c

    def cost_only(self, qs, ts):
        """Weighted cost without the Jacobian work.

        Damping-ladder candidates only need accept/reject triage; computing
        H and g for a step that gets rejected is the single biggest waste in
        a damped solve.
        """
        q1, t1 = se3.compose_arrays(qs[self.ia], ts[self.ia], self.qt, self.tt)
        qr, tr = se3.relative_arrays(q1, t1, qs[self.ip], ts[self.ip])
        rho, phi = se3.log_arrays(qr, tr)
        r = np.concatenate([rho, phi], axis=1)
        wd = self._wdiag
        wr = (self.omega @ r[..., None])[..., 0] if wd is None else wd * r
        return float((r * wr).sum())

    def apply_step(self, qs, ts, delta):
        d = delta.reshape(self.m, 6)
        qd, td = se3.exp_arrays(d[:, 0:3], d[:, 3:6])
        qn, tn = se3.compose_arrays(qs[: self.m], ts[: self.m], qd, td)
        qn /= np.sqrt((qn * qn).sum(axis=1, keepdims=True))
        out_q = np.empty_like(qs)
        out_t = np.empty_like(ts)
        out_q[: self.m] = qn
        out_t[: self.m] = tn
        out_q[self.m] = qs[self.m]
        out_t[self.m] = ts[self.m]
        return out_q, out_t

    def to_state(self, qs, ts, anchor: NodeId) -> StateVector:
        active: dict[NodeId, Pose] = {anchor: Pose.identity()}
        passive: dict[NodeId, Pose] = {}
        for i, n in enumerate(self.order):
            table = active if n.layer is Layer.ACTIVE else passive
            table[n] = Pose(qs[i], ts[i])
        return StateVector(active, passive, anchor)


def _reachable(
    snapshot: GraphSnapshot, anchor: NodeId, edges: list[InterEdge] | None = None
) -> set[NodeId]:
    adj: dict[NodeId, set[NodeId]] = {}
    for e in _weighted_edges(snapshot) if edges is None else edges:
        adj.setdefault(e.sensor, set()).add(e.target)
        adj.setdefault(e.target, set()).add(e.sensor)
    seen = {anchor}
    frontier = [anchor]
    while frontier:
        nxt = []
        for n in frontier:
            for m in adj.get(n, ()):
                if m not in seen:
                    seen.add(m)
                    nxt.append(m)
        frontier = nxt
    return seen


def choose_anchor(
    snapshot: GraphSnapshot,
    previous: NodeId | None = None,
    edges: list[InterEdge] | None = None,
) -> NodeId:
    """Lowest-name active node with a weighted edge; a still-eligible
    previous anchor is kept to avoid needless frame flips."""
    if edges is None:
        edges = _weighted_edges(snapshot)
    eligible = sorted({e.sensor for e in edges})
    if not eligible:
        raise DisconnectedNode("no active node carries a weighted edge")
    if previous is not None and previous in eligible:
        return previous
    return eligible[0]


def initial_state(
    snapshot: GraphSnapshot,
    anchor: NodeId | None = None,
    previous: StateVector | None = None,
) -> StateVector:
    """Anchor-frame initialization: warm-start from `previous` where
    possible, fill the rest by composing measurement chains breadth-first."""
    if anchor is None:
        anchor = choose_anchor(snapshot, previous.anchor if previous else None)
    warm: dict[NodeId, Pose] = {}
    if previous is not None and anchor in previous.active:
        prev_anchor = previous.active[anchor]
        if prev_anchor.q[0] == 1.0 and not prev_anchor.t.any():
            # anchor unchanged and already pinned: the frame change is the
            # identity, so the previous poses carry over as they are
            warm.update(previous.active)
            warm.update(previous.passive)
        else:
            to_new = prev_anchor.inverse()
            for table in (previous.active, previous.passive):
                for n, p in table.items():
                    warm[n] = to_new @ p

    adj: dict[NodeId, list[tuple[NodeId, InterEdge]]] = {}
    for e in _weighted_edges(snapshot):
        adj.setdefault(e.sensor, []).append((e.target, e))
        adj.setdefault(e.target, []).append((e.sensor, e))

    poses: dict[NodeId, Pose] = {anchor: Pose.identity()}
    frontier = [anchor]
    while frontier:
        frontier.sort()
        nxt = []
        for n in frontier:
            for m, e in sorted(adj.get(n, []), key=lambda pair: pair[0]):
                if m in poses:
                    continue
                if m in warm:
                    poses[m] = warm[m]
                elif m == e.target:
                    poses[m] = poses[n] @ e.pose  # P = A T
                else:
                    poses[m] = poses[n] @ e.pose.inverse()  # A = P T^-1
                nxt.append(m)
        frontier = nxt

    active = {n: p for n, p in poses.items() if n.layer is Layer.ACTIVE}
    passive = {n: p for n, p in poses.items() if n.layer is Layer.PASSIVE}
    return StateVector(active, passive, anchor)


def solve(
    snapshot: GraphSnapshot,
    init: StateVector | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
    cost_tol: float = DEFAULT_COST_TOL,
    step_tol: float = DEFAULT_STEP_TOL,
) -> SolveReport:
    """Damped Gauss-Newton to a SolveReport.

    Nodes without a weighted connection to the anchor are excluded from the
    state and listed in the report. A pure Gauss-Newton step is tried first;
    when the factorization fails or the step raises cost, a Levenberg
    diagonal term is escalated through the damping ladder.
    """
    weighted = _weighted_edges(snapshot)
    anchor = choose_anchor(snapshot, init.anchor if init is not None else None,
                           edges=weighted)
    reachable = _reachable(snapshot, anchor, edges=weighted)
    excluded = tuple(
        sorted(n for n in (*snapshot.active, *snapshot.passive) if n not in reachable)
    )
    if (
        init is not None
        and init.anchor == anchor
        and init.active[anchor].q[0] == 1.0
        and not init.active[anchor].t.any()
        and all(n in init.active or n in init.passive for n in reachable)
    ):
        # previous solution covers every reachable node in this gauge, so
        # the breadth-first chain construction would return it unchanged
        base = init
    else:
        base = initial_state(snapshot, anchor=anchor, previous=init)
    state = StateVector(
        {n: p for n, p in base.active.items() if n in reachable},
        {n: p for n, p in base.passive.items() if n in reachable},
        anchor,
    )
    state.active[anchor] = Pose.identity()
    edges = [e for e in weighted if e.sensor in reachable]
    order = column_order(state)
    cols = {n: 6 * i for i, n in enumerate(order)}

    prob = _Problem(edges, state, order)
    qs, ts = prob.qs, prob.ts
    damping_used = False
    converged = False
    iterations = 0
    h, g, c0 = prob.normal_equations(qs, ts)
    trace = [c0]
    chol_h = None  # factor of the final h, when an exit path leaves one valid
    for _ in range(max_iter):
        step_info, chol0 = _try_step(prob, h, g, qs, ts, c0,
                                     cost_tol * max(c0, 1e-30))
        if step_info is None:
            raise SingularNormalEquations(
                "normal equations singular through damping ladder"
            )
        q1, t1, c1, h1, g1, delta, damped = step_info
        if c1 is None:
            # the quadratic model predicts less gain than the tolerance;
            # take the step but skip the evaluation that would only
            # confirm convergence (H, g, cost_trace stay one step stale)
            qs, ts = q1, t1
            iterations += 1
            converged = True
            chol_h = chol0
            break
        damping_used = damping_used or damped
        iterations += 1
        if c1 > c0:
            # even the most damped step raised cost: accept nothing, stop
            trace.append(c0)
            converged = True
            chol_h = chol0
            break
        qs, ts, h, g = q1, t1, h1, g1
        trace.append(c1)
        small_step = float(np.linalg.norm(delta)) < step_tol
        small_gain = (c0 - c1) <= cost_tol * max(c0, 1e-30)
        c0 = c1
        if small_step or small_gain:
            converged = True
            break

    state = prob.to_state(qs, ts, anchor)
    uncertainties = _uncertainties(h, state, cols, chol=chol_h)
    return SolveReport(
        state=state,
        cost_trace=trace,
        iterations=iterations,
        converged=converged,
        uncertainties=uncertainties,
        excluded=excluded,
        damping_used=damping_used,
    )


def _try_step(prob, h, g, qs, ts, c0, gain_tol):
    """First acceptable step: pure GN, then the damping ladder.

    Returns ((qs, ts, cost, H, g, delta, damped), chol_h) for the best
    candidate, or (None, chol_h) when every factorization failed; chol_h is
    the Cholesky factor of the undamped h when that factorization succeeded.
    A candidate is returned even if it does not reduce cost (the caller
    decides to stop). When the pure GN step's modeled cost gain
    -(2 g.delta + delta.H.delta) is already below gain_tol the step is
    applied but not evaluated and cost/H/g come back as None: the realized
    gain cannot beat the model's, so evaluating would be a wasted
    confirmation pass.

    Ladder candidates are triaged by cost alone; only an accepted one is
    linearized (rejections would throw the Jacobian work away), so a walk
    costs one H,g evaluation no matter how high it climbs."""
    chol_h = None
    last = None
    try:
        chol_h = scipy.linalg.cho_factor(h, check_finite=False)
        delta = scipy.linalg.cho_solve(chol_h, -g, check_finite=False)
        if np.all(np.isfinite(delta)):
            q1, t1 = prob.apply_step(qs, ts, delta)
            predicted = -(2.0 * (g @ delta) + delta @ h @ delta)
            if predicted <= gain_tol:
                return (q1, t1, None, None, None, delta, False), chol_h
            try:
                h1, g1, c1 = prob.normal_equations(q1, t1)
                last = (q1, t1, c1, h1, g1, delta, False)
                if c1 <= c0:
                    return last, chol_h
            except AngleNearPi:
                pass  # candidate landed on the log branch cut; damp
    except scipy.linalg.LinAlgError:
        pass
    for lam in _DAMPING_LADDER:
        hd = h + lam * np.diag(np.diag(h))
        try:
            chol = scipy.linalg.cho_factor(hd, check_finite=False)
        except scipy.linalg.LinAlgError:
            continue
        delta = scipy.linalg.cho_solve(chol, -g, check_finite=False)
        if not np.all(np.isfinite(delta)):
            continue
        q1, t1 = prob.apply_step(qs, ts, delta)
        try:
            c1 = prob.cost_only(q1, t1)
        except AngleNearPi:
            continue
        if c1 <= c0:
            try:
                h1, g1, _ = prob.normal_equations(q1, t1)
            except AngleNearPi:
                continue
            return (q1, t1, c1, h1, g1, delta, True), chol_h
        if last is None or c1 < last[2]:
            # cost went up everywhere so far; the caller stops on a
            # cost-up candidate without touching its H, g
            last = (q1, t1, c1, None, None, delta, True)
    return last, chol_h


def _uncertainties(h, state, cols, chol=None) -> dict[NodeId, np.ndarray]:
    try:
        if chol is None:
            chol = scipy.linalg.cho_factor(h, check_finite=False)
        cov = scipy.linalg.cho_solve(chol, np.eye(h.shape[0]), check_finite=False)
    except scipy.linalg.LinAlgError:
        cov = np.linalg.pinv(h)
    out = {}
    for n in state.passive:
        c = cols[n]
        diag = np.diag(cov)[c : c + 6].copy()
        diag[diag < 0] = 0.0  # numerical floor, marginals are PSD
        diag.setflags(write=False)
        out[n] = diag
    return out


def marginal_uncertainty(report: SolveReport, j: NodeId) -> np.ndarray:
    if j not in report.uncertainties:
        raise UnknownNode(str(j))
    return report.uncertainties[j]
