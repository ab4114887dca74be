// View derivation: a pure function of (latest bridge frame, pending
// optimistic actions). Replaying the same frames yields the same views.

import type {
  BridgeFrame,
  BridgeReport,
  IndicatorState,
  PendingAction,
  TargetView,
  Vec3,
  ViewState,
} from "./types.js";

/** Structural check on an incoming frame; returns an error text or null. */
export function validateFrame(x: unknown): string | null {
  if (typeof x !== "object" || x === null) return "frame is not an object";
  const f = x as Record<string, unknown>;
  if (typeof f.cycle !== "number") return "frame.cycle missing";
  if (typeof f.solve_t_us !== "number") return "frame.solve_t_us missing";
  const snap = f.snapshot as Record<string, unknown> | null;
  if (typeof snap !== "object" || snap === null) return "frame.snapshot missing";
  for (const key of ["active", "passive"] as const) {
    const names = snap[key];
    if (!Array.isArray(names) || names.some((n) => typeof n !== "string")) {
      return `snapshot.${key} is not a list of names`;
    }
  }
  if (!Array.isArray(snap.edges)) return "snapshot.edges is not a list";
  for (const e of snap.edges as unknown[]) {
    const edge = e as Record<string, unknown>;
    if (
      typeof edge !== "object" || edge === null ||
      typeof edge.sensor !== "string" || typeof edge.target !== "string" ||
      typeof edge.status !== "boolean" || typeof edge.t_us !== "number" ||
      !Array.isArray(edge.pose) || edge.pose.length !== 7
    ) {
      return "snapshot.edges entry malformed";
    }
  }
  const report = f.report;
  if (report !== null && report !== undefined) {
    const r = report as Record<string, unknown>;
    if (typeof r !== "object") return "frame.report malformed";
    if (typeof r.anchor !== "string") return "report.anchor missing";
    if (typeof r.poses !== "object" || r.poses === null) return "report.poses missing";
    if (typeof r.uncertainty !== "object" || r.uncertainty === null) {
      return "report.uncertainty missing";
    }
  }
  return null;
}

function positionOf(report: BridgeReport | null, id: string): Vec3 | null {
  const wire = report?.poses[id];
  if (!wire || wire.length < 3) return null;
  return [wire[0]!, wire[1]!, wire[2]!];
}

function targetState(
  frame: BridgeFrame,
  name: string,
): { state: IndicatorState; uncertainty: number[] | null } {
  // Operator semantics: green only while every sensor that claims the
  // target actually sees it; one blocked view (or none at all) means some
  // consumer is being served a completed pose, which is the yellow case;
  // no solved pose at all is a loss.
  const id = `passive:${name}`;
  const report = frame.report;
  if (!report || !(id in report.poses)) return { state: "lost", uncertainty: null };
  const uncertainty = report.uncertainty[id] ?? null;
  const edges = frame.snapshot.edges.filter((e) => e.target === name);
  const direct = edges.length > 0 && edges.every((e) => e.status);
  return { state: direct ? "direct" : "indirect", uncertainty };
}

function ellipsoidAxes(uncertainty: number[] | null): Vec3 | null {
  if (!uncertainty || uncertainty.length < 3) return null;
  return [
    Math.sqrt(Math.max(uncertainty[0]!, 0)),
    Math.sqrt(Math.max(uncertainty[1]!, 0)),
    Math.sqrt(Math.max(uncertainty[2]!, 0)),
  ];
}

export function deriveViewState(
  frame: BridgeFrame | null,
  pending: readonly PendingAction[],
): ViewState {
  const removed = new Set(
    pending
      .filter((p) => p.kind === "remove-node")
      .map((p) => `${(p as { layer: string }).layer}:${(p as { name: string }).name}`),
  );
  const added = pending.filter((p) => p.kind === "add-node") as Extract<
    PendingAction,
    { kind: "add-node" }
  >[];
  const anchorOverride = pending.find((p) => p.kind === "force-anchor") as
    | Extract<PendingAction, { kind: "force-anchor" }>
    | undefined;

  const report = frame?.report ?? null;
  const anchor = anchorOverride?.id ?? report?.anchor ?? null;

  const sensors = (frame?.snapshot.active ?? [])
    .filter((name) => !removed.has(`active:${name}`))
    .map((name) => ({
      name,
      position: positionOf(report, `active:${name}`),
      isAnchor: anchor === `active:${name}`,
      pending: false,
    }));
  for (const p of added) {
    if (p.layer === "active" && !sensors.some((s) => s.name === p.name)) {
      sensors.push({ name: p.name, position: null, isAnchor: false, pending: true });
    }
  }

  const targets: TargetView[] = (frame?.snapshot.passive ?? [])
    .filter((name) => !removed.has(`passive:${name}`))
    .map((name) => {
      const { state, uncertainty } = targetState(frame!, name);
      return {
        name,
        state,
        position: positionOf(report, `passive:${name}`),
        ellipsoid: state === "indirect" ? ellipsoidAxes(uncertainty) : null,
        uncertainty,
        pending: false,
      };
    });
  for (const p of added) {
    if (p.layer === "passive" && !targets.some((t) => t.name === p.name)) {
      targets.push({
        name: p.name,
        state: "lost",
        position: null,
        ellipsoid: null,
        uncertainty: null,
        pending: true,
      });
    }
  }

  const edges = (frame?.snapshot.edges ?? [])
    .filter(
      (e) => !removed.has(`active:${e.sensor}`) && !removed.has(`passive:${e.target}`),
    )
    .map((e) => ({ sensor: e.sensor, target: e.target, status: e.status }));

  const costTrace = report?.cost ?? [];
  return {
    empty: sensors.length === 0 && targets.length === 0 && edges.length === 0,
    cycle: frame?.cycle ?? 0,
    solveTUs: frame?.solve_t_us ?? 0,
    sensors,
    targets,
    edges,
    anchor,
    converged: report?.converged ?? null,
    cost: costTrace.length ? costTrace[costTrace.length - 1]! : null,
  };
}
