import type { BridgeEdge, BridgeFrame, WirePose } from "../src/types.js";

export const IDENTITY: WirePose = [0, 0, 0, 1, 0, 0, 0];

export function edge(
  sensor: string,
  target: string,
  status = true,
  t_us = 1_000_000,
): BridgeEdge {
  return { sensor, target, pose: IDENTITY, t_us, status, info_diag: [1, 1, 1, 1, 1, 1] };
}

export interface FrameSpec {
  sensors?: string[];
  targets?: string[];
  edges?: BridgeEdge[];
  poses?: Record<string, WirePose>;
  uncertainty?: Record<string, number[]>;
  anchor?: string;
  report?: null;
  cycle?: number;
}

export function frame(spec: FrameSpec): BridgeFrame {
  const sensors = spec.sensors ?? ["s1"];
  const targets = spec.targets ?? ["p1"];
  const snapshot = {
    active: sensors,
    passive: targets,
    edges: spec.edges ?? [],
    taken_at_us: 1_000_000,
  };
  if (spec.report === null) {
    return { cycle: spec.cycle ?? 0, solve_t_us: 0, snapshot, report: null };
  }
  const poses: Record<string, WirePose> = spec.poses ?? {};
  if (spec.poses === undefined) {
    for (const s of sensors) poses[`active:${s}`] = IDENTITY;
    for (const t of targets) poses[`passive:${t}`] = IDENTITY;
  }
  const uncertainty: Record<string, number[]> = spec.uncertainty ?? {};
  if (spec.uncertainty === undefined) {
    for (const id of Object.keys(poses)) uncertainty[id] = [1e-6, 1e-6, 1e-6, 1e-7, 1e-7, 1e-7];
  }
  return {
    cycle: spec.cycle ?? 1,
    solve_t_us: 1_000_000,
    snapshot,
    report: {
      converged: true,
      iterations: 3,
      cost: [1.0, 1e-9],
      anchor: spec.anchor ?? `active:${sensors[0]}`,
      poses,
      uncertainty,
    },
  };
}
