// Shapes of the operator-bridge payloads and of the derived view model.
// The bridge is the only backend; these mirror its JSON exactly.

export type Vec3 = [number, number, number];

/** Pose on the wire: [tx, ty, tz, qw, qx, qy, qz]. */
export type WirePose = number[];

export interface BridgeEdge {
  sensor: string;
  target: string;
  pose: WirePose;
  t_us: number;
  status: boolean;
  info_diag: number[];
}

export interface BridgeSnapshot {
  active: string[];
  passive: string[];
  edges: BridgeEdge[];
  taken_at_us: number;
}

export interface BridgeReport {
  converged: boolean;
  iterations: number;
  cost: number[];
  anchor: string;
  poses: Record<string, WirePose>;
  uncertainty: Record<string, number[]>;
}

export interface BridgeFrame {
  cycle: number;
  solve_t_us: number;
  snapshot: BridgeSnapshot;
  report: BridgeReport | null;
}

export type IndicatorState = "direct" | "indirect" | "lost";

export type Plane = "xy" | "xz" | "yz";

export type Layer = "active" | "passive";

export type PendingAction =
  | { kind: "add-node"; layer: Layer; name: string }
  | { kind: "remove-node"; layer: Layer; name: string }
  | { kind: "force-anchor"; id: string };

export interface EdgeView {
  sensor: string;
  target: string;
  status: boolean;
}

export interface SensorView {
  name: string;
  position: Vec3 | null;
  isAnchor: boolean;
  pending: boolean;
}

export interface TargetView {
  name: string;
  state: IndicatorState;
  position: Vec3 | null;
  /** Ellipsoid semi-axes in meters: sqrt of the translational variances. */
  ellipsoid: Vec3 | null;
  uncertainty: number[] | null;
  pending: boolean;
}

export interface ViewState {
  empty: boolean;
  cycle: number;
  solveTUs: number;
  sensors: SensorView[];
  targets: TargetView[];
  edges: EdgeView[];
  anchor: string | null;
  converged: boolean | null;
  cost: number | null;
}
