// One store, one reducer; every state change flows through dispatch, so
// network callbacks and UI gestures stay serialized.

import { deriveViewState, validateFrame } from "./derive.js";
import type { BridgeFrame, PendingAction, Plane, ViewState } from "./types.js";

export interface AppState {
  frame: BridgeFrame | null;
  connected: boolean;
  pending: PendingAction[];
  banner: string | null;
  plane: Plane;
}

export const initialState: AppState = {
  frame: null,
  connected: false,
  pending: [],
  banner: null,
  plane: "xy",
};

export type Msg =
  | { kind: "frame"; frame: unknown }
  | { kind: "status"; connected: boolean }
  | { kind: "begin"; action: PendingAction }
  | { kind: "settle"; action: PendingAction; ok: boolean; error?: string }
  | { kind: "plane"; plane: Plane }
  | { kind: "dismiss-banner" };

function sameAction(a: PendingAction, b: PendingAction): boolean {
  return JSON.stringify(a) === JSON.stringify(b);
}

/** True once the server's own state reflects the optimistic action. */
function confirmed(p: PendingAction, frame: BridgeFrame): boolean {
  switch (p.kind) {
    case "add-node":
      return frame.snapshot[p.layer].includes(p.name);
    case "remove-node":
      return !frame.snapshot[p.layer].includes(p.name);
    case "force-anchor":
      return frame.report?.anchor === p.id;
  }
}

export function reduce(state: AppState, msg: Msg): AppState {
  switch (msg.kind) {
    case "frame": {
      const problem = validateFrame(msg.frame);
      if (problem !== null) {
        // keep the last good frame on schema mismatch, surface the reason
        return { ...state, banner: `bad frame ignored: ${problem}` };
      }
      const frame = msg.frame as BridgeFrame;
      return {
        ...state,
        frame,
        pending: state.pending.filter((p) => !confirmed(p, frame)),
      };
    }
    case "status":
      return { ...state, connected: msg.connected };
    case "begin":
      return { ...state, pending: [...state.pending, msg.action] };
    case "settle":
      if (msg.ok) return state; // retired when a frame confirms it
      return {
        ...state,
        pending: state.pending.filter((p) => !sameAction(p, msg.action)),
        banner: msg.error ?? "action failed",
      };
    case "plane":
      return { ...state, plane: msg.plane };
    case "dismiss-banner":
      return { ...state, banner: null };
  }
}

export function view(state: AppState): ViewState {
  return deriveViewState(state.frame, state.pending);
}

export interface Store {
  state(): AppState;
  dispatch(msg: Msg): void;
  subscribe(fn: (s: AppState) => void): void;
}

export function createStore(initial: AppState = initialState): Store {
  let state = initial;
  const listeners: Array<(s: AppState) => void> = [];
  return {
    state: () => state,
    dispatch(msg) {
      state = reduce(state, msg);
      for (const fn of listeners) fn(state);
    },
    subscribe(fn) {
      listeners.push(fn);
    },
  };
}
