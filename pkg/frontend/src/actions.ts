// REST side of the bridge. Errors come back as {error: "..."} bodies and
// are surfaced verbatim; the caller decides what to revert.

import type { Layer } from "./types.js";

export interface ActionResult {
  ok: boolean;
  status: number;
  error?: string;
}

export interface BridgeClient {
  addNode(name: string, layer: Layer): Promise<ActionResult>;
  removeNode(layer: Layer, name: string): Promise<ActionResult>;
  forceAnchor(id: string): Promise<ActionResult>;
}

type Fetch = typeof fetch;

async function call(
  f: Fetch,
  url: string,
  method: string,
  body?: unknown,
): Promise<ActionResult> {
  try {
    const resp = await f(url, {
      method,
      body: body === undefined ? undefined : JSON.stringify(body),
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
    });
    if (resp.ok) return { ok: true, status: resp.status };
    let error = `http ${resp.status}`;
    try {
      const parsed = (await resp.json()) as { error?: string };
      if (typeof parsed.error === "string") error = parsed.error;
    } catch {
      // non-JSON error body; keep the status text
    }
    return { ok: false, status: resp.status, error };
  } catch (exc) {
    return { ok: false, status: 0, error: String(exc) };
  }
}

export function bridgeClient(base: string, f: Fetch = fetch): BridgeClient {
  const root = base.replace(/\/$/, "");
  return {
    addNode: (name, layer) => call(f, `${root}/nodes`, "POST", { name, layer }),
    removeNode: (layer, name) =>
      call(f, `${root}/nodes/${layer}:${encodeURIComponent(name)}`, "DELETE"),
    forceAnchor: (id) => call(f, `${root}/anchor/${id}`, "POST"),
  };
}
