// Browser wiring: store + stream + controls. Bridge writes happen only in
// gesture handlers; nothing here fires a request on its own.

import { bridgeClient } from "./actions.js";
import { renderSvg, renderTargetTable } from "./render.js";
import { connectStream } from "./sse.js";
import { createStore, view } from "./store.js";
import type { Layer, PendingAction, Plane } from "./types.js";

function bridgeBase(): string {
  const param = new URLSearchParams(window.location.search).get("bridge");
  return param ?? "http://127.0.0.1:7801";
}

export function boot(root: HTMLElement): void {
  const base = bridgeBase();
  const client = bridgeClient(base);
  const store = createStore();

  const run = (action: PendingAction, send: () => Promise<{ ok: boolean; error?: string }>) => {
    store.dispatch({ kind: "begin", action });
    void send().then((res) =>
      store.dispatch({ kind: "settle", action, ok: res.ok, error: res.error }),
    );
  };

  const render = () => {
    const s = store.state();
    const v = view(s);
    const conn = s.connected ? "live" : "reconnecting";
    root.innerHTML = `
      <div class="topbar">
        <span class="conn conn-${conn}">${conn}</span>
        <span class="planes">
          ${(["xy", "xz", "yz"] as Plane[])
            .map(
              (p) =>
                `<button data-plane="${p}" class="${p === s.plane ? "on" : ""}">${p}</button>`,
            )
            .join("")}
        </span>
        <form class="add-form">
          <input name="name" placeholder="node name" required>
          <select name="layer"><option>passive</option><option>active</option></select>
          <button type="submit">add</button>
        </form>
      </div>
      ${s.banner ? `<div class="banner">${s.banner} <button class="dismiss">x</button></div>` : ""}
      <div class="columns">
        <div class="scene-holder">${renderSvg(v, s.plane)}</div>
        <div class="side">
          ${renderTargetTable(v)}
          <ul class="nodes">
            ${v.sensors
              .map(
                (n) =>
                  `<li>${n.name} (sensor)${n.isAnchor ? " [anchor]" : ""}
                   <button data-remove="active:${n.name}">remove</button>
                   <button data-anchor="active:${n.name}">anchor</button></li>`,
              )
              .join("")}
            ${v.targets
              .map(
                (n) =>
                  `<li>${n.name} (target)
                   <button data-remove="passive:${n.name}">remove</button></li>`,
              )
              .join("")}
          </ul>
        </div>
      </div>`;

    root.querySelectorAll<HTMLButtonElement>("[data-plane]").forEach((btn) =>
      btn.addEventListener("click", () =>
        store.dispatch({ kind: "plane", plane: btn.dataset.plane as Plane }),
      ),
    );
    root.querySelector(".dismiss")?.addEventListener("click", () =>
      store.dispatch({ kind: "dismiss-banner" }),
    );
    root.querySelector<HTMLFormElement>(".add-form")?.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const data = new FormData(ev.target as HTMLFormElement);
      const name = String(data.get("name") ?? "").trim();
      const layer = String(data.get("layer") ?? "passive") as Layer;
      if (!name) return;
      run({ kind: "add-node", layer, name }, () => client.addNode(name, layer));
    });
    root.querySelectorAll<HTMLButtonElement>("[data-remove]").forEach((btn) =>
      btn.addEventListener("click", () => {
        const [layer, name] = btn.dataset.remove!.split(":") as [Layer, string];
        run({ kind: "remove-node", layer, name }, () => client.removeNode(layer, name));
      }),
    );
    root.querySelectorAll<HTMLButtonElement>("[data-anchor]").forEach((btn) =>
      btn.addEventListener("click", () => {
        const id = btn.dataset.anchor!;
        run({ kind: "force-anchor", id }, () => client.forceAnchor(id));
      }),
    );
  };

  store.subscribe(render);
  render();

  connectStream(
    `${base}/stream`,
    (payload) => {
      let parsed: unknown;
      try {
        parsed = JSON.parse(payload);
      } catch {
        store.dispatch({ kind: "frame", frame: payload }); // banner path
        return;
      }
      store.dispatch({ kind: "frame", frame: parsed });
    },
    (connected) => store.dispatch({ kind: "status", connected }),
  );
}

const rootEl = typeof document !== "undefined" ? document.getElementById("app") : null;
if (rootEl) boot(rootEl);
