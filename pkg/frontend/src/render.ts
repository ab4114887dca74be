// Scene rendering as pure SVG markup: same view in, same markup out.
// 2D orthographic projection with a selectable axis pair; no 3D.

import type { Plane, Vec3, ViewState } from "./types.js";

export const COLORS = {
  direct: "#2e7d32",
  indirect: "#f9a825",
  lost: "#c62828",
  sensor: "#37474f",
  edgeUp: "#78909c",
  edgeDown: "#c62828",
} as const;

/** px per meter for node layout. */
export const SCALE = 140;
/** Extra magnification for ellipsoid axes; raw sigmas are millimetric. */
export const ELLIPSOID_SCALE = SCALE * 250;

const AXES: Record<Plane, [number, number]> = { xy: [0, 1], xz: [0, 2], yz: [1, 2] };

export function project(v: Vec3, plane: Plane): [number, number] {
  const [i, j] = AXES[plane];
  return [v[i]!, v[j]!];
}

function esc(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

function toPx(
  v: Vec3,
  plane: Plane,
  width: number,
  height: number,
): [number, number] {
  const [a, b] = project(v, plane);
  // screen y grows downward; world second axis grows upward
  return [width / 2 + a * SCALE, height / 2 - b * SCALE];
}

export function renderSvg(
  view: ViewState,
  plane: Plane,
  width = 720,
  height = 520,
): string {
  const parts: string[] = [
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `viewBox="0 0 ${width} ${height}" class="scene">`,
  ];
  if (view.empty) {
    parts.push(
      `<text x="${width / 2}" y="${height / 2}" text-anchor="middle" ` +
        `class="empty-state">no scene yet: waiting for sensors</text>`,
      "</svg>",
    );
    return parts.join("");
  }

  const spots = new Map<string, [number, number]>();
  let shelf = 0; // deterministic slots for nodes without a solved position
  const place = (id: string, pos: Vec3 | null): [number, number] => {
    const found = spots.get(id);
    if (found) return found;
    const px: [number, number] =
      pos !== null ? toPx(pos, plane, width, height) : [width - 70, 30 + 26 * shelf++];
    spots.set(id, px);
    return px;
  };

  for (const s of view.sensors) place(`active:${s.name}`, s.position);
  for (const t of view.targets) place(`passive:${t.name}`, t.position);

  for (const e of view.edges) {
    const [x1, y1] = spots.get(`active:${e.sensor}`)!;
    const [x2, y2] = spots.get(`passive:${e.target}`)!;
    const stroke = e.status ? COLORS.edgeUp : COLORS.edgeDown;
    const dash = e.status ? "" : ' stroke-dasharray="6 4"';
    parts.push(
      `<line x1="${x1.toFixed(1)}" y1="${y1.toFixed(1)}" x2="${x2.toFixed(1)}" ` +
        `y2="${y2.toFixed(1)}" stroke="${stroke}" stroke-width="1.5"${dash}/>`,
    );
  }

  for (const s of view.sensors) {
    const [x, y] = spots.get(`active:${s.name}`)!;
    const ring = s.isAnchor
      ? `<circle cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" r="14" fill="none" ` +
        `stroke="${COLORS.sensor}" stroke-width="1.5"/>`
      : "";
    const opacity = s.pending ? ' opacity="0.5"' : "";
    parts.push(
      `${ring}<rect x="${(x - 8).toFixed(1)}" y="${(y - 8).toFixed(1)}" width="16" ` +
        `height="16" fill="${COLORS.sensor}"${opacity}/>` +
        `<text x="${x.toFixed(1)}" y="${(y - 14).toFixed(1)}" text-anchor="middle" ` +
        `class="label">${esc(s.name)}</text>`,
    );
  }

  for (const t of view.targets) {
    const [x, y] = spots.get(`passive:${t.name}`)!;
    const opacity = t.pending ? ' opacity="0.5"' : "";
    if (t.state === "indirect" && t.ellipsoid) {
      const [rx, ry] = project(t.ellipsoid, plane);
      parts.push(
        `<ellipse cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" ` +
          `rx="${(rx * ELLIPSOID_SCALE).toFixed(2)}" ` +
          `ry="${(ry * ELLIPSOID_SCALE).toFixed(2)}" fill="${COLORS.indirect}" ` +
          `fill-opacity="0.25" stroke="${COLORS.indirect}"/>`,
      );
    }
    parts.push(
      `<circle cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" r="7" ` +
        `fill="${COLORS[t.state]}"${opacity}/>` +
        `<text x="${x.toFixed(1)}" y="${(y + 20).toFixed(1)}" text-anchor="middle" ` +
        `class="label">${esc(t.name)}</text>`,
    );
  }

  const cost = view.cost === null ? "-" : view.cost.toExponential(2);
  parts.push(
    `<text x="8" y="${height - 10}" class="hud">cycle ${view.cycle} | ` +
      `solve_t ${(view.solveTUs / 1e6).toFixed(2)}s | cost ${cost} | ` +
      `anchor ${esc(view.anchor ?? "-")}</text>`,
    "</svg>",
  );
  return parts.join("");
}

/** Side table with one row per target: name, state, position, sigma. */
export function renderTargetTable(view: ViewState): string {
  const rows = view.targets.map((t) => {
    const pos = t.position
      ? t.position.map((v) => v.toFixed(3)).join(", ")
      : "-";
    const sigma = t.ellipsoid
      ? t.ellipsoid.map((v) => (v * 1e3).toFixed(2)).join(" / ") + " mm"
      : "-";
    return (
      `<tr class="state-${t.state}"><td>${esc(t.name)}</td><td>${t.state}</td>` +
      `<td>${pos}</td><td>${sigma}</td></tr>`
    );
  });
  return (
    "<table><thead><tr><th>target</th><th>state</th><th>position</th>" +
    "<th>sigma</th></tr></thead><tbody>" +
    rows.join("") +
    "</tbody></table>"
  );
}
