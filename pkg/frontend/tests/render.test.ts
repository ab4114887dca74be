import { describe, expect, it } from "vitest";

import { deriveViewState } from "../src/derive.js";
import { COLORS, ELLIPSOID_SCALE, project, renderSvg } from "../src/render.js";
import type { Vec3 } from "../src/types.js";
import { edge, frame, IDENTITY } from "./helpers.js";

describe("project", () => {
  it("selects the axis pair for each plane", () => {
    const v: Vec3 = [1, 2, 3];
    expect(project(v, "xy")).toEqual([1, 2]);
    expect(project(v, "xz")).toEqual([1, 3]);
    expect(project(v, "yz")).toEqual([2, 3]);
  });
});

describe("renderSvg", () => {
  it("draws the empty state", () => {
    const svg = renderSvg(deriveViewState(null, []), "xy");
    expect(svg).toContain("empty-state");
  });

  it("colors targets by indicator state", () => {
    const f = frame({
      sensors: ["s1", "s2"],
      targets: ["p1", "p2", "p3"],
      edges: [edge("s1", "p1"), edge("s2", "p1"), edge("s1", "p2", false), edge("s2", "p2")],
      poses: {
        "active:s1": IDENTITY,
        "active:s2": IDENTITY,
        "passive:p1": IDENTITY,
        "passive:p2": IDENTITY,
      },
    });
    const svg = renderSvg(deriveViewState(f, []), "xy");
    expect(svg).toContain(`fill="${COLORS.direct}"`);
    expect(svg).toContain(`fill="${COLORS.indirect}"`);
    expect(svg).toContain(`fill="${COLORS.lost}"`);
    expect(svg).toContain("stroke-dasharray"); // the blocked edge is dashed
  });

  it("sizes the ellipse proportionally to sqrt variance", () => {
    const f = frame({
      sensors: ["s1", "s2"],
      targets: ["p1"],
      edges: [edge("s1", "p1", false), edge("s2", "p1")],
      uncertainty: { "passive:p1": [4e-6, 1e-6, 1e-6, 0, 0, 0] },
    });
    const svg = renderSvg(deriveViewState(f, []), "xy");
    const m = /rx="([\d.]+)" ry="([\d.]+)"/.exec(svg);
    expect(m).not.toBeNull();
    const rx = parseFloat(m![1]!);
    const ry = parseFloat(m![2]!);
    expect(rx / ry).toBeCloseTo(2.0, 3); // sqrt(4e-6)/sqrt(1e-6)
    expect(rx).toBeCloseTo(Math.sqrt(4e-6) * ELLIPSOID_SCALE, 2);
  });

  it("moves nodes when the projection plane changes", () => {
    const f = frame({
      sensors: ["s1"],
      targets: ["p1"],
      edges: [edge("s1", "p1")],
      poses: { "active:s1": IDENTITY, "passive:p1": [0.5, 0, 0.25, 1, 0, 0, 0] },
    });
    const xy = renderSvg(deriveViewState(f, []), "xy");
    const xz = renderSvg(deriveViewState(f, []), "xz");
    expect(xy).not.toEqual(xz);
  });

  it("escapes markup in node names", () => {
    const f = frame({ sensors: ["s<1>"], targets: [], report: null });
    const svg = renderSvg(deriveViewState(f, []), "xy");
    expect(svg).toContain("s&lt;1&gt;");
    expect(svg).not.toContain("s<1>");
  });

  it("is a pure function of the view", () => {
    const f = frame({ sensors: ["s1", "s2"], targets: ["p1", "p2"] });
    const v = deriveViewState(f, []);
    expect(renderSvg(v, "xy")).toEqual(renderSvg(v, "xy"));
  });
});
