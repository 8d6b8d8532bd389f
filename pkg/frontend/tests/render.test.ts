import { describe, expect, it } from "vitest";

import type { Axis } from "../src/api.js";
import type { Dims } from "../src/rv3d.js";
import {
  composite,
  intensityWindow,
  mapClick,
  sliceCount,
  sliceShape,
  sparklinePoints,
} from "../src/render.js";

const DIMS: Dims = [4, 5, 6];

describe("slice geometry", () => {
  it("counts slices along each axis", () => {
    expect(sliceCount(DIMS, "x")).toBe(4);
    expect(sliceCount(DIMS, "y")).toBe(5);
    expect(sliceCount(DIMS, "z")).toBe(6);
  });

  it("shapes follow the remaining two axes in order", () => {
    expect(sliceShape(DIMS, "x")).toEqual([5, 6]);
    expect(sliceShape(DIMS, "y")).toEqual([4, 6]);
    expect(sliceShape(DIMS, "z")).toEqual([4, 5]);
  });

  it("maps an in-plane click on a z slice to (row, col, index)", () => {
    expect(mapClick("z", 3, 10, 7)).toEqual({ x: 10, y: 7, z: 3 });
  });

  it("maps clicks on x and y slices", () => {
    expect(mapClick("x", 2, 1, 4)).toEqual({ x: 2, y: 1, z: 4 });
    expect(mapClick("y", 2, 1, 4)).toEqual({ x: 1, y: 2, z: 4 });
  });

  it("keeps every in-plane position inside the volume", () => {
    for (const axis of ["x", "y", "z"] as Axis[]) {
      const [rows, cols] = sliceShape(DIMS, axis);
      const index = sliceCount(DIMS, axis) - 1;
      for (let r = 0; r < rows; r++) {
        for (let c = 0; c < cols; c++) {
          const v = mapClick(axis, index, r, c);
          expect(v.x).toBeGreaterThanOrEqual(0);
          expect(v.y).toBeGreaterThanOrEqual(0);
          expect(v.z).toBeGreaterThanOrEqual(0);
          expect(v.x).toBeLessThan(DIMS[0]);
          expect(v.y).toBeLessThan(DIMS[1]);
          expect(v.z).toBeLessThan(DIMS[2]);
        }
      }
    }
  });
});

describe("intensityWindow", () => {
  it("returns the data range", () => {
    expect(intensityWindow(new Float32Array([-3, 0, 5]))).toEqual({ lo: -3, hi: 5 });
  });

  it("widens a flat slice so division stays finite", () => {
    expect(intensityWindow(new Float32Array([2, 2, 2]))).toEqual({ lo: 1.5, hi: 2.5 });
  });
});

describe("composite", () => {
  const base = { rows: 1, cols: 2, image: new Float32Array([0, 1]) };

  it("renders grayscale with opaque alpha when no overlays are given", () => {
    const rgba = composite({ ...base, overlayOpacity: 1 });
    expect(Array.from(rgba)).toEqual([0, 0, 0, 255, 255, 255, 255, 255]);
  });

  it("paints probability as a red blend scaled by opacity", () => {
    const rgba = composite({
      ...base,
      prob: new Float32Array([1, 0.5]),
      overlayOpacity: 1,
    });
    // p=1 on black -> pure red; p=0.5 on white -> half red blend
    expect(Array.from(rgba.slice(0, 4))).toEqual([255, 0, 0, 255]);
    expect(Array.from(rgba.slice(4, 8))).toEqual([255, 128, 128, 255]);
  });

  it("opacity zero hides the probability layer entirely", () => {
    const rgba = composite({
      ...base,
      prob: new Float32Array([1, 1]),
      overlayOpacity: 0,
    });
    expect(Array.from(rgba)).toEqual([0, 0, 0, 255, 255, 255, 255, 255]);
  });

  it("clamps probability and opacity outside their ranges", () => {
    const wild = composite({
      ...base,
      prob: new Float32Array([7, -3]),
      overlayOpacity: 2.5,
    });
    expect(Array.from(wild.slice(0, 4))).toEqual([255, 0, 0, 255]);
    expect(Array.from(wild.slice(4, 8))).toEqual([255, 255, 255, 255]);
  });

  it("tints object proximity green and background proximity blue", () => {
    const rgba = composite({
      rows: 1,
      cols: 4,
      image: new Float32Array([0, 0, 0, 1]),
      hints: new Float32Array([1, -1, 0.5, 0]),
      overlayOpacity: 1,
    });
    // strength at |h|=1 is (1-0.5)*2*0.6 = 0.6 -> round(255*0.6) = 153
    expect(Array.from(rgba.slice(0, 4))).toEqual([0, 153, 0, 255]);
    expect(Array.from(rgba.slice(4, 8))).toEqual([0, 0, 153, 255]);
    // |h| <= 0.5 leaves the pixel untouched
    expect(Array.from(rgba.slice(8, 12))).toEqual([0, 0, 0, 255]);
    expect(Array.from(rgba.slice(12, 16))).toEqual([255, 255, 255, 255]);
  });

  it("clamps hint magnitudes to one", () => {
    // a flat single-pixel slice windows to mid-gray 128; h=9 tints like h=1
    const rgba = composite({
      rows: 1,
      cols: 1,
      image: new Float32Array([0]),
      hints: new Float32Array([9]),
      overlayOpacity: 1,
    });
    expect(Array.from(rgba)).toEqual([128, 204, 128, 255]);
  });

  it("rejects layers whose size disagrees with the slice", () => {
    expect(() => composite({ ...base, overlayOpacity: 1, prob: new Float32Array(3) })).toThrow(
      /prob/,
    );
    expect(() => composite({ ...base, overlayOpacity: 1, hints: new Float32Array(1) })).toThrow(
      /hints/,
    );
    expect(() =>
      composite({ rows: 2, cols: 2, image: new Float32Array(3), overlayOpacity: 1 }),
    ).toThrow(/image/);
  });
});

describe("sparklinePoints", () => {
  it("handles empty and singleton histories", () => {
    expect(sparklinePoints([], 100, 40)).toEqual([]);
    expect(sparklinePoints([0.25], 100, 40)).toEqual([[0, 30]]);
  });

  it("spaces points evenly and maps dice one to the top edge", () => {
    expect(sparklinePoints([0, 1], 100, 40)).toEqual([
      [0, 40],
      [100, 0],
    ]);
  });

  it("clamps out-of-range dice into the box", () => {
    const pts = sparklinePoints([1.5, -0.5], 60, 40);
    expect(pts).toEqual([
      [0, 0],
      [60, 40],
    ]);
  });
});
