/** Pure pixel math for the slice viewer: no DOM, no fetch, fully testable.
 *
 * Slice layout follows the service: a slice is a (rows, cols) array in
 * row-major order; canvas x = column, canvas y = row.
 */

import type { Dims } from "./rv3d.js";
import type { Axis } from "./api.js";

export interface Voxel {
  x: number;
  y: number;
  z: number;
}

/** Number of slices along an axis. */
export function sliceCount(dims: Dims, axis: Axis): number {
  return axis === "x" ? dims[0] : axis === "y" ? dims[1] : dims[2];
}

/** Map an in-plane (row, col) position on a slice back to the voxel.
 * Mirrors the service's slicing: axis x -> (index, row, col),
 * axis y -> (row, index, col), axis z -> (row, col, index). */
export function mapClick(axis: Axis, index: number, row: number, col: number): Voxel {
  if (axis === "x") return { x: index, y: row, z: col };
  if (axis === "y") return { x: row, y: index, z: col };
  return { x: row, y: col, z: index };
}

/** In-plane (rows, cols) shape of a slice for the given axis. */
export function sliceShape(dims: Dims, axis: Axis): [number, number] {
  if (axis === "x") return [dims[1], dims[2]];
  if (axis === "y") return [dims[0], dims[2]];
  return [dims[0], dims[1]];
}

/** Robust display window for an intensity slice. */
export function intensityWindow(slice: Float32Array): { lo: number; hi: number } {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of slice) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!(hi > lo)) {
    return { lo: lo - 0.5, hi: lo + 0.5 };
  }
  return { lo, hi };
}

export interface CompositeInput {
  rows: number;
  cols: number;
  image: Float32Array;
  /** probability layer, values clamped to [0,1] for display */
  prob?: Float32Array;
  /** signed hint field: positive near object clicks, negative near background clicks */
  hints?: Float32Array;
  overlayOpacity: number;
}

/** Compose one RGBA buffer: grayscale image, red probability overlay,
 * green/blue tint for object/background hint neighborhoods. */
export function composite(input: CompositeInput): Uint8ClampedArray {
  const { rows, cols, image, prob, hints } = input;
  const n = rows * cols;
  if (image.length !== n) throw new Error("image slice size mismatch");
  if (prob && prob.length !== n) throw new Error("prob slice size mismatch");
  if (hints && hints.length !== n) throw new Error("hints slice size mismatch");
  const opacity = Math.min(1, Math.max(0, input.overlayOpacity));
  const { lo, hi } = intensityWindow(image);
  const span = hi - lo;
  const out = new Uint8ClampedArray(n * 4);
  for (let i = 0; i < n; i++) {
    const g = Math.round(((image[i] - lo) / span) * 255);
    let r = g;
    let gr = g;
    let b = g;
    if (prob) {
      const p = Math.min(1, Math.max(0, prob[i])) * opacity;
      r = Math.round(r * (1 - p) + 255 * p);
      gr = Math.round(gr * (1 - p));
      b = Math.round(b * (1 - p));
    }
    if (hints) {
      const h = Math.min(1, Math.max(-1, hints[i]));
      // the field peaks at +-1 on a click and decays outward; only strong proximity tints
      const strength = Math.max(0, Math.abs(h) - 0.5) * 2 * 0.6;
      if (strength > 0) {
        if (h > 0) gr = Math.round(gr * (1 - strength) + 255 * strength);
        else b = Math.round(b * (1 - strength) + 255 * strength);
      }
    }
    out[i * 4] = r;
    out[i * 4 + 1] = gr;
    out[i * 4 + 2] = b;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Polyline points for a dice-per-step sparkline in a w x h box. */
export function sparklinePoints(history: number[], w: number, h: number): Array<[number, number]> {
  if (history.length === 0) return [];
  if (history.length === 1) return [[0, h - history[0] * h]];
  const dx = w / (history.length - 1);
  return history.map((d, i) => {
    const clamped = Math.min(1, Math.max(0, d));
    return [i * dx, h - clamped * h] as [number, number];
  });
}
