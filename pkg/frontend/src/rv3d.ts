/** Volume file encoding: one JSON header line, then little-endian f32
 * voxels with x varying fastest. Concatenated blocks form an upload body. */

export type Dims = [number, number, number];
export type VolumeKind = "image" | "prob" | "label";

const MAGIC = "RV3D1";

/** Linear index of (x, y, z) in the x-fastest payload order. */
export function payloadIndex(dims: Dims, x: number, y: number, z: number): number {
  const [nx, ny] = dims;
  return x + nx * (y + ny * z);
}

/** Encode one volume block. `values` must be in x-fastest order. */
export function encodeVolume(kind: VolumeKind, dims: Dims, values: Float32Array): Uint8Array {
  const [nx, ny, nz] = dims;
  if (nx < 1 || ny < 1 || nz < 1) {
    throw new Error(`bad dims ${dims}`);
  }
  if (values.length !== nx * ny * nz) {
    throw new Error(`payload length ${values.length} != ${nx * ny * nz}`);
  }
  const header = JSON.stringify({ magic: MAGIC, dims: [nx, ny, nz], dtype: "f32", kind }) + "\n";
  const head = new TextEncoder().encode(header);
  const out = new Uint8Array(head.length + values.length * 4);
  out.set(head, 0);
  const view = new DataView(out.buffer, head.length);
  for (let i = 0; i < values.length; i++) {
    view.setFloat32(i * 4, values[i], true);
  }
  return out;
}

/** Concatenate volume blocks into one request body. */
export function concatBlocks(blocks: Uint8Array[]): Uint8Array {
  const total = blocks.reduce((n, b) => n + b.length, 0);
  const out = new Uint8Array(total);
  let at = 0;
  for (const b of blocks) {
    out.set(b, at);
    at += b.length;
  }
  return out;
}

/** Constant-valued volume, handy for background-start sessions. */
export function constantVolume(dims: Dims, value: number): Float32Array {
  const [nx, ny, nz] = dims;
  return new Float32Array(nx * ny * nz).fill(value);
}
