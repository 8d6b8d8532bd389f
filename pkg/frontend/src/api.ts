/** Typed fetch client for the refinement service. The service is the
 * single source of truth: this module never caches or mutates volume
 * data, it only moves bytes and JSON. */

import type { Dims } from "./rv3d.js";

export type Axis = "x" | "y" | "z";
export type Layer = "image" | "prob" | "binarized" | "hints";
export type ClickLabel = "object" | "background";

export interface SessionCreated {
  id: string;
  dims: Dims;
  has_truth: boolean;
}

export interface ClickSummary {
  object: number;
  background: number;
}

export interface StepResult {
  step: number;
  dims: Dims;
  dice: number | null;
}

export interface SliceData {
  rows: number;
  cols: number;
  data: Float32Array;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function raise(res: Response): Promise<never> {
  let code = "UNKNOWN";
  let message = `HTTP ${res.status}`;
  try {
    const body = await res.json();
    if (typeof body.code === "string") code = body.code;
    if (typeof body.message === "string") message = body.message;
  } catch {
    /* non-JSON error body; keep the fallback */
  }
  throw new ApiError(res.status, code, message);
}

export class Client {
  constructor(readonly base: string) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, "") + path;
  }

  async createSession(body: Uint8Array): Promise<SessionCreated> {
    const res = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body: body as unknown as BodyInit,
    });
    if (!res.ok) await raise(res);
    return res.json();
  }

  async addClick(
    id: string,
    voxel: { x: number; y: number; z: number },
    label: ClickLabel,
  ): Promise<ClickSummary> {
    const res = await fetch(this.url(`/sessions/${id}/clicks`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ ...voxel, label }),
    });
    if (!res.ok) await raise(res);
    return res.json();
  }

  async step(id: string): Promise<StepResult> {
    const res = await fetch(this.url(`/sessions/${id}/step`), { method: "POST" });
    if (!res.ok) await raise(res);
    return res.json();
  }

  async fetchSlice(id: string, axis: Axis, index: number, layer: Layer): Promise<SliceData> {
    const res = await fetch(
      this.url(`/sessions/${id}/slices?axis=${axis}&index=${index}&layer=${layer}`),
    );
    if (!res.ok) await raise(res);
    const shape = res.headers.get("X-Shape");
    if (!shape) throw new ApiError(res.status, "NO_SHAPE", "missing X-Shape header");
    const [rows, cols] = shape.split(",").map(Number);
    const buf = await res.arrayBuffer();
    if (buf.byteLength !== rows * cols * 4) {
      throw new ApiError(res.status, "BAD_PAYLOAD", `expected ${rows * cols * 4} bytes, got ${buf.byteLength}`);
    }
    return { rows, cols, data: new Float32Array(buf) };
  }

  async deleteSession(id: string): Promise<void> {
    const res = await fetch(this.url(`/sessions/${id}`), { method: "DELETE" });
    if (!res.ok && res.status !== 404) await raise(res);
  }
}
