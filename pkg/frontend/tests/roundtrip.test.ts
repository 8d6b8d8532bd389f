// @vitest-environment jsdom
/** Scripted browser round trip against a live service process.
 *
 * Spawns the refinement service with a small fixed-seed checkpoint, drives
 * the page exactly as a user would (upload, one object click on a known
 * voxel, one step) and checks both sides of the wire: the click request
 * carries the expected voxel, and the composed overlay changes.
 */
import { spawn, type ChildProcess } from "node:child_process";
import path from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it, vi } from "vitest";

import { createApp, PIXELS_PER_VOXEL } from "../src/app.js";
import { concatBlocks, encodeVolume, type Dims } from "../src/rv3d.js";

let proc: ChildProcess | null = null;
let base = "";

interface Recorded {
  url: string;
  method: string;
  body: string | null;
}

function recordFetch(log: Recorded[]): () => void {
  const real = globalThis.fetch;
  globalThis.fetch = (async (input: RequestInfo | URL, init?: RequestInit) => {
    log.push({
      url: String(input),
      method: init?.method ?? "GET",
      body: typeof init?.body === "string" ? init.body : null,
    });
    return real(input, init);
  }) as typeof fetch;
  return () => {
    globalThis.fetch = real;
  };
}

async function waitForService(url: string): Promise<void> {
  const deadline = Date.now() + 60_000;
  for (;;) {
    try {
      const res = await fetch(url + "/openapi.json");
      if (res.ok) return;
    } catch {
      /* not listening yet */
    }
    if (Date.now() > deadline) throw new Error("service did not come up");
    await new Promise((r) => setTimeout(r, 200));
  }
}

function mountPage(doc: Document, serviceBase: string): void {
  doc.body.innerHTML = `
    <input id="service-url" value="${serviceBase}">
    <input id="dim-x" value="6">
    <input id="dim-y" value="6">
    <input id="dim-z" value="4">
    <button id="load-bg">load</button>
    <canvas id="slice"></canvas>
    <select id="axis">
      <option value="x">x</option>
      <option value="y">y</option>
      <option value="z" selected>z</option>
    </select>
    <input id="slice-index" type="range" value="0">
    <input id="opacity" type="range" value="50">
    <button id="mode-toggle">mode: object</button>
    <button id="step">step</button>
    <canvas id="sparkline" width="120" height="40"></canvas>
    <div id="banner"></div>
    <span id="dice-label"></span>`;
}

beforeAll(async () => {
  const here = path.dirname(fileURLToPath(import.meta.url));
  proc = spawn("python3", [path.join(here, "serve_stub.py")], {
    stdio: ["ignore", "pipe", "inherit"],
  });
  const port = await new Promise<number>((resolve, reject) => {
    let buf = "";
    proc!.stdout!.on("data", (chunk: Buffer) => {
      buf += String(chunk);
      const m = buf.match(/PORT (\d+)/);
      if (m) resolve(Number(m[1]));
    });
    proc!.on("exit", (code) => reject(new Error(`stub server exited early (${code})`)));
    setTimeout(() => reject(new Error("no port line from stub server")), 30_000);
  });
  base = `http://127.0.0.1:${port}`;
  await waitForService(base);
}, 90_000);

afterAll(() => {
  proc?.kill();
});

describe("browser round trip", () => {
  it(
    "uploads a phantom, posts the clicked voxel, and repaints after a step",
    async () => {
      const started = Date.now();
      mountPage(document, base);
      const app = createApp(document);

      // upload: gradient phantom so the grayscale window is non-degenerate
      const dims: Dims = [6, 6, 4];
      const n = dims[0] * dims[1] * dims[2];
      const values = new Float32Array(n);
      for (let i = 0; i < n; i++) values[i] = i / (n - 1);
      await app.openSession(concatBlocks([encodeVolume("image", dims, values)]));

      expect(app.state.sessionId).toBeTruthy();
      expect(app.state.dims).toEqual(dims);
      expect(app.state.axis).toBe("z");
      const indexInput = document.getElementById("slice-index") as HTMLInputElement;
      expect(indexInput.max).toBe("3");

      // move to z slice 1 through the slider, then settle on a known frame
      indexInput.value = "1";
      indexInput.dispatchEvent(new Event("input"));
      await new Promise((r) => setTimeout(r, 300));
      await app.refresh();
      const frameA = app.lastFrame;
      expect(frameA).not.toBeNull();
      expect(frameA!.rows).toBe(6);
      expect(frameA!.cols).toBe(6);

      // one object click aimed at voxel (3, 2, 1): on a z slice the canvas
      // row is x and the column is y
      const px = 2 * PIXELS_PER_VOXEL + 4;
      const py = 3 * PIXELS_PER_VOXEL + 4;
      const log: Recorded[] = [];
      const restore = recordFetch(log);
      await app.clickAtPixel(px, py);
      restore();

      const clicks = log.filter((c) => c.url.includes("/clicks"));
      expect(clicks).toHaveLength(1);
      expect(clicks[0].method).toBe("POST");
      expect(JSON.parse(clicks[0].body!)).toEqual({ x: 3, y: 2, z: 1, label: "object" });

      // the hint tint must show up in the repainted frame at that voxel
      const frameB = app.lastFrame;
      expect(frameB).not.toBe(frameA);
      const at = (3 * 6 + 2) * 4;
      const tinted = [0, 1, 2].some((k) => frameB!.rgba[at + k] !== frameA!.rgba[at + k]);
      expect(tinted).toBe(true);

      // trigger a step from the button; the handler flags progress
      // synchronously and repaints before clearing it
      const stepBtn = document.getElementById("step") as HTMLButtonElement;
      stepBtn.dispatchEvent(new Event("click"));
      expect(app.state.stepping).toBe(true);
      await vi.waitFor(() => expect(app.state.stepping).toBe(false), {
        timeout: 30_000,
        interval: 25,
      });

      const frameC = app.lastFrame;
      expect(frameC).not.toBe(frameB);
      let changed = 0;
      for (let i = 0; i < frameC!.rgba.length; i++) {
        if (frameC!.rgba[i] !== frameB!.rgba[i]) changed++;
      }
      expect(changed).toBeGreaterThan(0);

      // clean run end to end: no error banner, and no dice without truth
      expect(document.getElementById("banner")!.classList.contains("visible")).toBe(false);
      expect(app.state.diceHistory).toEqual([]);
      expect(Date.now() - started).toBeLessThan(120_000);
    },
    120_000,
  );
});
