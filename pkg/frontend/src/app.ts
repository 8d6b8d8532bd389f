/** DOM wiring for the slice annotator. All pixel math and protocol code
 * lives in render.ts / api.ts / rv3d.ts; this module binds them to the
 * page. createApp is exported so tests can drive the UI on a jsdom page
 * against a real service. */

import { Client, ApiError, type Axis, type ClickLabel, type SliceData } from "./api.js";
import { concatBlocks, constantVolume, encodeVolume, type Dims } from "./rv3d.js";
import {
  composite,
  mapClick,
  sliceCount,
  sliceShape,
  sparklinePoints,
} from "./render.js";

export const PIXELS_PER_VOXEL = 8;

export interface ViewState {
  sessionId: string | null;
  dims: Dims;
  hasTruth: boolean;
  axis: Axis;
  index: number;
  overlayOpacity: number;
  mode: ClickLabel;
  diceHistory: number[];
  stepping: boolean;
}

export interface Frame {
  rgba: Uint8ClampedArray;
  rows: number;
  cols: number;
}

interface Elements {
  serviceUrl: HTMLInputElement;
  dimX: HTMLInputElement;
  dimY: HTMLInputElement;
  dimZ: HTMLInputElement;
  loadBg: HTMLButtonElement;
  slice: HTMLCanvasElement;
  axis: HTMLSelectElement;
  index: HTMLInputElement;
  opacity: HTMLInputElement;
  modeToggle: HTMLButtonElement;
  stepBtn: HTMLButtonElement;
  sparkline: HTMLCanvasElement;
  banner: HTMLElement;
  diceLabel: HTMLElement;
}

function grab(doc: Document): Elements {
  const byId = <T extends HTMLElement>(id: string): T => {
    const el = doc.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el as T;
  };
  return {
    serviceUrl: byId("service-url"),
    dimX: byId("dim-x"),
    dimY: byId("dim-y"),
    dimZ: byId("dim-z"),
    loadBg: byId("load-bg"),
    slice: byId("slice"),
    axis: byId("axis"),
    index: byId("slice-index"),
    opacity: byId("opacity"),
    modeToggle: byId("mode-toggle"),
    stepBtn: byId("step"),
    sparkline: byId("sparkline"),
    banner: byId("banner"),
    diceLabel: byId("dice-label"),
  };
}

export class App {
  readonly state: ViewState = {
    sessionId: null,
    dims: [1, 1, 1],
    hasTruth: false,
    axis: "z",
    index: 0,
    overlayOpacity: 0.5,
    mode: "object",
    diceHistory: [],
    stepping: false,
  };

  /** Last composed frame, kept for tests and for contexts jsdom lacks. */
  lastFrame: Frame | null = null;

  private readonly el: Elements;
  private client: Client;

  constructor(
    doc: Document,
    clientFactory: (base: string) => Client = (base) => new Client(base),
  ) {
    this.el = grab(doc);
    this.makeClient = clientFactory;
    this.client = clientFactory(this.el.serviceUrl.value || "http://127.0.0.1:8000");
    this.bind();
  }

  private makeClient: (base: string) => Client;

  private bind(): void {
    this.el.loadBg.addEventListener("click", () => void this.loadBackgroundStart());
    this.el.slice.addEventListener("click", (ev) => {
      const e = ev as MouseEvent;
      void this.clickAtPixel(e.offsetX, e.offsetY);
    });
    this.el.axis.addEventListener("change", () => {
      this.state.axis = this.el.axis.value as Axis;
      this.state.index = 0;
      this.el.index.value = "0";
      void this.refresh();
    });
    this.el.index.addEventListener("input", () => {
      this.state.index = Number(this.el.index.value);
      void this.refresh();
    });
    this.el.opacity.addEventListener("input", () => {
      this.state.overlayOpacity = Number(this.el.opacity.value) / 100;
      void this.refresh();
    });
    this.el.modeToggle.addEventListener("click", () => {
      this.state.mode = this.state.mode === "object" ? "background" : "object";
      this.el.modeToggle.textContent = `mode: ${this.state.mode}`;
    });
    this.el.stepBtn.addEventListener("click", () => void this.stepOnce());
  }

  private showError(message: string): void {
    this.el.banner.textContent = message;
    this.el.banner.classList.add("visible");
  }

  private clearError(): void {
    this.el.banner.textContent = "";
    this.el.banner.classList.remove("visible");
  }

  /** Start a session from an all-background probability map. */
  async loadBackgroundStart(): Promise<void> {
    const dims: Dims = [
      Number(this.el.dimX.value),
      Number(this.el.dimY.value),
      Number(this.el.dimZ.value),
    ];
    const image = encodeVolume("image", dims, constantVolume(dims, 0));
    await this.openSession(concatBlocks([image]));
  }

  /** Start a session from already-encoded volume blocks. */
  async openSession(body: Uint8Array): Promise<void> {
    try {
      this.client = this.makeClient(this.el.serviceUrl.value || "http://127.0.0.1:8000");
      const created = await this.client.createSession(body);
      this.state.sessionId = created.id;
      this.state.dims = created.dims;
      this.state.hasTruth = created.has_truth;
      this.state.index = 0;
      this.state.diceHistory = [];
      this.el.index.value = "0";
      this.el.index.max = String(sliceCount(this.state.dims, this.state.axis) - 1);
      this.clearError();
      await this.refresh();
    } catch (err) {
      this.showError(err instanceof Error ? err.message : String(err));
    }
  }

  /** Map a canvas pixel to a voxel and send the click; ignores misses. */
  async clickAtPixel(px: number, py: number): Promise<void> {
    if (!this.state.sessionId) return;
    const [rows, cols] = sliceShape(this.state.dims, this.state.axis);
    const row = Math.floor(py / PIXELS_PER_VOXEL);
    const col = Math.floor(px / PIXELS_PER_VOXEL);
    if (row < 0 || row >= rows || col < 0 || col >= cols) return;
    const voxel = mapClick(this.state.axis, this.state.index, row, col);
    try {
      await this.client.addClick(this.state.sessionId, voxel, this.state.mode);
      this.clearError();
      await this.refresh();
    } catch (err) {
      this.showError(err instanceof Error ? err.message : String(err));
    }
  }

  /** Run one refinement step; the button is disabled while in flight. */
  async stepOnce(): Promise<void> {
    if (!this.state.sessionId || this.state.stepping) return;
    this.state.stepping = true;
    this.el.stepBtn.disabled = true;
    try {
      const result = await this.client.step(this.state.sessionId);
      if (result.dice !== null) {
        this.state.diceHistory.push(result.dice);
        this.el.diceLabel.textContent = `dice ${result.dice.toFixed(3)}`;
        this.drawSparkline();
      }
      this.clearError();
      await this.refresh();
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.showError("step in progress");
      } else {
        this.showError(err instanceof Error ? err.message : String(err));
      }
    } finally {
      this.state.stepping = false;
      this.el.stepBtn.disabled = false;
    }
  }

  /** Re-fetch every displayed layer and repaint. The page never edits
   * volume data locally. */
  async refresh(): Promise<void> {
    if (!this.state.sessionId) return;
    const { axis, index } = this.state;
    try {
      const [image, prob, hints] = await Promise.all([
        this.client.fetchSlice(this.state.sessionId, axis, index, "image"),
        this.client.fetchSlice(this.state.sessionId, axis, index, "prob"),
        this.client.fetchSlice(this.state.sessionId, axis, index, "hints"),
      ]);
      this.paint(image, prob, hints);
    } catch (err) {
      this.showError(err instanceof Error ? err.message : String(err));
    }
  }

  private paint(image: SliceData, prob: SliceData, hints: SliceData): void {
    const rgba = composite({
      rows: image.rows,
      cols: image.cols,
      image: image.data,
      prob: prob.data,
      hints: hints.data,
      overlayOpacity: this.state.overlayOpacity,
    });
    this.lastFrame = { rgba, rows: image.rows, cols: image.cols };
    const canvas = this.el.slice;
    canvas.width = image.cols * PIXELS_PER_VOXEL;
    canvas.height = image.rows * PIXELS_PER_VOXEL;
    const ctx = canvas.getContext("2d");
    if (!ctx) return; // headless test page: lastFrame carries the pixels
    const frame = new ImageData(new Uint8ClampedArray(rgba), image.cols, image.rows);
    createImageBitmap(frame).then((bitmap) => {
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
    });
  }

  private drawSparkline(): void {
    const canvas = this.el.sparkline;
    const ctx = canvas.getContext("2d");
    if (!ctx) return;
    const pts = sparklinePoints(this.state.diceHistory, canvas.width, canvas.height);
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (pts.length === 0) return;
    ctx.beginPath();
    ctx.moveTo(pts[0][0], pts[0][1]);
    for (const [x, y] of pts.slice(1)) ctx.lineTo(x, y);
    ctx.strokeStyle = "#2a7";
    ctx.lineWidth = 2;
    ctx.stroke();
  }
}

export function createApp(doc: Document, clientFactory?: (base: string) => Client): App {
  return new App(doc, clientFactory);
}

// browser bootstrap; test pages construct the app explicitly instead
if (typeof document !== "undefined" && document.getElementById("app-root")) {
  createApp(document);
}
