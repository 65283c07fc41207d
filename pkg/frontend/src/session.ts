import { MaskBitmap } from "./maskBitmap.js";
import {
  BlendMode,
  DEFAULT_PANEL,
  InpaintRequest,
  InpaintResponse,
  PanelState,
  W_SLIDER_MAX,
  W_SLIDER_MIN,
} from "./types.js";

export interface HistoryEntry {
  readonly request: InpaintRequest;
  readonly response: InpaintResponse;
  readonly at: number; // ms epoch
}

/** One editing session: a source image, the painted mask, panel state, and
 * the append-only history of (request, response) pairs. */
export class Session {
  imageB64: string | null = null;
  imageWidth = 0;
  imageHeight = 0;
  mask: MaskBitmap | null = null;
  panel: PanelState = { ...DEFAULT_PANEL };
  private history: HistoryEntry[] = [];

  loadImage(b64: string, width: number, height: number): void {
    this.imageB64 = b64;
    this.imageWidth = width;
    this.imageHeight = height;
    this.mask = new MaskBitmap(width, height);
  }

  /** The mask the service will see: 0/255 bytes at image resolution. */
  exportMask(): Uint8Array {
    if (!this.mask) throw new Error("no image loaded");
    return this.mask.export();
  }

  importMask(data: Uint8Array): void {
    if (!this.mask) throw new Error("no image loaded");
    this.mask = MaskBitmap.import(this.imageWidth, this.imageHeight, data);
  }

  /** Build the request from the current state; maskB64 is the PNG-encoded
   * export of the painted bitmap. */
  buildRequest(maskB64: string): InpaintRequest {
    if (!this.imageB64) throw new Error("no image loaded");
    const p = this.panel;
    const req: InpaintRequest = {
      image: this.imageB64,
      mask: maskB64,
      prompt: p.prompt,
      w: p.w,
      blend_mode: p.blendMode,
      blur_sigma: p.blurSigma,
      steps: p.steps,
      guidance: p.guidance,
      seed: p.seed,
    };
    if (p.baseId) req.base_id = p.baseId;
    if (p.branchId) req.branch_id = p.branchId;
    return req;
  }

  /** History is append-only; entries are frozen on insert. */
  record(request: InpaintRequest, response: InpaintResponse): HistoryEntry {
    const entry: HistoryEntry = Object.freeze({
      request: Object.freeze({ ...request }),
      response: Object.freeze({ ...response }),
      at: Date.now(),
    });
    this.history.push(entry);
    return entry;
  }

  getHistory(): readonly HistoryEntry[] {
    return this.history;
  }
}

/** Linear slider-position -> preservation-scale mapping over the sweep
 * range [0.2, 1.0]; position is a fraction in [0, 1]. */
export function sliderToW(position: number): number {
  const t = Math.min(1, Math.max(0, position));
  return W_SLIDER_MIN + t * (W_SLIDER_MAX - W_SLIDER_MIN);
}

export function wToSlider(w: number): number {
  return (w - W_SLIDER_MIN) / (W_SLIDER_MAX - W_SLIDER_MIN);
}

export function isBlendMode(v: string): v is BlendMode {
  return v === "none" || v === "paste" || v === "blur";
}
