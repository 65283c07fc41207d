/** DOM wiring for the mask-painting studio.
 *
 * Layout: source canvas with a mask overlay (brush/eraser painting), an
 * option panel bound 1:1 to request fields, a submit button, and a history
 * strip with side-by-side compare of any two entries.
 */

import { ApiClient, ApiError } from "./api.js";
import { MaskBitmap } from "./maskBitmap.js";
import { Session, isBlendMode, sliderToW, wToSlider } from "./session.js";
import { HistoryEntry } from "./session.js";

const SERVICE_URL =
  new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:8000";

const api = new ApiClient(SERVICE_URL);
const session = new Session();

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const sourceCanvas = $("source") as unknown as HTMLCanvasElement;
const overlayCanvas = $("overlay") as unknown as HTMLCanvasElement;
const resultCanvas = $("result") as unknown as HTMLCanvasElement;
const compareLeft = $("compare-left") as unknown as HTMLCanvasElement;
const compareRight = $("compare-right") as unknown as HTMLCanvasElement;
const statusEl = $("status");
const historyEl = $("history");
const diffEl = $("diff-indicator");

let pending = false;
let eraser = false;
let brushRadius = 3;
const compareSelection: number[] = [];

function setStatus(text: string, isError = false): void {
  statusEl.textContent = text;
  statusEl.className = isError ? "status error" : "status";
}

function setControlsDisabled(disabled: boolean): void {
  document
    .querySelectorAll<HTMLInputElement>("input, select, button, textarea")
    .forEach((el) => {
      if (el.id !== "image-file") el.disabled = disabled;
    });
}

// --- image loading ---------------------------------------------------------

async function fileToImage(file: File): Promise<HTMLImageElement> {
  const url = URL.createObjectURL(file);
  try {
    const img = new Image();
    await new Promise<void>((resolve, reject) => {
      img.onload = () => resolve();
      img.onerror = () => reject(new Error("could not decode image"));
      img.src = url;
    });
    return img;
  } finally {
    URL.revokeObjectURL(url);
  }
}

function canvasToB64(canvas: HTMLCanvasElement): string {
  return canvas.toDataURL("image/png").split(",")[1];
}

async function loadImageFile(file: File): Promise<void> {
  const img = await fileToImage(file);
  const w = img.naturalWidth;
  const h = img.naturalHeight;
  for (const c of [sourceCanvas, overlayCanvas, resultCanvas]) {
    c.width = w;
    c.height = h;
  }
  sourceCanvas.getContext("2d")!.drawImage(img, 0, 0);
  session.loadImage(canvasToB64(sourceCanvas), w, h);
  drawOverlay();
  setStatus(`loaded ${w}x${h} image`);
}

// --- mask painting ----------------------------------------------------------

function drawOverlay(): void {
  const ctx = overlayCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height);
  const mask = session.mask;
  if (!mask) return;
  const img = ctx.createImageData(mask.width, mask.height);
  for (let y = 0; y < mask.height; y++) {
    for (let x = 0; x < mask.width; x++) {
      const i = (y * mask.width + x) * 4;
      if (mask.get(x, y) === 255) {
        img.data[i] = 255;
        img.data[i + 1] = 60;
        img.data[i + 2] = 60;
        img.data[i + 3] = 140;
      }
    }
  }
  ctx.putImageData(img, 0, 0);
}

function canvasPoint(ev: PointerEvent): [number, number] {
  const rect = overlayCanvas.getBoundingClientRect();
  const x = ((ev.clientX - rect.left) / rect.width) * overlayCanvas.width;
  const y = ((ev.clientY - rect.top) / rect.height) * overlayCanvas.height;
  return [x, y];
}

function attachPainting(): void {
  let painting = false;
  overlayCanvas.addEventListener("pointerdown", (ev) => {
    if (!session.mask || pending) return;
    painting = true;
    overlayCanvas.setPointerCapture(ev.pointerId);
    const [x, y] = canvasPoint(ev);
    session.mask.stamp(x, y, brushRadius, eraser ? 0 : 255);
    drawOverlay();
  });
  overlayCanvas.addEventListener("pointermove", (ev) => {
    if (!painting || !session.mask) return;
    const [x, y] = canvasPoint(ev);
    session.mask.stamp(x, y, brushRadius, eraser ? 0 : 255);
    drawOverlay();
  });
  const stop = () => {
    painting = false;
  };
  overlayCanvas.addEventListener("pointerup", stop);
  overlayCanvas.addEventListener("pointerleave", stop);
}

// --- mask export / import ----------------------------------------------------

function maskToB64(): string {
  const mask = session.mask!;
  const tmp = document.createElement("canvas");
  tmp.width = mask.width;
  tmp.height = mask.height;
  const ctx = tmp.getContext("2d")!;
  const img = ctx.createImageData(mask.width, mask.height);
  for (let i = 0; i < mask.width * mask.height; i++) {
    const v = mask.export()[i];
    img.data[i * 4] = v;
    img.data[i * 4 + 1] = v;
    img.data[i * 4 + 2] = v;
    img.data[i * 4 + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
  return canvasToB64(tmp);
}

async function importMaskFile(file: File): Promise<void> {
  const img = await fileToImage(file);
  if (img.naturalWidth !== session.imageWidth || img.naturalHeight !== session.imageHeight) {
    setStatus("mask dimensions do not match the image", true);
    return;
  }
  const tmp = document.createElement("canvas");
  tmp.width = img.naturalWidth;
  tmp.height = img.naturalHeight;
  const ctx = tmp.getContext("2d")!;
  ctx.drawImage(img, 0, 0);
  const px = ctx.getImageData(0, 0, tmp.width, tmp.height).data;
  const gray = new Uint8Array(tmp.width * tmp.height);
  for (let i = 0; i < gray.length; i++) gray[i] = px[i * 4];
  session.importMask(gray);
  drawOverlay();
  setStatus("mask imported");
}

function downloadMask(): void {
  if (!session.mask) return;
  const a = document.createElement("a");
  a.href = `data:image/png;base64,${maskToB64()}`;
  a.download = "mask.png";
  a.click();
}

// --- panel bindings -----------------------------------------------------------

function bindPanel(): void {
  const wSlider = $("w-slider") as unknown as HTMLInputElement;
  const wValue = $("w-value");
  wSlider.addEventListener("input", () => {
    session.panel.w = sliderToW(Number(wSlider.value));
    wValue.textContent = session.panel.w.toFixed(2);
  });
  wSlider.value = String(wToSlider(session.panel.w));
  wValue.textContent = session.panel.w.toFixed(2);

  const bind = (id: string, apply: (v: string) => void) => {
    const el = $(id) as unknown as HTMLInputElement | HTMLSelectElement;
    el.addEventListener("input", () => apply(el.value));
  };
  bind("prompt", (v) => (session.panel.prompt = v));
  bind("blend-mode", (v) => {
    if (isBlendMode(v)) session.panel.blendMode = v;
  });
  bind("blur-sigma", (v) => (session.panel.blurSigma = Number(v)));
  bind("steps", (v) => (session.panel.steps = Number(v)));
  bind("guidance", (v) => (session.panel.guidance = Number(v)));
  bind("seed", (v) => (session.panel.seed = Number(v)));
  bind("base-model", (v) => (session.panel.baseId = v || undefined));
  bind("brush-radius", (v) => (brushRadius = Number(v)));
  $("eraser").addEventListener("click", () => {
    eraser = !eraser;
    $("eraser").textContent = eraser ? "eraser: on" : "eraser: off";
  });
  $("clear-mask").addEventListener("click", () => {
    session.mask?.clear();
    drawOverlay();
  });
}

// --- submit / history / compare -------------------------------------------------

async function drawB64(canvas: HTMLCanvasElement, b64: string): Promise<void> {
  const img = new Image();
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error("bad image from service"));
    img.src = `data:image/png;base64,${b64}`;
  });
  canvas.width = img.naturalWidth;
  canvas.height = img.naturalHeight;
  canvas.getContext("2d")!.drawImage(img, 0, 0);
}

/** For paste mode: count pixels outside the painted region that differ from
 * the source (should be zero by the paste guarantee). */
function updateDiffIndicator(result: HTMLCanvasElement): void {
  const mask = session.mask;
  if (!mask || session.panel.blendMode !== "paste") {
    diffEl.textContent = "";
    return;
  }
  const src = sourceCanvas
    .getContext("2d")!
    .getImageData(0, 0, sourceCanvas.width, sourceCanvas.height).data;
  const out = result.getContext("2d")!.getImageData(0, 0, result.width, result.height).data;
  let differing = 0;
  for (let y = 0; y < mask.height; y++) {
    for (let x = 0; x < mask.width; x++) {
      if (mask.get(x, y) === 0) {
        const i = (y * mask.width + x) * 4;
        if (src[i] !== out[i] || src[i + 1] !== out[i + 1] || src[i + 2] !== out[i + 2]) {
          differing++;
        }
      }
    }
  }
  diffEl.textContent =
    differing === 0
      ? "paste check: unmasked region identical to source"
      : `paste check: ${differing} unmasked pixels differ`;
  diffEl.className = differing === 0 ? "status" : "status error";
}

function renderHistory(): void {
  historyEl.innerHTML = "";
  session.getHistory().forEach((entry, i) => {
    const div = document.createElement("div");
    div.className = "history-entry";
    const img = document.createElement("img");
    img.src = `data:image/png;base64,${entry.response.image}`;
    img.title = `#${i} seed=${entry.request.seed} w=${entry.request.w.toFixed(2)} ` +
      `blend=${entry.request.blend_mode} "${entry.request.prompt}"`;
    img.addEventListener("click", () => toggleCompare(i, div));
    div.appendChild(img);
    const label = document.createElement("span");
    label.textContent = `#${i} w=${entry.request.w.toFixed(2)} seed=${entry.request.seed}`;
    div.appendChild(label);
    historyEl.appendChild(div);
  });
}

function toggleCompare(index: number, el: HTMLElement): void {
  const pos = compareSelection.indexOf(index);
  if (pos >= 0) {
    compareSelection.splice(pos, 1);
    el.classList.remove("selected");
  } else {
    compareSelection.push(index);
    el.classList.add("selected");
    while (compareSelection.length > 2) {
      const dropped = compareSelection.shift()!;
      historyEl.children[dropped]?.classList.remove("selected");
    }
  }
  void renderCompare();
}

async function renderCompare(): Promise<void> {
  const entries = session.getHistory();
  const [a, b] = compareSelection;
  if (a !== undefined) await drawB64(compareLeft, entries[a].response.image);
  if (b !== undefined) await drawB64(compareRight, entries[b].response.image);
}

async function submit(): Promise<void> {
  if (pending) return;
  if (!session.imageB64 || !session.mask) {
    setStatus("load an image first", true);
    return;
  }
  if (session.mask.isEmpty()) {
    const ok = confirm("Nothing is painted: generate over the whole image?");
    if (!ok) return;
    session.mask.fillRect(0, 0, session.imageWidth - 1, session.imageHeight - 1);
    drawOverlay();
  }
  pending = true;
  setControlsDisabled(true);
  setStatus("inpainting...");
  const request = session.buildRequest(maskToB64());
  try {
    const response = await api.inpaint(request);
    session.record(request, response);
    await drawB64(resultCanvas, response.image);
    updateDiffIndicator(resultCanvas);
    renderHistory();
    setStatus(`done in ${response.timing_ms.toFixed(0)} ms`);
  } catch (err) {
    if (err instanceof ApiError) {
      setStatus(err.field ? `${err.field}: ${err.message}` : err.message, true);
    } else {
      setStatus(`network failure: ${err}; try again`, true);
      $("submit").textContent = "retry";
    }
  } finally {
    pending = false;
    setControlsDisabled(false);
  }
}

async function init(): Promise<void> {
  attachPainting();
  bindPanel();
  $("submit").addEventListener("click", () => void submit());
  $("export-mask").addEventListener("click", downloadMask);
  ($("image-file") as unknown as HTMLInputElement).addEventListener("change", (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) void loadImageFile(file);
  });
  ($("mask-file") as unknown as HTMLInputElement).addEventListener("change", (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) void importMaskFile(file);
  });
  try {
    await api.health();
    const models = await api.models();
    const select = $("base-model") as unknown as HTMLSelectElement;
    for (const m of models.filter((m) => m.role === "base")) {
      const opt = document.createElement("option");
      opt.value = m.id;
      opt.textContent = m.id;
      select.appendChild(opt);
    }
    setStatus(`connected to ${SERVICE_URL}`);
  } catch {
    setStatus(`service unreachable at ${SERVICE_URL}`, true);
  }
}

void init();
