/** DOM wiring for the steering UI. All state changes round-trip to the
 *  session service; this file only renders payloads and forwards input. */

import { SessionClient, type StatePayload } from "./api.js";
import { compositeIteration, sparklinePoints } from "./render.js";
import { initialView, reduce, type SessionView, type ViewAction } from "./state.js";

const SERVICE_URL = (window as unknown as { MASKREFINE_URL?: string }).MASKREFINE_URL
  ?? `${location.protocol}//${location.hostname}:8000`;

const client = new SessionClient(SERVICE_URL);
let view: SessionView = initialView();

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

function dispatch(action: ViewAction): void {
  view = reduce(view, action);
  void renderAll();
}

async function fetchArrays(kind: string, iteration: number): Promise<number[][]> {
  if (!view.sessionId) return [];
  const payload = await client.arrays(view.sessionId, kind, iteration);
  return payload.values;
}

async function renderViewer(): Promise<void> {
  if (!view.sessionId || view.iterations.length === 0) return;
  const iteration = view.cursor;
  const [image, mask, error, segmentation] = await Promise.all([
    fetchArrays("image", iteration),
    fetchArrays("mask", iteration),
    fetchArrays("error", iteration),
    fetchArrays("segmentation", iteration),
  ]);
  // normalize image to [0,1] for the gray base
  let lo = Infinity;
  let hi = -Infinity;
  for (const row of image) for (const v of row) { lo = Math.min(lo, v); hi = Math.max(hi, v); }
  const span = hi - lo || 1;
  const gray = image.map((row) => row.map((v) => (v - lo) / span));

  const rgba = compositeIteration(
    { image: gray, mask, error, segmentation },
    view.layers,
    view.overlayOpacity,
  );
  const h = image.length;
  const w = h > 0 ? image[0].length : 0;
  const canvas = $("viewer") as HTMLCanvasElement;
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d")!;
  const pixels = new Uint8ClampedArray(rgba.length);
  pixels.set(rgba);
  ctx.putImageData(new ImageData(pixels, w, h), 0, 0);
}

function renderSparkline(): void {
  const canvas = $("sparkline") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const points = sparklinePoints(view.maskAreaHistory, view.brainArea, canvas.width - 8, canvas.height - 8);
  if (points.length === 0) return;
  ctx.strokeStyle = "#4076ff";
  ctx.lineWidth = 2;
  ctx.beginPath();
  points.forEach(([x, y], i) => {
    if (i === 0) ctx.moveTo(x + 4, y + 4);
    else ctx.lineTo(x + 4, y + 4);
  });
  ctx.stroke();
  // cursor marker
  const idx = view.iterations.indexOf(view.cursor);
  if (idx >= 0 && points[idx]) {
    ctx.fillStyle = "#ff4040";
    ctx.beginPath();
    ctx.arc(points[idx][0] + 4, points[idx][1] + 4, 3, 0, Math.PI * 2);
    ctx.fill();
  }
}

function renderFilmstrip(): void {
  const strip = $("filmstrip");
  strip.innerHTML = "";
  for (const t of view.iterations) {
    const cell = document.createElement("button");
    cell.className = "film-cell" + (t === view.cursor ? " active" : "");
    const diverged = view.divergedAt !== null && t >= view.divergedAt;
    cell.textContent = diverged ? `t${t} ⚡` : `t${t}`;
    if (diverged) cell.classList.add("diverged");
    cell.title = `mask area ${view.maskAreaHistory[t - 1] ?? "?"}`;
    cell.addEventListener("click", () => dispatch({ kind: "scrub", iteration: t }));
    strip.appendChild(cell);
  }
}

function renderStatus(): void {
  $("status").textContent = view.sessionId
    ? `session ${view.sessionId} · ${view.status}` +
      (view.terminationReason ? ` (${view.terminationReason})` : "") +
      ` · iteration ${view.cursor}/${view.iterations.length}` +
      (view.divergedAt !== null ? ` · diverged at t${view.divergedAt}` : "")
    : "no session";
  ($("tau-value") as HTMLElement).textContent = view.tau.toFixed(4);
}

async function renderAll(): Promise<void> {
  renderStatus();
  renderFilmstrip();
  renderSparkline();
  await renderViewer();
}

function applyPayload(payload: StatePayload): void {
  dispatch({ kind: "session-updated", payload });
}

async function createSession(): Promise<void> {
  const modelId = ($("model-select") as HTMLSelectElement).value;
  const seed = Number(($("seed-input") as HTMLInputElement).value) || 0;
  const lesionSize = Number(($("lesion-size") as HTMLInputElement).value) || 6;
  const created = await client.createSession({
    modelId,
    phantom: { lesion: true, seed, lesion_radius_range: [lesionSize - 1, lesionSize + 1] },
    seed,
  });
  view = initialView();
  applyPayload(created.state);
}

async function step(n: number): Promise<void> {
  if (!view.sessionId) return;
  applyPayload(await client.step(view.sessionId, n));
}

async function rollbackTo(iteration: number): Promise<void> {
  if (!view.sessionId) return;
  dispatch({ kind: "snapshot-reference" });
  applyPayload(await client.rollback(view.sessionId, iteration));
}

async function adjustTauAndRestep(tau: number): Promise<void> {
  if (!view.sessionId) return;
  const cursor = view.cursor;
  dispatch({ kind: "snapshot-reference" });
  await client.rollback(view.sessionId, Math.max(1, cursor - 1));
  await client.setTau(view.sessionId, tau);
  applyPayload(await client.step(view.sessionId, 1));
}

async function acceptCurrent(): Promise<void> {
  if (!view.sessionId) return;
  const result = await client.accept(view.sessionId, view.cursor, view.tau);
  for (const name of result.accepted.files) {
    const bytes = await client.exportFile(view.sessionId, name);
    const blob = new Blob([bytes]);
    const anchor = document.createElement("a");
    anchor.href = URL.createObjectURL(blob);
    anchor.download = name;
    anchor.click();
    URL.revokeObjectURL(anchor.href);
  }
  applyPayload(await client.state(view.sessionId));
}

async function boot(): Promise<void> {
  const models = await client.models();
  const select = $("model-select") as HTMLSelectElement;
  select.innerHTML = models.map((m) => `<option value="${m}">${m}</option>`).join("");

  $("create-btn").addEventListener("click", () => void createSession());
  $("step-btn").addEventListener("click", () => void step(1));
  $("step5-btn").addEventListener("click", () => void step(5));
  $("rollback-btn").addEventListener("click", () => void rollbackTo(Math.max(1, view.cursor - 1)));
  $("accept-btn").addEventListener("click", () => void acceptCurrent());

  const tauSlider = $("tau-slider") as HTMLInputElement;
  tauSlider.addEventListener("change", () => {
    const tau = Number(tauSlider.value);
    void adjustTauAndRestep(tau);
  });

  const opacity = $("opacity-slider") as HTMLInputElement;
  opacity.addEventListener("input", () =>
    dispatch({ kind: "set-opacity", opacity: Number(opacity.value) }),
  );

  for (const layer of ["image", "mask", "error", "segmentation"] as const) {
    $(`layer-${layer}`).addEventListener("change", () =>
      dispatch({ kind: "toggle-layer", layer }),
    );
  }
  renderStatus();
}

void boot();
