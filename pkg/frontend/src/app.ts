// Review session wiring: queue navigation, canvas rendering, box editing,
// and decision submission. Everything stateful lives here; geometry and API
// logic stay in the pure modules.

import { ApiError, ReviewApi } from "./api.js";
import {
  applyDrag,
  beginDrag,
  drawnBox,
  hitTest,
  isMeaningfulEdit,
  type DragState,
} from "./editor.js";
import { drawFlagged, drawOverlay, SOURCE_COLORS, type LayerVisibility } from "./overlay.js";
import {
  fitImage,
  pan,
  screenToImage,
  zoomAt,
  type ViewTransform,
} from "./transform.js";
import type { BoxTuple, DecisionPayload, Overlay, ReviewItem } from "./types.js";

type Mode = "view" | "edit" | "draw";

interface AppState {
  items: ReviewItem[];
  index: number;
  overlay: Overlay | null;
  image: HTMLImageElement | null;
  view: ViewTransform;
  mode: Mode;
  editedBox: BoxTuple | null;
  drag: DragState | null;
  drawStart: { x: number; y: number } | null;
  panFrom: { x: number; y: number } | null;
  visible: LayerVisibility;
  reviewer: string;
  message: string;
}

const state: AppState = {
  items: [],
  index: 0,
  overlay: null,
  image: null,
  view: { scale: 1, tx: 0, ty: 0 },
  mode: "view",
  editedBox: null,
  drag: null,
  drawStart: null,
  panFrom: null,
  visible: { crowd: true, model_p: true, model_a: true },
  reviewer: "ui",
  message: "",
};

const params = new URLSearchParams(window.location.search);
const api = new ReviewApi("", params.get("token") ?? undefined);

const canvas = document.getElementById("stage") as HTMLCanvasElement;
const ctx = canvas.getContext("2d") as CanvasRenderingContext2D;

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function currentItem(): ReviewItem | null {
  return state.items[state.index] ?? null;
}

function activeBox(): BoxTuple | null {
  const item = currentItem();
  if (!item) return null;
  return state.editedBox ?? item.flagged.bbox;
}

// ---------------------------------------------------------------- rendering

function resizeCanvas(): void {
  const rect = canvas.parentElement!.getBoundingClientRect();
  canvas.width = Math.floor(rect.width);
  canvas.height = Math.floor(rect.height);
}

function render(): void {
  ctx.fillStyle = "#0d1117";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (state.image && state.overlay) {
    ctx.save();
    ctx.imageSmoothingEnabled = state.view.scale < 1;
    ctx.translate(state.view.tx, state.view.ty);
    ctx.scale(state.view.scale, state.view.scale);
    ctx.drawImage(state.image, 0, 0);
    ctx.restore();
    drawOverlay(ctx, state.view, state.overlay, state.visible);
  }
  const box = activeBox();
  if (box) drawFlagged(ctx, state.view, box, state.mode === "edit");
  renderSidebar();
}

function renderSidebar(): void {
  const item = currentItem();
  el("position").textContent = state.items.length
    ? `${state.index + 1} / ${state.items.length}`
    : "queue empty";
  el("message").textContent = state.message;
  const info = el("item-info");
  const suggestions = el("suggestions");
  suggestions.innerHTML = "";
  if (!item) {
    info.textContent = "Nothing pending. 🎉";
    return;
  }
  const score = item.flagged.confidence;
  info.innerHTML =
    `<b>item ${item.item_id}</b> · image ${item.image_id} · ` +
    `<span class="region ${item.region}">${item.region}</span><br>` +
    `${item.region === "red" ? "model-only box: possible missed object" : "crowd-only box: possible false label"}` +
    `<br>source ${item.flagged.source}, confidence ${score.toFixed(2)}` +
    `<br>mode: <b>${state.mode}</b>${state.editedBox ? " (box modified)" : ""}`;
  item.suggestions.forEach((s, i) => {
    const row = document.createElement("button");
    row.className = "suggestion";
    row.style.borderColor = SOURCE_COLORS[s.source] ?? "#888";
    row.textContent = `${i + 1}: ${s.source} ${s.confidence.toFixed(2)} [${s.bbox
      .map((v) => v.toFixed(0))
      .join(", ")}]`;
    row.onclick = () => void submit({ action: "accept", suggestion_id: s.label_id });
    suggestions.appendChild(row);
  });
}

async function refreshProgress(): Promise<void> {
  try {
    const p = await api.progress();
    el("progress").textContent =
      `${p.resolved}/${p.total} decided · ${p.pending} pending · ` +
      `review cost ${p.review_cost_spent.toFixed(0)}`;
  } catch (err) {
    el("progress").textContent = describe(err);
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return err.message;
  return err instanceof Error ? err.message : String(err);
}

// ---------------------------------------------------------------- item flow

async function loadItem(): Promise<void> {
  const item = currentItem();
  state.mode = "view";
  state.editedBox = null;
  state.drag = null;
  state.overlay = null;
  state.image = null;
  if (!item) {
    render();
    return;
  }
  try {
    state.overlay = await api.overlay(item.image_id);
    state.view = fitImage(canvas.width, canvas.height, state.overlay.width, state.overlay.height);
    const image = new Image();
    image.src = api.imageUrl(item.image_id);
    image.onload = () => {
      state.image = image;
      render();
    };
    image.onerror = () => {
      state.message = "image missing (run with --render to rasterize the corpus)";
      render();
    };
  } catch (err) {
    state.message = describe(err);
  }
  render();
}

function advance(step: number): void {
  if (!state.items.length) return;
  state.index = Math.min(Math.max(state.index + step, 0), state.items.length - 1);
  state.message = "";
  void loadItem();
}

async function submit(payload: DecisionPayload): Promise<void> {
  const item = currentItem();
  if (!item) return;
  try {
    await api.decide(item.item_id, { reviewer: state.reviewer, ...payload });
    state.items.splice(state.index, 1);
    if (state.index >= state.items.length) state.index = Math.max(0, state.items.length - 1);
    state.message = `${payload.action} ✓`;
    await refreshProgress();
    await loadItem();
  } catch (err) {
    state.message = describe(err);
    render();
  }
}

function submitEdit(): void {
  const item = currentItem();
  if (!item || !state.editedBox) return;
  if (!isMeaningfulEdit(item.flagged.bbox, state.editedBox)) {
    state.message = "box unchanged — use accept/confirm instead";
    render();
    return;
  }
  void submit({ action: "edit", box: state.editedBox });
}

function confirmAsDrawn(): void {
  const item = currentItem();
  if (!item) return;
  // Green items: keeping the crowd outline is an edit to the same box.
  void submit({ action: "edit", box: item.flagged.bbox });
}

// ---------------------------------------------------------------- pointers

function pointerPos(event: PointerEvent | WheelEvent): { x: number; y: number } {
  const rect = canvas.getBoundingClientRect();
  return { x: event.clientX - rect.left, y: event.clientY - rect.top };
}

canvas.addEventListener("pointerdown", (event) => {
  const screen = pointerPos(event);
  const img = screenToImage(state.view, screen.x, screen.y);
  if (state.mode === "draw") {
    state.drawStart = img;
    return;
  }
  if (state.mode === "edit") {
    const box = activeBox();
    if (box) {
      const handle = hitTest(box, img.x, img.y, 8 / state.view.scale);
      if (handle) {
        state.drag = beginDrag(handle, box, img.x, img.y);
        canvas.setPointerCapture(event.pointerId);
        return;
      }
    }
  }
  state.panFrom = screen;
  canvas.setPointerCapture(event.pointerId);
});

canvas.addEventListener("pointermove", (event) => {
  const screen = pointerPos(event);
  if (state.drag) {
    const img = screenToImage(state.view, screen.x, screen.y);
    state.editedBox = applyDrag(state.drag, img.x, img.y);
    render();
    return;
  }
  if (state.panFrom) {
    state.view = pan(state.view, screen.x - state.panFrom.x, screen.y - state.panFrom.y);
    state.panFrom = screen;
    render();
  }
});

canvas.addEventListener("pointerup", (event) => {
  const screen = pointerPos(event);
  if (state.drag) {
    state.drag = null;
    render();
  }
  if (state.mode === "draw" && state.drawStart) {
    const img = screenToImage(state.view, screen.x, screen.y);
    const box = drawnBox(state.drawStart.x, state.drawStart.y, img.x, img.y);
    state.drawStart = null;
    if (box) {
      void submit({ action: "add_missing", box });
    } else {
      state.message = "drag larger to add a box";
      render();
    }
  }
  state.panFrom = null;
  canvas.releasePointerCapture(event.pointerId);
});

canvas.addEventListener("wheel", (event) => {
  event.preventDefault();
  const screen = pointerPos(event);
  const factor = event.deltaY < 0 ? 1.15 : 1 / 1.15;
  state.view = zoomAt(state.view, factor, screen.x, screen.y);
  render();
});

// ---------------------------------------------------------------- keyboard

window.addEventListener("keydown", (event) => {
  const tag = (event.target as HTMLElement | null)?.tagName;
  if (tag === "INPUT" || tag === "TEXTAREA") return;
  const item = currentItem();
  switch (event.key) {
    case "ArrowRight":
    case "j":
      advance(1);
      break;
    case "ArrowLeft":
    case "k":
      advance(-1);
      break;
    case "a": {
      const best = item?.suggestions[0];
      if (best) void submit({ action: "accept", suggestion_id: best.label_id });
      else state.message = "no suggestion to accept";
      render();
      break;
    }
    case "c":
      confirmAsDrawn();
      break;
    case "r":
      void submit({ action: "reject" });
      break;
    case "e":
      state.mode = state.mode === "edit" ? "view" : "edit";
      state.message = state.mode === "edit" ? "drag corners/edges, Enter to save" : "";
      render();
      break;
    case "m":
      state.mode = state.mode === "draw" ? "view" : "draw";
      state.message = state.mode === "draw" ? "drag to add the missed box" : "";
      render();
      break;
    case "Enter":
      if (state.mode === "edit") submitEdit();
      break;
    case "Escape":
      state.mode = "view";
      state.editedBox = null;
      state.message = "";
      render();
      break;
    case "1":
      state.visible.crowd = !state.visible.crowd;
      render();
      break;
    case "2":
      state.visible.model_p = !state.visible.model_p;
      render();
      break;
    case "3":
      state.visible.model_a = !state.visible.model_a;
      render();
      break;
    default:
      return;
  }
  event.preventDefault();
});

// ---------------------------------------------------------------- buttons

el("btn-accept").onclick = () => {
  const best = currentItem()?.suggestions[0];
  if (best) void submit({ action: "accept", suggestion_id: best.label_id });
};
el("btn-confirm").onclick = () => confirmAsDrawn();
el("btn-reject").onclick = () => void submit({ action: "reject" });
el("btn-edit").onclick = () => {
  state.mode = state.mode === "edit" ? "view" : "edit";
  render();
};
el("btn-save").onclick = () => submitEdit();
el("btn-draw").onclick = () => {
  state.mode = state.mode === "draw" ? "view" : "draw";
  render();
};
(el("reviewer") as HTMLInputElement).onchange = (event) => {
  state.reviewer = (event.target as HTMLInputElement).value || "ui";
};

// ---------------------------------------------------------------- startup

async function start(): Promise<void> {
  resizeCanvas();
  window.addEventListener("resize", () => {
    resizeCanvas();
    render();
  });
  try {
    const page = await api.queue({ status: "pending", limit: 500 });
    state.items = page.items;
  } catch (err) {
    state.message = describe(err);
  }
  await refreshProgress();
  await loadItem();
}

void start();
