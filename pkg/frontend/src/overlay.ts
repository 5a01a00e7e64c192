// Canvas drawing for label overlays. Colors follow the source convention
// used throughout the toolkit: crowd green, precise-model pink, consensus-
// model orange; the flagged instance is highlighted on top.

import { boxToScreen, type ViewTransform } from "./transform.js";
import type { BoxTuple, LabelJson, Overlay } from "./types.js";

export const SOURCE_COLORS: Record<string, string> = {
  crowd: "#39d353",
  model_p: "#ff6bc1",
  model_a: "#ffa657",
  expert: "#58a6ff",
};

export interface LayerVisibility {
  crowd: boolean;
  model_p: boolean;
  model_a: boolean;
}

export function strokeBox(
  ctx: CanvasRenderingContext2D,
  t: ViewTransform,
  box: BoxTuple,
  color: string,
  lineWidth = 1.5,
  dashed = false,
): void {
  const [x, y, w, h] = boxToScreen(t, box);
  ctx.save();
  ctx.strokeStyle = color;
  ctx.lineWidth = lineWidth;
  ctx.setLineDash(dashed ? [6, 4] : []);
  ctx.strokeRect(x, y, w, h);
  ctx.restore();
}

function strokeLayer(
  ctx: CanvasRenderingContext2D,
  t: ViewTransform,
  labels: LabelJson[],
  color: string,
): void {
  for (const label of labels) strokeBox(ctx, t, label.bbox, color, 1.2);
}

export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  t: ViewTransform,
  overlay: Overlay,
  visible: LayerVisibility,
): void {
  if (visible.model_a) strokeLayer(ctx, t, overlay.model_a, SOURCE_COLORS["model_a"] as string);
  if (visible.model_p) strokeLayer(ctx, t, overlay.model_p, SOURCE_COLORS["model_p"] as string);
  if (visible.crowd) strokeLayer(ctx, t, overlay.crowd, SOURCE_COLORS["crowd"] as string);
}

/** The instance under review: bold outline plus corner handles when editing. */
export function drawFlagged(
  ctx: CanvasRenderingContext2D,
  t: ViewTransform,
  box: BoxTuple,
  editing: boolean,
): void {
  strokeBox(ctx, t, box, "#f3f719", 2.5, !editing);
  if (!editing) return;
  const [x, y, w, h] = boxToScreen(t, box);
  ctx.save();
  ctx.fillStyle = "#f3f719";
  const r = 4;
  for (const [hx, hy] of [
    [x, y],
    [x + w / 2, y],
    [x + w, y],
    [x + w, y + h / 2],
    [x + w, y + h],
    [x + w / 2, y + h],
    [x, y + h],
    [x, y + h / 2],
  ] as const) {
    ctx.fillRect(hx - r, hy - r, 2 * r, 2 * r);
  }
  ctx.restore();
}
