// Box editing as pure functions over image-space coordinates.
//
// The app layer converts pointer events to image coordinates (screenToImage)
// and feeds them here; nothing in this module depends on zoom or the DOM, so
// edited boxes are pixel-exact regardless of the view transform.

import type { BoxTuple } from "./types.js";

/** Corner/edge being dragged, or the whole box. */
export type Handle = "nw" | "n" | "ne" | "e" | "se" | "s" | "sw" | "w" | "move";

export interface DragState {
  handle: Handle;
  startX: number;
  startY: number;
  origin: BoxTuple;
}

/** Smallest box edge a drag may produce, in image pixels. */
export const MIN_BOX_SIZE = 2;

/** Pointer movement below this (image px) is treated as an accidental click. */
export const DRAG_EPSILON = 0.5;

/**
 * Which handle a point grabs, or null when outside the box entirely.
 * `grabRadius` is in image pixels — divide a screen-pixel radius by the view
 * scale so handles stay a constant screen size.
 */
export function hitTest(box: BoxTuple, x: number, y: number, grabRadius: number): Handle | null {
  const [bx, by, bw, bh] = box;
  const nearLeft = Math.abs(x - bx) <= grabRadius;
  const nearRight = Math.abs(x - (bx + bw)) <= grabRadius;
  const nearTop = Math.abs(y - by) <= grabRadius;
  const nearBottom = Math.abs(y - (by + bh)) <= grabRadius;
  const withinX = x >= bx - grabRadius && x <= bx + bw + grabRadius;
  const withinY = y >= by - grabRadius && y <= by + bh + grabRadius;

  if (!withinX || !withinY) return null;
  if (nearTop && nearLeft) return "nw";
  if (nearTop && nearRight) return "ne";
  if (nearBottom && nearLeft) return "sw";
  if (nearBottom && nearRight) return "se";
  if (nearTop) return "n";
  if (nearBottom) return "s";
  if (nearLeft) return "w";
  if (nearRight) return "e";
  if (x >= bx && x <= bx + bw && y >= by && y <= by + bh) return "move";
  return null;
}

export function beginDrag(handle: Handle, box: BoxTuple, x: number, y: number): DragState {
  return { handle, startX: x, startY: y, origin: [...box] as BoxTuple };
}

/**
 * The box after dragging to (x, y). Edges clamp at MIN_BOX_SIZE instead of
 * crossing over, so a resize can never invert or collapse the box.
 */
export function applyDrag(drag: DragState, x: number, y: number): BoxTuple {
  const [ox, oy, ow, oh] = drag.origin;
  const dx = x - drag.startX;
  const dy = y - drag.startY;
  if (drag.handle === "move") {
    return [ox + dx, oy + dy, ow, oh];
  }
  let left = ox;
  let top = oy;
  let right = ox + ow;
  let bottom = oy + oh;
  if (drag.handle.includes("w")) left = Math.min(ox + dx, right - MIN_BOX_SIZE);
  if (drag.handle.includes("e")) right = Math.max(right + dx, left + MIN_BOX_SIZE);
  if (drag.handle.includes("n")) top = Math.min(oy + dy, bottom - MIN_BOX_SIZE);
  if (drag.handle.includes("s")) bottom = Math.max(bottom + dy, top + MIN_BOX_SIZE);
  return [left, top, right - left, bottom - top];
}

/** True when an edit moved any edge enough to be intentional. */
export function isMeaningfulEdit(before: BoxTuple, after: BoxTuple, epsilon = DRAG_EPSILON): boolean {
  return before.some((v, i) => Math.abs(v - (after[i] as number)) > epsilon);
}

/**
 * Box from a corner-to-corner draw (any direction), or null when the sweep
 * is too small to be a deliberate box.
 */
export function drawnBox(
  startX: number,
  startY: number,
  endX: number,
  endY: number,
  minSize = MIN_BOX_SIZE,
): BoxTuple | null {
  const w = Math.abs(endX - startX);
  const h = Math.abs(endY - startY);
  if (w < minSize || h < minSize) return null;
  return [Math.min(startX, endX), Math.min(startY, endY), w, h];
}
