// Image <-> screen coordinate mapping.
//
// All editing happens in image coordinates; the view transform only decides
// where those pixels land on screen. That keeps box edits exact at any zoom:
// a drag is converted to image space once, not accumulated in screen space.

import type { BoxTuple } from "./types.js";

export interface ViewTransform {
  scale: number;
  tx: number;
  ty: number;
}

export const MIN_SCALE = 0.1;
export const MAX_SCALE = 16;

/** Center the image in a viewport with a uniform margin, never upscaling past 1:1. */
export function fitImage(
  viewWidth: number,
  viewHeight: number,
  imageWidth: number,
  imageHeight: number,
  margin = 16,
): ViewTransform {
  const usableW = Math.max(1, viewWidth - 2 * margin);
  const usableH = Math.max(1, viewHeight - 2 * margin);
  const scale = Math.min(usableW / imageWidth, usableH / imageHeight, 1);
  return {
    scale,
    tx: (viewWidth - imageWidth * scale) / 2,
    ty: (viewHeight - imageHeight * scale) / 2,
  };
}

export function imageToScreen(t: ViewTransform, x: number, y: number): { x: number; y: number } {
  return { x: t.tx + x * t.scale, y: t.ty + y * t.scale };
}

export function screenToImage(t: ViewTransform, sx: number, sy: number): { x: number; y: number } {
  return { x: (sx - t.tx) / t.scale, y: (sy - t.ty) / t.scale };
}

/** Rescale around a screen-space anchor so the pixel under the cursor stays put. */
export function zoomAt(
  t: ViewTransform,
  factor: number,
  anchorX: number,
  anchorY: number,
  minScale = MIN_SCALE,
  maxScale = MAX_SCALE,
): ViewTransform {
  const scale = Math.min(maxScale, Math.max(minScale, t.scale * factor));
  const ratio = scale / t.scale;
  return {
    scale,
    tx: anchorX - (anchorX - t.tx) * ratio,
    ty: anchorY - (anchorY - t.ty) * ratio,
  };
}

export function pan(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { scale: t.scale, tx: t.tx + dx, ty: t.ty + dy };
}

/** Box in screen coordinates (for drawing and hit areas). */
export function boxToScreen(t: ViewTransform, box: BoxTuple): BoxTuple {
  const corner = imageToScreen(t, box[0], box[1]);
  return [corner.x, corner.y, box[2] * t.scale, box[3] * t.scale];
}
