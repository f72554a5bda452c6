// Canvas-side box model.  Geometry lives in center form exactly as the
// wire wants it; corner form is derived only for drawing and hit tests,
// so serialization never loses precision.

import type { RoiJson } from './types.js'

export type Provenance = 'manual' | 'detected'

export interface CanvasRoi {
  id: number
  xCenter: number
  yCenter: number
  width: number
  height: number
  label: string | null
  provenance: Provenance
  selected: boolean
  /** live per-ROI malignancy score; null while a request is in flight */
  probability: number | null
}

export type Handle = 'nw' | 'ne' | 'sw' | 'se'

let nextId = 1

export function makeRoi(
  xCenter: number,
  yCenter: number,
  width: number,
  height: number,
  provenance: Provenance = 'manual',
  label: string | null = null,
): CanvasRoi {
  return {
    id: nextId++,
    xCenter,
    yCenter,
    width,
    height,
    label,
    provenance,
    selected: false,
    probability: null,
  }
}

export function toWire(roi: CanvasRoi): RoiJson {
  const json: RoiJson = {
    x_center: roi.xCenter,
    y_center: roi.yCenter,
    width: roi.width,
    height: roi.height,
  }
  if (roi.label !== null) json.label = roi.label
  return json
}

export function fromWire(json: RoiJson, provenance: Provenance = 'manual'): CanvasRoi {
  return makeRoi(json.x_center, json.y_center, json.width, json.height, provenance, json.label ?? null)
}

export interface Corners {
  x0: number
  y0: number
  x1: number
  y1: number
}

export function corners(roi: CanvasRoi): Corners {
  return {
    x0: roi.xCenter - roi.width / 2,
    y0: roi.yCenter - roi.height / 2,
    x1: roi.xCenter + roi.width / 2,
    y1: roi.yCenter + roi.height / 2,
  }
}

/** Center-form box from two drag points, in any corner order. */
export function boxFromDrag(ax: number, ay: number, bx: number, by: number) {
  const x0 = Math.min(ax, bx)
  const x1 = Math.max(ax, bx)
  const y0 = Math.min(ay, by)
  const y1 = Math.max(ay, by)
  return {
    xCenter: (x0 + x1) / 2,
    yCenter: (y0 + y1) / 2,
    width: x1 - x0,
    height: y1 - y0,
  }
}

export function hitTest(roi: CanvasRoi, x: number, y: number): boolean {
  const c = corners(roi)
  return x >= c.x0 && x <= c.x1 && y >= c.y0 && y <= c.y1
}

export function hitHandle(roi: CanvasRoi, x: number, y: number, tolerance = 6): Handle | null {
  const c = corners(roi)
  const near = (px: number, py: number) => Math.abs(x - px) <= tolerance && Math.abs(y - py) <= tolerance
  if (near(c.x0, c.y0)) return 'nw'
  if (near(c.x1, c.y0)) return 'ne'
  if (near(c.x0, c.y1)) return 'sw'
  if (near(c.x1, c.y1)) return 'se'
  return null
}

export function moveBy(roi: CanvasRoi, dx: number, dy: number): CanvasRoi {
  return { ...roi, xCenter: roi.xCenter + dx, yCenter: roi.yCenter + dy }
}

/** Drag one corner to (x, y); the opposite corner stays put. */
export function resizeCorner(roi: CanvasRoi, handle: Handle, x: number, y: number): CanvasRoi {
  const c = corners(roi)
  const anchorX = handle === 'nw' || handle === 'sw' ? c.x1 : c.x0
  const anchorY = handle === 'nw' || handle === 'ne' ? c.y1 : c.y0
  const next = boxFromDrag(anchorX, anchorY, x, y)
  return { ...roi, ...next }
}

export function topRoi(rois: CanvasRoi[], x: number, y: number): CanvasRoi | null {
  for (let i = rois.length - 1; i >= 0; i--) {
    if (hitTest(rois[i], x, y)) return rois[i]
  }
  return null
}
