// Canvas rendering: manual boxes in red, detected boxes in blue, each
// with a probability badge.  Selected boxes get corner handles.

import type { CanvasRoi } from './roi.js'
import { corners } from './roi.js'

export const MANUAL_COLOR = '#e0342f'
export const DETECTED_COLOR = '#2f6fe0'
const HANDLE_SIZE = 7

export function badgeText(probability: number | null): string {
  if (probability === null) return '...'
  return (probability * 100).toFixed(1) + '%'
}

export function roiColor(roi: CanvasRoi): string {
  return roi.provenance === 'manual' ? MANUAL_COLOR : DETECTED_COLOR
}

export function drawRoi(ctx: CanvasRenderingContext2D, roi: CanvasRoi): void {
  const c = corners(roi)
  const color = roiColor(roi)
  ctx.lineWidth = roi.selected ? 3 : 2
  ctx.strokeStyle = color
  ctx.strokeRect(c.x0, c.y0, c.x1 - c.x0, c.y1 - c.y0)

  const label = roi.label ? `${roi.label} ${badgeText(roi.probability)}` : badgeText(roi.probability)
  ctx.font = '13px sans-serif'
  const textWidth = ctx.measureText(label).width + 8
  const badgeY = c.y0 >= 18 ? c.y0 - 18 : c.y1
  ctx.fillStyle = 'rgba(20,20,20,0.75)'
  ctx.fillRect(c.x0, badgeY, textWidth, 18)
  ctx.fillStyle = '#fff'
  ctx.fillText(label, c.x0 + 4, badgeY + 13)

  if (roi.selected) {
    ctx.fillStyle = color
    for (const [hx, hy] of [
      [c.x0, c.y0],
      [c.x1, c.y0],
      [c.x0, c.y1],
      [c.x1, c.y1],
    ]) {
      ctx.fillRect(hx - HANDLE_SIZE / 2, hy - HANDLE_SIZE / 2, HANDLE_SIZE, HANDLE_SIZE)
    }
  }
}

export function drawScene(
  ctx: CanvasRenderingContext2D,
  image: CanvasImageSource | null,
  rois: CanvasRoi[],
): void {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height)
  if (image) ctx.drawImage(image, 0, 0)
  for (const roi of rois) drawRoi(ctx, roi)
}
