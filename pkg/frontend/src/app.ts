// Session wiring: one image on a canvas, live ROI scores, detection
// overlay, client-side what-if aggregation, and annotation saves with
// an offline queue.

import { AGGREGATORS, aggregate, type Aggregator } from './aggregate.js'
import { ApiClient } from './api.js'
import { badgeText, drawScene } from './draw.js'
import { OfflineQueue } from './queue.js'
import {
  boxFromDrag,
  fromWire,
  hitHandle,
  makeRoi,
  moveBy,
  resizeCorner,
  topRoi,
  toWire,
  type CanvasRoi,
  type Handle,
} from './roi.js'
import { CAPTURES, LESION_LABELS, SKIN_TONES, STRATEGIES, type AnnotationIn, type Strategy } from './types.js'

const MIN_BOX_SIDE = 4

type DragMode =
  | { kind: 'none' }
  | { kind: 'draw'; startX: number; startY: number; roi: CanvasRoi }
  | { kind: 'move'; roi: CanvasRoi; lastX: number; lastY: number }
  | { kind: 'resize'; roi: CanvasRoi; handle: Handle }

export interface AppElements {
  canvas: HTMLCanvasElement
  fileInput: HTMLInputElement
  detectButton: HTMLButtonElement
  saveButton: HTMLButtonElement
  clearDetectedButton: HTMLButtonElement
  strategySelect: HTMLSelectElement
  aggregatorSelect: HTMLSelectElement
  captureSelect: HTMLSelectElement
  skinToneSelect: HTMLSelectElement
  labelSelect: HTMLSelectElement
  patientInput: HTMLInputElement
  annotatorInput: HTMLInputElement
  status: HTMLElement
  clientScore: HTMLElement
  serverScore: HTMLElement
  roiList: HTMLElement
}

export function initApp(elements: AppElements, client: ApiClient): { redraw: () => void } {
  const ctx = elements.canvas.getContext('2d')
  if (!ctx) throw new Error('canvas 2d context unavailable')

  let imageBlob: Blob | null = null
  let imageBitmap: ImageBitmap | null = null
  let imageId = ''
  let rois: CanvasRoi[] = []
  let drag: DragMode = { kind: 'none' }

  const queue = new OfflineQueue<AnnotationIn>(annotation => annotation.image_id)

  fillSelect(elements.strategySelect, STRATEGIES, 'two_stage')
  fillSelect(elements.aggregatorSelect, AGGREGATORS, 'noisy_or')
  fillSelect(elements.captureSelect, CAPTURES, 'wide_field')
  fillSelect(elements.skinToneSelect, SKIN_TONES, 'unknown')
  fillSelect(elements.labelSelect, ['', ...LESION_LABELS], '')

  function fillSelect(select: HTMLSelectElement, values: readonly string[], chosen: string) {
    select.innerHTML = ''
    for (const value of values) {
      const option = select.ownerDocument.createElement('option')
      option.value = value
      option.textContent = value === '' ? '(no label)' : value
      if (value === chosen) option.selected = true
      select.appendChild(option)
    }
  }

  function setStatus(text: string, kind: 'ok' | 'busy' | 'offline' = 'ok') {
    elements.status.textContent = text
    elements.status.dataset.kind = kind
  }

  function whatIfScore(): number {
    const known = rois.filter(r => r.probability !== null).map(r => r.probability as number)
    return aggregate(known, elements.aggregatorSelect.value as Aggregator)
  }

  function redraw() {
    drawScene(ctx!, imageBitmap, rois)
    elements.clientScore.textContent = rois.some(r => r.probability === null)
      ? badgeText(null)
      : badgeText(whatIfScore())
    renderRoiList()
  }

  function renderRoiList() {
    const doc = elements.roiList.ownerDocument
    elements.roiList.innerHTML = ''
    for (const roi of rois) {
      const row = doc.createElement('tr')
      if (roi.selected) row.className = 'selected'
      const geometry = `${roi.xCenter.toFixed(0)},${roi.yCenter.toFixed(0)} ${roi.width.toFixed(0)}x${roi.height.toFixed(0)}`
      row.innerHTML =
        `<td>${roi.provenance}</td><td>${roi.label ?? ''}</td>` +
        `<td>${geometry}</td><td>${badgeText(roi.probability)}</td>`
      row.onclick = () => {
        for (const other of rois) other.selected = other === roi
        redraw()
      }
      elements.roiList.appendChild(row)
    }
  }

  async function refreshRoiScore(roi: CanvasRoi) {
    if (!imageBlob) return
    roi.probability = null
    redraw()
    try {
      const scored = await client.scoreRoi(
        imageBlob,
        { xCenter: roi.xCenter, yCenter: roi.yCenter, width: roi.width, height: roi.height },
        imageId,
      )
      roi.probability = scored.probability
      setStatus('ready', 'ok')
    } catch (error) {
      setStatus(describe(error), 'offline')
    }
    redraw()
  }

  function describe(error: unknown): string {
    return error instanceof Error ? error.message : String(error)
  }

  async function runPredict() {
    if (!imageBlob) return
    setStatus('scoring...', 'busy')
    try {
      const response = await client.predict(imageBlob, {
        strategy: elements.strategySelect.value as Strategy,
        aggregator: elements.aggregatorSelect.value as Aggregator,
        imageId,
      })
      rois = rois.filter(r => r.provenance === 'manual')
      response.detections.forEach((detection, i) => {
        const roi = fromWire(detection.box, 'detected')
        roi.probability = response.roi_scores[i] ? response.roi_scores[i].probability : null
        rois.push(roi)
      })
      elements.serverScore.textContent = badgeText(response.image_score.probability)
      setStatus('ready', 'ok')
    } catch (error) {
      setStatus(describe(error), 'offline')
    }
    redraw()
  }

  async function loadExisting() {
    try {
      const existing = await client.getAnnotation(imageId)
      if (existing) {
        rois = existing.current.map(json => fromWire(json, 'manual'))
        for (const roi of rois) void refreshRoiScore(roi)
      }
    } catch {
      // no saved annotations, or offline: start empty either way
    }
    redraw()
  }

  elements.fileInput.onchange = async () => {
    const file = elements.fileInput.files && elements.fileInput.files[0]
    if (!file) return
    imageBlob = file
    imageId = file.name.replace(/\.[^.]+$/, '')
    imageBitmap = await createImageBitmap(file)
    elements.canvas.width = imageBitmap.width
    elements.canvas.height = imageBitmap.height
    rois = []
    elements.serverScore.textContent = badgeText(null)
    setStatus(`loaded ${imageId} (${imageBitmap.width}x${imageBitmap.height})`, 'ok')
    await loadExisting()
  }

  function canvasPoint(event: MouseEvent) {
    const rect = elements.canvas.getBoundingClientRect()
    return {
      x: ((event.clientX - rect.left) * elements.canvas.width) / rect.width,
      y: ((event.clientY - rect.top) * elements.canvas.height) / rect.height,
    }
  }

  elements.canvas.onmousedown = event => {
    if (!imageBitmap) return
    const { x, y } = canvasPoint(event)
    const selected = rois.find(r => r.selected)
    const handle = selected ? hitHandle(selected, x, y) : null
    if (selected && handle) {
      drag = { kind: 'resize', roi: selected, handle }
      return
    }
    const hit = topRoi(rois, x, y)
    if (hit) {
      for (const roi of rois) roi.selected = roi === hit
      drag = { kind: 'move', roi: hit, lastX: x, lastY: y }
      redraw()
      return
    }
    const roi = makeRoi(x, y, 0, 0, 'manual', orNull(elements.labelSelect.value))
    roi.selected = true
    for (const other of rois) other.selected = false
    rois.push(roi)
    drag = { kind: 'draw', startX: x, startY: y, roi }
  }

  function orNull(value: string): string | null {
    return value === '' ? null : value
  }

  elements.canvas.onmousemove = event => {
    if (drag.kind === 'none') return
    const { x, y } = canvasPoint(event)
    if (drag.kind === 'draw') {
      Object.assign(drag.roi, boxFromDrag(drag.startX, drag.startY, x, y))
    } else if (drag.kind === 'move') {
      const moved = moveBy(drag.roi, x - drag.lastX, y - drag.lastY)
      Object.assign(drag.roi, { xCenter: moved.xCenter, yCenter: moved.yCenter })
      drag.lastX = x
      drag.lastY = y
    } else {
      const resized = resizeCorner(drag.roi, drag.handle, x, y)
      Object.assign(drag.roi, {
        xCenter: resized.xCenter,
        yCenter: resized.yCenter,
        width: resized.width,
        height: resized.height,
      })
    }
    redraw()
  }

  elements.canvas.onmouseup = () => {
    if (drag.kind === 'none') return
    const roi = drag.roi
    const wasDraw = drag.kind === 'draw'
    drag = { kind: 'none' }
    if (wasDraw && (roi.width < MIN_BOX_SIDE || roi.height < MIN_BOX_SIDE)) {
      rois = rois.filter(r => r !== roi)
      redraw()
      return
    }
    void refreshRoiScore(roi)
  }

  elements.canvas.ownerDocument.onkeydown = event => {
    if (event.key !== 'Delete' && event.key !== 'Backspace') return
    const target = event.target as HTMLElement | null
    if (target && (target.tagName === 'INPUT' || target.tagName === 'TEXTAREA')) return
    const before = rois.length
    rois = rois.filter(r => !r.selected)
    if (rois.length !== before) {
      event.preventDefault()
      redraw()
    }
  }

  elements.detectButton.onclick = () => void runPredict()
  elements.strategySelect.onchange = () => void runPredict()
  elements.aggregatorSelect.onchange = () => {
    redraw()
    void runPredict()
  }
  elements.clearDetectedButton.onclick = () => {
    rois = rois.filter(r => r.provenance === 'manual')
    redraw()
  }

  function currentAnnotation(): AnnotationIn {
    return {
      image_id: imageId,
      patient_id: elements.patientInput.value || 'unknown',
      path: imageId + '.png',
      capture: elements.captureSelect.value,
      skin_tone: elements.skinToneSelect.value,
      width: imageBitmap ? imageBitmap.width : 1,
      height: imageBitmap ? imageBitmap.height : 1,
      rois: rois.filter(r => r.provenance === 'manual').map(toWire),
      annotator: elements.annotatorInput.value || null,
    }
  }

  async function trySave(annotation: AnnotationIn): Promise<boolean> {
    try {
      const accepted = await client.saveAnnotation(annotation)
      setStatus(`saved ${accepted.image_id} revision ${accepted.revision}`, 'ok')
      return true
    } catch (error) {
      queue.push(annotation)
      setStatus(`offline, ${queue.size} save(s) queued (${describe(error)})`, 'offline')
      return false
    }
  }

  elements.saveButton.onclick = async () => {
    if (!imageBitmap) return
    await trySave(currentAnnotation())
  }

  setInterval(async () => {
    if (queue.size === 0) return
    const delivered = await queue.flush(async annotation => {
      await client.saveAnnotation(annotation)
    })
    if (delivered > 0) {
      setStatus(
        queue.size === 0 ? 'back online, queue flushed' : `offline, ${queue.size} save(s) queued`,
        queue.size === 0 ? 'ok' : 'offline',
      )
    }
  }, 5000)

  setStatus('pick an image to begin', 'ok')
  redraw()
  return { redraw }
}

function byId<T extends HTMLElement>(id: string): T {
  const element = document.getElementById(id)
  if (!element) throw new Error(`missing element #${id}`)
  return element as T
}

if (typeof document !== 'undefined' && document.getElementById('lesion-canvas')) {
  initApp(
    {
      canvas: byId('lesion-canvas'),
      fileInput: byId('file-input'),
      detectButton: byId('btn-detect'),
      saveButton: byId('btn-save'),
      clearDetectedButton: byId('btn-clear-detected'),
      strategySelect: byId('sel-strategy'),
      aggregatorSelect: byId('sel-aggregator'),
      captureSelect: byId('sel-capture'),
      skinToneSelect: byId('sel-skin-tone'),
      labelSelect: byId('sel-label'),
      patientInput: byId('inp-patient'),
      annotatorInput: byId('inp-annotator'),
      status: byId('status'),
      clientScore: byId('score-client'),
      serverScore: byId('score-server'),
      roiList: byId('roi-list'),
    },
    new ApiClient(''),
  )
}
