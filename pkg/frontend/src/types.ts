// Wire types mirroring the service's request/response bodies.

export const STRATEGIES = ['direct', 'two_stage', 'one_step_malignancy', 'one_step_subtype'] as const
export type Strategy = (typeof STRATEGIES)[number]

export const CAPTURES = ['dermoscopy', 'wide_field'] as const
export const SKIN_TONES = ['light', 'medium', 'dark', 'unknown'] as const

export const LESION_LABELS = ['MEL', 'NV', 'BCC', 'AKIEC', 'BKL', 'DF', 'VASC', 'OB'] as const
export type LesionLabel = (typeof LESION_LABELS)[number]

export interface RoiJson {
  x_center: number
  y_center: number
  width: number
  height: number
  label?: string | null
}

export interface DetectionJson {
  box: RoiJson
  score: number
  class_probs: number[]
}

export interface RoiScoreJson {
  box: RoiJson
  probability: number
}

export interface ImageScoreJson {
  image_id: string
  probability: number
  strategy: string
  aggregator: string | null
}

export interface PredictResponse {
  detections: DetectionJson[]
  roi_scores: RoiScoreJson[]
  image_score: ImageScoreJson
  clinical_probability?: number | null
  combined_probability?: number | null
}

export interface ModelSlotInfo {
  loaded: boolean
  kind?: string | null
  granularity?: string | null
  class_names?: string[] | null
}

export interface ModelInfo {
  slots: Record<string, ModelSlotInfo>
  strategies: string[]
  aggregators: string[]
}

export interface AnnotationIn {
  image_id: string
  patient_id: string
  path: string
  capture: string
  skin_tone: string
  width: number
  height: number
  rois: RoiJson[]
  annotator?: string | null
}

export interface AnnotationAccepted {
  image_id: string
  revision: number
}

export interface AnnotationHistory {
  image_id: string
  current: RoiJson[]
  revisions: Array<Record<string, unknown>>
}
