// Thin fetch wrapper over the service endpoints.  The fetch function is
// injectable so tests can run without a server.

import type {
  AnnotationAccepted,
  AnnotationHistory,
  AnnotationIn,
  ModelInfo,
  PredictResponse,
  RoiScoreJson,
  Strategy,
} from './types.js'
import type { Aggregator } from './aggregate.js'

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`)
  }
}

async function fail(response: Response): Promise<never> {
  let detail = response.statusText
  try {
    const body = await response.json()
    if (body && body.detail) detail = typeof body.detail === 'string' ? body.detail : JSON.stringify(body.detail)
  } catch {
    // non-JSON error body, keep the status text
  }
  throw new ApiError(response.status, detail)
}

export interface PredictOptions {
  strategy: Strategy
  aggregator: Aggregator
  imageId?: string
  covariates?: Record<string, unknown>
}

export class ApiClient {
  constructor(
    readonly baseUrl = '',
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path)
    if (!response.ok) await fail(response)
    return response.json() as Promise<T>
  }

  async health(): Promise<boolean> {
    try {
      const response = await this.fetchFn(this.baseUrl + '/health')
      return response.ok
    } catch {
      return false
    }
  }

  modelInfo(): Promise<ModelInfo> {
    return this.get('/model-info')
  }

  async predict(image: Blob, options: PredictOptions): Promise<PredictResponse> {
    const form = new FormData()
    form.append('image', image, 'upload.png')
    form.append('strategy', options.strategy)
    form.append('aggregator', options.aggregator)
    if (options.imageId) form.append('image_id', options.imageId)
    if (options.covariates) form.append('covariates', JSON.stringify(options.covariates))
    const response = await this.fetchFn(this.baseUrl + '/predict', { method: 'POST', body: form })
    if (!response.ok) await fail(response)
    return response.json()
  }

  async scoreRoi(
    image: Blob,
    box: { xCenter: number; yCenter: number; width: number; height: number },
    imageId?: string,
  ): Promise<RoiScoreJson> {
    const form = new FormData()
    form.append('image', image, 'upload.png')
    form.append('x_center', String(box.xCenter))
    form.append('y_center', String(box.yCenter))
    form.append('width', String(box.width))
    form.append('height', String(box.height))
    if (imageId) form.append('image_id', imageId)
    const response = await this.fetchFn(this.baseUrl + '/score-roi', { method: 'POST', body: form })
    if (!response.ok) await fail(response)
    return response.json()
  }

  async saveAnnotation(annotation: AnnotationIn): Promise<AnnotationAccepted> {
    const response = await this.fetchFn(this.baseUrl + '/annotations', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(annotation),
    })
    if (!response.ok) await fail(response)
    return response.json()
  }

  /** Resolves to null when the image has no saved annotations yet. */
  async getAnnotation(imageId: string): Promise<AnnotationHistory | null> {
    const response = await this.fetchFn(this.baseUrl + '/annotations/' + encodeURIComponent(imageId))
    if (response.status === 404) return null
    if (!response.ok) await fail(response)
    return response.json()
  }
}
