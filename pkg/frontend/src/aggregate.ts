// Client-side copy of the server's image-level aggregation rules, so
// what-if edits (add/delete a box) update the header score without a
// network round trip.  Kept in lockstep with the service through the
// shared fixture suite in fixtures/aggregation_parity.json.

export const AGGREGATORS = ['average', 'maximum', 'noisy_or'] as const
export type Aggregator = (typeof AGGREGATORS)[number]

export function aggregate(probs: number[], kind: Aggregator, emptyProbability = 0.0): number {
  for (const p of probs) {
    if (!Number.isFinite(p) || p < 0 || p > 1) {
      throw new Error(`probability out of [0,1]: ${p}`)
    }
  }
  if (probs.length === 0) return emptyProbability
  if (probs.length === 1) return probs[0]
  switch (kind) {
    case 'average':
      return probs.reduce((a, b) => a + b, 0) / probs.length
    case 'maximum':
      return probs.reduce((a, b) => (b > a ? b : a), 0)
    case 'noisy_or': {
      // probability that at least one lesion is malignant, lesions independent
      let survive = 1.0
      for (const p of probs) survive *= 1.0 - p
      return 1.0 - survive
    }
  }
}
