// Pending-save queue for when the service is unreachable.  One slot per
// key: saving the same image twice while offline keeps only the newest
// payload, and flush preserves first-queued order.

export class OfflineQueue<T> {
  private items = new Map<string, T>()

  constructor(private readonly keyOf: (item: T) => string) {}

  get size(): number {
    return this.items.size
  }

  get keys(): string[] {
    return [...this.items.keys()]
  }

  push(item: T): void {
    const key = this.keyOf(item)
    // re-insert so an updated payload moves to the back of the line
    this.items.delete(key)
    this.items.set(key, item)
  }

  /**
   * Send queued items in order until one fails; failures stay queued.
   * Returns how many were delivered.
   */
  async flush(send: (item: T) => Promise<void>): Promise<number> {
    let delivered = 0
    for (const [key, item] of [...this.items]) {
      try {
        await send(item)
      } catch {
        return delivered
      }
      this.items.delete(key)
      delivered++
    }
    return delivered
  }
}
