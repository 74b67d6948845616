// Reconnect schedule: doubling delay, capped, reset on success.

export class Backoff {
  private attempt = 0;

  constructor(
    readonly initialMs: number = 250,
    readonly maxMs: number = 10_000,
  ) {}

  nextDelayMs(): number {
    const delay = Math.min(this.initialMs * 2 ** this.attempt, this.maxMs);
    this.attempt++;
    return delay;
  }

  reset(): void {
    this.attempt = 0;
  }
}
