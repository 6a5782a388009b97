// Rolling HUD metrics computed client-side from frame arrivals.

export interface HudMetrics {
  fps: number;
  specAccept: number;
  latencyMs: number;
  framesShown: number;
  decodeFailures: number;
  status: string;
}

const WINDOW = 12;

export class HudTracker {
  private arrivals: number[] = [];
  private latencies: number[] = [];
  framesShown = 0;
  decodeFailures = 0;
  specAccept = 0;
  status = "connecting";

  constructor(private clock: () => number = () => Date.now()) {}

  frameArrived(specAccept: number, latencyMs?: number): void {
    this.framesShown += 1;
    this.specAccept = specAccept;
    this.arrivals.push(this.clock());
    if (this.arrivals.length > WINDOW) this.arrivals.shift();
    if (latencyMs !== undefined) {
      this.latencies.push(latencyMs);
      if (this.latencies.length > WINDOW) this.latencies.shift();
    }
  }

  decodeFailed(): void {
    this.decodeFailures += 1;
  }

  metrics(): HudMetrics {
    let fps = 0;
    if (this.arrivals.length >= 2) {
      const span = this.arrivals[this.arrivals.length - 1] - this.arrivals[0];
      if (span > 0) fps = ((this.arrivals.length - 1) * 1000) / span;
    }
    const latencyMs = this.latencies.length
      ? this.latencies.reduce((a, b) => a + b, 0) / this.latencies.length
      : 0;
    return {
      fps,
      specAccept: this.specAccept,
      latencyMs,
      framesShown: this.framesShown,
      decodeFailures: this.decodeFailures,
      status: this.status,
    };
  }
}
