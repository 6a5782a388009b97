// Canvas frame sink and DOM HUD for the browser build.

import { FrameSink, HudSink } from "./controller.js";
import { HudMetrics } from "./hud.js";
import { Keymap } from "./keymap.js";

export class CanvasSink implements FrameSink {
  private ctx: CanvasRenderingContext2D;

  constructor(private canvas: HTMLCanvasElement, private scale = 6) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
    this.ctx.imageSmoothingEnabled = false;
  }

  async draw(pngB64: string, _index: number): Promise<void> {
    const img = new Image();
    const done = new Promise<void>((resolve, reject) => {
      img.onload = () => resolve();
      img.onerror = () => reject(new Error("png decode failed"));
    });
    img.src = `data:image/png;base64,${pngB64}`;
    await done;
    const w = img.width * this.scale;
    const h = img.height * this.scale;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.canvas.width = w;
      this.canvas.height = h;
    }
    this.ctx.drawImage(img, 0, 0, w, h);
  }
}

export class DomHud implements HudSink {
  constructor(
    private statsEl: HTMLElement,
    private bannerEl: HTMLElement,
    private helpEl: HTMLElement,
  ) {}

  update(m: HudMetrics, vocab: string[], keymap: Keymap): void {
    this.statsEl.textContent = [
      `fps ${m.fps.toFixed(1)}`,
      `spec accept ${(m.specAccept * 100).toFixed(0)}%`,
      `latency ${m.latencyMs.toFixed(0)} ms`,
      `frames ${m.framesShown}`,
      m.decodeFailures ? `decode failures ${m.decodeFailures}` : "",
      m.status,
    ].filter(Boolean).join("  |  ");
    if (vocab.length && !this.helpEl.textContent) {
      const keys = Object.entries(keymap).map(([k, a]) => `${k}→${a}`).join("  ");
      this.helpEl.textContent = `actions: ${vocab.join(", ")}\nkeys: ${keys}`;
    }
  }

  banner(text: string | null): void {
    this.bannerEl.textContent = text ?? "";
    this.bannerEl.style.display = text ? "block" : "none";
  }
}
