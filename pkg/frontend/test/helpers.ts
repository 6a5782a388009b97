import { FrameSink, HudSink, SessionController, ControllerOptions, SocketLike } from "../src/controller.js";
import { HudMetrics } from "../src/hud.js";

export class RecordingSink implements FrameSink {
  draws: { index: number; png: string }[] = [];
  failOn = new Set<number>();

  draw(pngB64: string, index: number): void {
    if (this.failOn.has(index)) throw new Error("decode failure");
    this.draws.push({ index, png: pngB64 });
  }
}

export class RecordingHud implements HudSink {
  updates: HudMetrics[] = [];
  banners: (string | null)[] = [];
  vocab: string[] = [];

  update(m: HudMetrics, vocab: string[]): void {
    this.updates.push(m);
    this.vocab = vocab;
  }

  banner(text: string | null): void {
    this.banners.push(text);
  }

  lastBanner(): string | null {
    return this.banners.length ? this.banners[this.banners.length - 1] : null;
  }
}

export class MockSocket implements SocketLike {
  sent: string[] = [];

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {}

  sentActions(): { seq: number; name: string }[] {
    return this.sent
      .map((s) => JSON.parse(s))
      .filter((m) => m.type === "action");
  }
}

export interface Harness {
  controller: SessionController;
  socket: MockSocket;
  sink: RecordingSink;
  hud: RecordingHud;
  clock: { now: number; tick(ms: number): void };
}

export function makeHarness(opts: Partial<ControllerOptions> = {}): Harness {
  const clock = {
    now: 1000,
    tick(ms: number) {
      this.now += ms;
    },
  };
  const sink = new RecordingSink();
  const hud = new RecordingHud();
  const controller = new SessionController(sink, hud, {
    checkpoint: "student",
    seed: 0,
    keymap: { ArrowRight: "right", ArrowLeft: "left", Space: "paint" },
    clock: () => clock.now,
    ...opts,
  });
  const socket = new MockSocket();
  controller.attach(socket);
  return { controller, socket, sink, hud, clock };
}
