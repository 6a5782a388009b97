// Session orchestration, free of DOM and network specifics so the whole
// behavior runs against a recorded transcript in tests.

import { HudMetrics, HudTracker } from "./hud.js";
import { KeyTracker, Keymap } from "./keymap.js";
import {
  ClientMessage,
  ErrorMessage,
  FrameMessage,
  parseServerMessage,
  ServerMessage,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
}

export interface FrameSink {
  /** Draw a decoded frame; throw (or reject) on decode failure. */
  draw(pngB64: string, index: number): void | Promise<void>;
}

export interface HudSink {
  update(metrics: HudMetrics, vocab: string[], keymap: Keymap): void;
  banner(text: string | null): void;
}

export interface ControllerOptions {
  checkpoint: string;
  seed: number;
  config?: Record<string, unknown>;
  keymap?: Keymap;
  /** Actions kept in flight ahead of the last rendered frame (>= 1). One
   *  action is sent per frame slot; depth > 1 primes the speculation queue. */
  pipelineDepth?: number;
  clock?: () => number;
}

export class SessionController {
  readonly keys: KeyTracker;
  readonly hud: HudTracker;
  vocab: string[] = [];
  sessionId: string | null = null;
  closed = false;

  private socket: SocketLike | null = null;
  private nextSeq = 0;
  private nextFrameIndex = 0;
  private sentAt = new Map<number, number>();
  private keymap: Keymap;
  private depth: number;
  private clock: () => number;
  private protocolError: string | null = null;

  constructor(
    private sink: FrameSink,
    private hudSink: HudSink,
    private opts: ControllerOptions,
  ) {
    this.keymap = opts.keymap ?? {};
    this.keys = new KeyTracker(this.keymap);
    this.depth = Math.max(1, opts.pipelineDepth ?? 2);
    this.clock = opts.clock ?? (() => Date.now());
    this.hud = new HudTracker(this.clock);
  }

  attach(socket: SocketLike): void {
    this.socket = socket;
    this.hud.status = "opening";
    this.send({
      type: "open",
      checkpoint: this.opts.checkpoint,
      config: this.opts.config ?? {},
      seed: this.opts.seed,
    });
    this.refreshHud();
  }

  /** Feed one raw server message; returns the parsed message. */
  async onMessage(raw: string): Promise<ServerMessage> {
    const msg = parseServerMessage(raw);
    switch (msg.type) {
      case "opened":
        this.sessionId = msg.session;
        this.vocab = msg.vocab;
        this.hud.status = "live";
        break;
      case "frame":
        await this.onFrame(msg);
        break;
      case "error":
        this.onError(msg);
        break;
      case "closed":
        this.closed = true;
        this.hud.status = "closed";
        break;
    }
    this.refreshHud();
    return msg;
  }

  private async onFrame(msg: FrameMessage): Promise<void> {
    if (msg.index !== this.nextFrameIndex) {
      // committed frames must arrive gapless and in order
      this.protocolError = `frame index ${msg.index} arrived, expected ${this.nextFrameIndex}`;
      this.hudSink.banner(this.protocolError);
      throw new Error(this.protocolError);
    }
    this.nextFrameIndex += 1;
    const sent = this.sentAt.get(msg.index - 1);
    const latency = sent === undefined ? undefined : this.clock() - sent;
    try {
      await this.sink.draw(msg.png_b64, msg.index);
      this.hud.frameArrived(msg.stats?.spec_accept ?? 0, latency);
    } catch {
      this.hud.decodeFailed();
    }
    // one action per generated frame slot, sampled from current key state
    while (this.nextSeq < this.nextFrameIndex - 1 + this.depth && !this.closed) {
      this.sendAction();
    }
  }

  private onError(msg: ErrorMessage): void {
    this.hudSink.banner(`${msg.code}: ${msg.message}`);
    if (msg.code === "unknown_checkpoint" || msg.code === "capacity") {
      this.hud.status = "rejected";
    }
  }

  private sendAction(): void {
    const name = this.keys.sample();
    this.sentAt.set(this.nextSeq, this.clock());
    this.send({ type: "action", seq: this.nextSeq, name });
    this.nextSeq += 1;
  }

  requestClose(): void {
    if (!this.closed) this.send({ type: "close" });
  }

  lastProtocolError(): string | null {
    return this.protocolError;
  }

  private send(msg: ClientMessage): void {
    this.socket?.send(JSON.stringify(msg));
  }

  private refreshHud(): void {
    this.hudSink.update(this.hud.metrics(), this.vocab, this.keymap);
  }
}
