// Connection lifecycle: retries with visible status, and a dropped link
// always resumes with a brand-new session rather than silently reusing state.

import { SessionController, FrameSink, HudSink, ControllerOptions } from "./controller.js";

export interface ClientConfig extends ControllerOptions {
  serverUrl: string;
  retryDelayMs?: number;
}

export interface WebSocketFactory {
  (url: string): WebSocket;
}

export class Client {
  controller: SessionController | null = null;
  private stopped = false;

  constructor(
    private sink: FrameSink,
    private hudSink: HudSink,
    private config: ClientConfig,
    private makeSocket: WebSocketFactory = (url) => new WebSocket(url),
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.requestClose();
  }

  private connect(): void {
    const ws = this.makeSocket(this.config.serverUrl);
    const controller = new SessionController(this.sink, this.hudSink, this.config);
    this.controller = controller;
    this.hudSink.banner(null);

    ws.onopen = () => controller.attach({
      send: (data) => ws.send(data),
      close: () => ws.close(),
    });
    ws.onmessage = (ev) => {
      void controller.onMessage(String(ev.data)).catch((err) => {
        this.hudSink.banner(String(err));
        ws.close();
      });
    };
    ws.onerror = () => {
      this.hudSink.banner("connection error");
    };
    ws.onclose = () => {
      if (this.stopped || controller.closed) return;
      const delay = this.config.retryDelayMs ?? 1000;
      this.hudSink.banner(`connection lost; retrying in ${delay / 1000}s`);
      setTimeout(() => {
        if (!this.stopped) this.connect(); // fresh session on reconnect
      }, delay);
    };
  }

  keyDown(code: string): void {
    this.controller?.keys.keyDown(code);
  }

  keyUp(code: string): void {
    this.controller?.keys.keyUp(code);
  }
}
