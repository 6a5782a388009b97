import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import { Client } from "../src/client.js";
import { RecordingHud, RecordingSink } from "./helpers.js";

class ScriptedSocket {
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onerror: (() => void) | null = null;
  onclose: (() => void) | null = null;
  sent: string[] = [];

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.onclose?.();
  }
}

describe("client connection lifecycle", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  function makeClient() {
    const sockets: ScriptedSocket[] = [];
    const client = new Client(
      new RecordingSink(),
      new RecordingHud(),
      { serverUrl: "ws://x/ws", checkpoint: "student", seed: 0, retryDelayMs: 500 },
      () => {
        const s = new ScriptedSocket();
        sockets.push(s);
        return s as unknown as WebSocket;
      },
    );
    return { client, sockets };
  }

  it("opens a session once the socket connects", () => {
    const { client, sockets } = makeClient();
    client.start();
    expect(sockets.length).toBe(1);
    sockets[0].onopen?.();
    expect(JSON.parse(sockets[0].sent[0]).type).toBe("open");
  });

  it("reconnects with a fresh session after a drop", () => {
    const { client, sockets } = makeClient();
    client.start();
    sockets[0].onopen?.();
    const first = client.controller;
    sockets[0].onclose?.();
    vi.advanceTimersByTime(600);
    expect(sockets.length).toBe(2);
    sockets[1].onopen?.();
    expect(client.controller).not.toBe(first); // no silent state reuse
    expect(JSON.parse(sockets[1].sent[0]).type).toBe("open");
  });

  it("does not reconnect after an explicit stop", () => {
    const { client, sockets } = makeClient();
    client.start();
    sockets[0].onopen?.();
    client.stop();
    sockets[0].onclose?.();
    vi.advanceTimersByTime(2000);
    expect(sockets.length).toBe(1);
  });
});
