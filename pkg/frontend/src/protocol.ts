// Wire protocol shared with the generation service: JSON messages over one
// persistent websocket.

export interface OpenMessage {
  type: "open";
  checkpoint: string;
  config: Record<string, unknown>;
  seed: number;
}

export interface ActionMessage {
  type: "action";
  seq: number;
  name: string;
}

export interface CloseMessage {
  type: "close";
}

export type ClientMessage = OpenMessage | ActionMessage | CloseMessage;

export interface OpenedMessage {
  type: "opened";
  session: string;
  vocab: string[];
}

export interface FrameStats {
  fps: number;
  spec_accept: number;
}

export interface FrameMessage {
  type: "frame";
  index: number;
  png_b64: string;
  stats: FrameStats;
}

export interface ErrorMessage {
  type: "error";
  code: string;
  message: string;
  vocab?: string[];
}

export interface ClosedMessage {
  type: "closed";
}

export type ServerMessage = OpenedMessage | FrameMessage | ErrorMessage | ClosedMessage;

export function parseServerMessage(raw: string): ServerMessage {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    throw new Error(`malformed server message: ${raw.slice(0, 80)}`);
  }
  const msg = data as { type?: unknown };
  if (
    typeof msg !== "object" ||
    msg === null ||
    typeof msg.type !== "string" ||
    !["opened", "frame", "error", "closed"].includes(msg.type)
  ) {
    throw new Error(`unknown server message type: ${String(msg?.type)}`);
  }
  if (msg.type === "frame") {
    const f = data as Partial<FrameMessage>;
    if (typeof f.index !== "number" || typeof f.png_b64 !== "string") {
      throw new Error("frame message missing index or png_b64");
    }
  }
  return data as ServerMessage;
}
