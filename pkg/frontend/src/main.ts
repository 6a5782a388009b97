// Browser entry point: load the static config, wire keyboard, canvas, HUD.

import { Client, ClientConfig } from "./client.js";
import { DEFAULT_KEYMAP } from "./keymap.js";
import { CanvasSink, DomHud } from "./render.js";

interface StaticConfig {
  serverUrl: string;
  checkpoint: string;
  seed?: number;
  keymap?: Record<string, string>;
  sample?: Record<string, unknown>;
}

async function boot(): Promise<void> {
  const resp = await fetch("./config.json");
  const cfg = (await resp.json()) as StaticConfig;

  const canvas = document.getElementById("view") as HTMLCanvasElement;
  const hud = new DomHud(
    document.getElementById("stats")!,
    document.getElementById("banner")!,
    document.getElementById("help")!,
  );
  const clientCfg: ClientConfig = {
    serverUrl: cfg.serverUrl,
    checkpoint: cfg.checkpoint,
    seed: cfg.seed ?? 0,
    config: cfg.sample ?? {},
    keymap: cfg.keymap ?? DEFAULT_KEYMAP,
  };
  const client = new Client(new CanvasSink(canvas), hud, clientCfg);

  window.addEventListener("keydown", (e) => {
    client.keyDown(e.code);
    if (Object.keys(clientCfg.keymap!).includes(e.code)) e.preventDefault();
  });
  window.addEventListener("keyup", (e) => client.keyUp(e.code));
  window.addEventListener("beforeunload", () => client.stop());

  client.start();
}

void boot();
