"""Long-lived generation service over a single bidirectional websocket.

Per session: one generation loop thread of execution, strictly ordered action
ingestion, and a bounded in-flight frame queue so a slow client pauses
generation instead of dropping frames. Discarded speculative frames are never
observable on the wire.
"""

from __future__ import annotations

import asyncio
import base64
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from PIL import Image

from .checkpoint import load_checkpoint
from .sampling import SampleConfig, Sampler, SamplerState
from .tokenizer import PatchTokenizer
from .world import ACTION_NAMES, WorldConfig, initial_state, render, action_id

_SAMPLE_KEYS = {"mode", "num_steps", "speculative_n", "use_kv_cache", "context_noise_t", "sigma_d"}


def png_b64(frame: np.ndarray) -> str:
    u8 = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class Session:
    session_id: str
    sampler: Sampler
    state: SamplerState
    tokenizer: PatchTokenizer
    grid_side: int
    last_activity: float = field(default_factory=time.monotonic)
    next_seq: int = 0
    frames_emitted: int = 0
    proposed: int = 0
    accepted: int = 0
    started: float = field(default_factory=time.monotonic)
    frame_times: list[float] = field(default_factory=list)

    def touch(self):
        self.last_activity = time.monotonic()

    def stats(self) -> dict:
        window = self.frame_times[-8:]
        if len(window) >= 2 and window[-1] > window[0]:
            fps = (len(window) - 1) / (window[-1] - window[0])
        else:
            fps = 0.0
        accept = self.accepted / self.proposed if self.proposed else 0.0
        return {"fps": round(fps, 3), "spec_accept": round(accept, 4)}


class SessionManager:
    """Loads checkpoints by id and owns session slots."""

    def __init__(self, checkpoint_dir: str | Path, max_sessions: int = 4,
                 idle_timeout: float = 300.0, world_config: WorldConfig = WorldConfig()):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.max_sessions = max_sessions
        self.idle_timeout = idle_timeout
        self.world_config = world_config
        self.sessions: dict[str, Session] = {}
        self._models: dict[str, tuple] = {}
        self._counter = 0

    def _load(self, checkpoint: str):
        if checkpoint not in self._models:
            path = self.checkpoint_dir / f"{checkpoint}.pt"
            if not path.exists():
                raise KeyError(checkpoint)
            model, stats, meta = load_checkpoint(path)
            self._models[checkpoint] = (model, PatchTokenizer(meta.get("patch", 8), stats), meta)
        return self._models[checkpoint]

    def expire_idle(self, now: float | None = None) -> list[str]:
        now = time.monotonic() if now is None else now
        stale = [sid for sid, s in self.sessions.items() if now - s.last_activity > self.idle_timeout]
        for sid in stale:
            del self.sessions[sid]
        return stale

    def open(self, checkpoint: str, config: dict, seed: int) -> tuple[Session, np.ndarray]:
        self.expire_idle()
        if len(self.sessions) >= self.max_sessions:
            raise RuntimeError("capacity")
        model, tokenizer, meta = self._load(checkpoint)
        unknown = set(config) - _SAMPLE_KEYS
        if unknown:
            raise ValueError(f"unknown sample config field(s) {sorted(unknown)}")
        defaults = {"mode": meta.get("mode", "ode"), "num_steps": meta.get("num_steps", 18),
                    "sigma_d": meta.get("sigma_d", 1.0)}
        sample_cfg = SampleConfig(**{**defaults, **config})

        frame0 = render(initial_state(seed, self.world_config), self.world_config)
        prompt = torch.from_numpy(tokenizer.encode(frame0))
        prompt = prompt.reshape(1, -1, prompt.shape[-1]).float()
        sampler = Sampler(model, sample_cfg)
        state = sampler.init_state(seed=seed, prompt_latents=prompt)

        self._counter += 1
        sid = f"s{self._counter:06d}"
        session = Session(
            session_id=sid, sampler=sampler, state=state,
            tokenizer=tokenizer, grid_side=model.config.grid_side,
        )
        self.sessions[sid] = session
        return session, frame0

    def close(self, session_id: str) -> None:
        self.sessions.pop(session_id, None)

    def run_round(self, session: Session, pending: list[int]) -> tuple[np.ndarray, int, int]:
        """One speculative round; returns (decoded frames, accepted, proposed)."""
        frames, m, n = session.sampler.generate_round(session.state, pending)
        lat = frames.reshape(m, session.grid_side, session.grid_side, -1).numpy()
        decoded = session.tokenizer.decode(lat)
        session.proposed += n
        session.accepted += m
        now = time.monotonic()
        session.frame_times.extend([now] * m)
        session.touch()
        return decoded, m, n


def create_app(checkpoint_dir: str | Path, max_sessions: int = 4, queue_bound: int = 8,
               idle_timeout: float = 300.0, world_config: WorldConfig = WorldConfig()) -> FastAPI:
    app = FastAPI()
    manager = SessionManager(checkpoint_dir, max_sessions, idle_timeout, world_config)
    app.state.manager = manager

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session: Session | None = None
        gen_task = send_task = None
        try:
            msg = await ws.receive_json()
            if msg.get("type") != "open":
                await ws.send_json({"type": "error", "code": "protocol",
                                    "message": "first message must be of type 'open'"})
                return
            try:
                session, frame0 = manager.open(
                    str(msg.get("checkpoint", "")), msg.get("config") or {}, int(msg.get("seed", 0))
                )
            except KeyError as exc:
                await ws.send_json({"type": "error", "code": "unknown_checkpoint",
                                    "message": f"no checkpoint named {exc.args[0]!r}"})
                return
            except RuntimeError:
                await ws.send_json({"type": "error", "code": "capacity",
                                    "message": f"server at capacity ({manager.max_sessions} sessions)"})
                return
            except (ValueError, TypeError) as exc:
                await ws.send_json({"type": "error", "code": "bad_config", "message": str(exc)})
                return

            await ws.send_json({"type": "opened", "session": session.session_id,
                                "vocab": list(ACTION_NAMES)})
            frames_q: asyncio.Queue = asyncio.Queue(maxsize=queue_bound)
            actions_q: asyncio.Queue = asyncio.Queue()
            await frames_q.put((0, frame0, session.stats()))
            session.frames_emitted = 1
            closing = asyncio.Event()

            async def generator():
                pending: list[int] = []
                while True:
                    if not pending:
                        item = await actions_q.get()
                        if item is None:
                            break
                        pending.append(item)
                    while True:
                        try:
                            item = actions_q.get_nowait()
                        except asyncio.QueueEmpty:
                            break
                        if item is None:
                            closing.set()
                            break
                        pending.append(item)
                    decoded, m, _ = await asyncio.to_thread(manager.run_round, session, pending)
                    del pending[:m]
                    for frame in decoded:
                        idx = session.frames_emitted
                        session.frames_emitted += 1
                        await frames_q.put((idx, frame, session.stats()))
                    if closing.is_set() and not pending:
                        break
                await frames_q.put(None)

            async def sender():
                while True:
                    item = await frames_q.get()
                    if item is None:
                        break
                    idx, frame, stats = item
                    await ws.send_json({"type": "frame", "index": idx,
                                        "png_b64": png_b64(frame), "stats": stats})

            gen_task = asyncio.create_task(generator())
            send_task = asyncio.create_task(sender())

            while True:
                msg = await ws.receive_json()
                kind = msg.get("type")
                if kind == "close":
                    await actions_q.put(None)
                    await gen_task
                    await send_task
                    await ws.send_json({"type": "closed"})
                    break
                if kind != "action":
                    await ws.send_json({"type": "error", "code": "protocol",
                                        "message": f"unexpected message type {kind!r}"})
                    continue
                seq = msg.get("seq")
                if seq != session.next_seq:
                    await ws.send_json({"type": "error", "code": "bad_sequence",
                                        "message": f"expected seq {session.next_seq}, got {seq}"})
                    continue
                name = msg.get("name")
                try:
                    aid = action_id(str(name))
                except ValueError:
                    await ws.send_json({"type": "error", "code": "unknown_action",
                                        "message": f"unknown action {name!r}",
                                        "vocab": list(ACTION_NAMES)})
                    continue
                session.next_seq += 1
                session.touch()
                await actions_q.put(aid)
        except WebSocketDisconnect:
            pass
        finally:
            for task in (gen_task, send_task):
                if task is not None and not task.done():
                    task.cancel()
            if session is not None:
                manager.close(session.session_id)

    return app
