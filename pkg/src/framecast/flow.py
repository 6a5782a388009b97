"""Velocity-matching training along the linear noise path.

Each frame in a training sequence gets its own timestep; the model regresses
the constant velocity (noise - clean) of the straight path between them.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .model import BlockCausalTransformer


class TrainingFault(RuntimeError):
    """Non-finite loss or gradient during optimization."""


def sample_timesteps(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Logit-normal draw: t = sigmoid(z), z ~ N(0, 1), independent per frame."""
    z = torch.randn(shape, generator=generator, dtype=dtype)
    return torch.sigmoid(z)


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """x_t = (1 - t) * x0 + t * eps, with per-frame t broadcast over tokens."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} must match")
    while t.dim() < x0.dim():
        t = t[..., None]
    return (1 - t) * x0 + t * eps


def velocity_target(x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return eps - x0


def fm_loss(
    model: BlockCausalTransformer,
    x0: torch.Tensor,
    eps: torch.Tensor,
    t: torch.Tensor,
    action_ids: torch.Tensor,
) -> torch.Tensor:
    """MSE between predicted and true velocity, averaged over every element."""
    xt = interpolate(x0, eps, t)
    v = model(xt, t, action_ids)
    loss = (v - velocity_target(x0, eps)).square().mean()
    if not torch.isfinite(loss):
        raise TrainingFault(f"non-finite flow-matching loss: {loss.item()}")
    return loss


def episode_condition_ids(actions: torch.Tensor, start_id: int) -> torch.Tensor:
    """Per-frame conditioning ids for (..., T-1) action streams: the first
    frame uses the reserved start id, frame k uses action k-1."""
    lead = actions.shape[:-1]
    start = torch.full((*lead, 1), start_id, dtype=actions.dtype)
    return torch.cat([start, actions], dim=-1)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    warmup_steps: int = 500
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 25
    ckpt_every: int = 500


def train(
    model: BlockCausalTransformer,
    latents: torch.Tensor,  # (E, T, P, D) encoded episodes
    cond_ids: torch.Tensor,  # (E, T) per-frame conditioning ids
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_fn=None,
    progress: bool = False,
) -> list[dict]:
    """Run the optimization loop; returns the step records it logged."""
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    records: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    n_episodes = latents.shape[0]
    started = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            warm = min(1.0, step / max(1, cfg.warmup_steps))
            for group in opt.param_groups:
                group["lr"] = cfg.lr * warm

            idx = torch.randint(0, n_episodes, (cfg.batch_size,), generator=gen)
            x0 = latents[idx]
            ids = cond_ids[idx]
            t = sample_timesteps(x0.shape[:2], gen)
            eps = torch.randn(x0.shape, generator=gen)

            loss = fm_loss(model, x0, eps, t, ids)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            if not math.isfinite(float(grad_norm)):
                raise TrainingFault(f"non-finite gradient norm at step {step}")
            opt.step()

            if step % cfg.log_every == 0 or step == cfg.steps:
                rec = {"step": step, "loss": float(loss), "grad_norm": float(grad_norm)}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if progress:
                    rate = step / (time.perf_counter() - started)
                    print(f"step {step}/{cfg.steps} loss {float(loss):.5f} ({rate:.2f} it/s)", flush=True)
            if checkpoint_fn and (step % cfg.ckpt_every == 0 or step == cfg.steps):
                checkpoint_fn(model, step)
    finally:
        if log_file:
            log_file.close()
    return records
