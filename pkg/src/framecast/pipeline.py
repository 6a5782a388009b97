"""End-to-end wiring between dataset, tokenizer, training, distillation, and
generation; shared by the CLI and the acceptance harness."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import load_meta, load_split
from .distill import DistillConfig, Distiller, distill
from .flow import TrainConfig, episode_condition_ids, train
from .model import BlockCausalTransformer, ModelConfig
from .sampling import SampleConfig, Sampler
from .tokenizer import LatentStats, PatchTokenizer, fit_stats
from .world import WorldConfig, initial_state, render


def encode_split(data_dir: str | Path, split: str, tokenizer: PatchTokenizer, start_id: int):
    """Encode a dataset split to (latents (E,T,P,D), cond_ids (E,T), episodes)."""
    episodes = load_split(data_dir, split)
    if not episodes:
        raise ValueError(f"dataset at {data_dir} has no episodes in split {split!r}")
    lat = np.stack([tokenizer.encode(ep.frames) for ep in episodes])
    E, T, h, w, d = lat.shape
    latents = torch.from_numpy(lat.reshape(E, T, h * w, d)).float()
    actions = torch.from_numpy(np.stack([ep.actions for ep in episodes])).long()
    cond_ids = episode_condition_ids(actions, start_id)
    return latents, cond_ids, episodes


def fit_train_stats(data_dir: str | Path, patch: int = 8) -> LatentStats:
    """Latent statistics from the training split only."""
    episodes = load_split(data_dir, "train")
    if not episodes:
        raise ValueError(f"dataset at {data_dir} has an empty training split")
    frames = np.concatenate([ep.frames for ep in episodes])
    return fit_stats(frames, patch)


def model_sigma_d(latents: torch.Tensor) -> float:
    """Scale constant of the data the model actually consumes (encoded latents)."""
    return float(latents.double().std())


def train_base(
    data_dir: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    patch: int = 8,
    progress: bool = False,
    init_from: str | Path | None = None,
    ckpt_name: str = "ckpt.pt",
) -> Path:
    """Fit stats, encode the train split, optimize, and checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = load_meta(data_dir)
    if init_from:
        model, stats, _ = load_checkpoint(init_from)
        model_cfg = model.config
    else:
        stats = fit_train_stats(data_dir, patch)
        model_cfg = dataclasses.replace(model_cfg, num_actions=meta.num_actions)
        torch.manual_seed(train_cfg.seed)
        model = BlockCausalTransformer(model_cfg)
    tokenizer = PatchTokenizer(patch, stats)
    latents, cond_ids, _ = encode_split(data_dir, "train", tokenizer, model_cfg.start_action_id)

    ckpt_path = out_dir / ckpt_name
    extra = {"patch": patch, "mode": "ode", "num_steps": 18,
             "sigma_d": model_sigma_d(latents),
             "train_config": dataclasses.asdict(train_cfg)}

    def save(m, step):
        save_checkpoint(ckpt_path, m, stats, step=step, extra=extra)

    model.train()
    train(model, latents, cond_ids, train_cfg, log_path=out_dir / "train_logs.jsonl",
          checkpoint_fn=save, progress=progress)
    model.eval()
    save(model, train_cfg.steps)
    return ckpt_path


def run_distill(
    teacher_ckpt: str | Path,
    data_dir: str | Path,
    distill_cfg: DistillConfig,
    out_dir: str | Path,
    progress: bool = False,
    ckpt_name: str = "student.pt",
) -> Path:
    """Distill the pretrained model into a few-step student checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    teacher, stats, meta = load_checkpoint(teacher_ckpt)
    patch = meta.get("patch", 8)
    tokenizer = PatchTokenizer(patch, stats)
    latents, cond_ids, _ = encode_split(data_dir, "train", tokenizer, teacher.config.start_action_id)
    sigma_d = model_sigma_d(latents)

    student = BlockCausalTransformer(teacher.config)
    student.load_state_dict(teacher.state_dict())
    student.train()
    distiller = Distiller(student, teacher, sigma_d=sigma_d, config=distill_cfg)

    ckpt_path = out_dir / ckpt_name
    extra = {"patch": patch, "mode": "consistency", "num_steps": 4, "sigma_d": sigma_d,
             "teacher": str(teacher_ckpt), "distill_config": dataclasses.asdict(distill_cfg)}

    def save(m, step):
        save_checkpoint(ckpt_path, m, stats, step=step, extra=extra)

    distill(distiller, latents, cond_ids, log_path=out_dir / "distill_logs.jsonl",
            checkpoint_fn=save, progress=progress)
    student.eval()
    save(student, distill_cfg.steps)
    return ckpt_path


def sample_config_for(meta: dict, **overrides) -> SampleConfig:
    base = {"mode": meta.get("mode", "ode"), "num_steps": meta.get("num_steps", 18),
            "sigma_d": meta.get("sigma_d", 1.0)}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SampleConfig(**base)


def generate_to_dir(
    ckpt_path: str | Path,
    action_ids: list[int],
    out_dir: str | Path,
    seed: int = 0,
    world_config: WorldConfig = WorldConfig(),
    **overrides,
) -> dict:
    """Roll out a trained model under an action stream and write PNG frames
    plus a trace manifest; byte-identical for identical inputs."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, stats, meta = load_checkpoint(ckpt_path)
    tokenizer = PatchTokenizer(meta.get("patch", 8), stats)
    cfg = sample_config_for(meta, **overrides)

    frame0 = render(initial_state(seed, world_config), world_config)
    prompt = torch.from_numpy(tokenizer.encode(frame0))
    prompt = prompt.reshape(1, -1, prompt.shape[-1]).float()
    sampler = Sampler(model, cfg)
    state = sampler.init_state(seed=seed, prompt_latents=prompt)
    latents, spec = sampler.generate(state, action_ids)
    side = model.config.grid_side
    frames = tokenizer.decode(latents.reshape(len(action_ids), side, side, -1).numpy())

    def write(idx: int, frame: np.ndarray):
        u8 = np.round(np.clip(frame, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(u8).save(out_dir / f"frame_{idx:05d}.png")

    write(0, frame0)
    for i, frame in enumerate(frames):
        write(i + 1, frame)

    trace = {
        "seed": seed,
        "actions": list(map(int, action_ids)),
        "sample_config": dataclasses.asdict(cfg),
        "checkpoint": str(ckpt_path),
        "frames": len(action_ids) + 1,
        "spec_stats": spec.as_dict(),
    }
    (out_dir / "trace.json").write_text(json.dumps(trace, indent=2, sort_keys=True) + "\n")
    return trace
