"""Single-file checkpoints: named parameter arrays plus a metadata header."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .model import BlockCausalTransformer, ModelConfig
from .tokenizer import LatentStats

SCHEMA_ID = "framecast-checkpoint-v1"


def save_checkpoint(
    path: str | Path,
    model: BlockCausalTransformer,
    stats: LatentStats,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    payload = {
        "schema": SCHEMA_ID,
        "model_config": asdict(model.config),
        "latent_stats": {"mean": list(stats.mean), "sigma_d": stats.sigma_d},
        "step": step,
        "extra": extra or {},
        "params": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[BlockCausalTransformer, LatentStats, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema") != SCHEMA_ID:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    mc = payload["model_config"]
    mc["rope_split"] = tuple(mc["rope_split"])
    model = BlockCausalTransformer(ModelConfig(**mc))
    model.load_state_dict(payload["params"])
    model.eval()
    stats = LatentStats(mean=tuple(payload["latent_stats"]["mean"]), sigma_d=payload["latent_stats"]["sigma_d"])
    meta = {"step": payload["step"], **payload["extra"]}
    return model, stats, meta
