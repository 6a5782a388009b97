"""On-disk episode datasets: `{split}/episode_{k}.npz` records plus a `meta.json` descriptor.

Records are standard npz archives (deflate-compressed, readable by np.load)
but written with pinned zip timestamps so a fixed seed reproduces the dataset
byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world import Episode, WorldConfig, WorldState, ACTION_NAMES, SPRITE_PALETTE, run_episode

META_VERSION = 1
SPLITS = ("train", "val", "test")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED, compresslevel=6) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name])
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


@dataclass
class DatasetMeta:
    version: int
    grid: int
    cell: int
    palette_size: int
    background_seed: int
    num_actions: int
    action_names: list[str]
    episode_length: int
    repeat_p: float
    seed: int
    split_sizes: dict[str, int]

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            grid=self.grid,
            cell=self.cell,
            palette_size=self.palette_size,
            background_seed=self.background_seed,
        )


def split_counts(num_episodes: int, val_frac: float = 0.1, test_frac: float = 0.1) -> dict[str, int]:
    if num_episodes < 3:
        return {"train": num_episodes, "val": 0, "test": 0}
    n_val = max(1, round(num_episodes * val_frac))
    n_test = max(1, round(num_episodes * test_frac))
    return {"train": num_episodes - n_val - n_test, "val": n_val, "test": n_test}


def save_episode(path: Path, episode: Episode) -> None:
    initial = np.array(
        [episode.initial.row, episode.initial.col, episode.initial.color, episode.initial.background_seed],
        dtype=np.int64,
    )
    frames_u8 = np.round(episode.frames * 255.0).astype(np.uint8)
    _write_npz(
        path,
        {
            "frames": frames_u8,
            "actions": episode.actions.astype(np.int64),
            "initial": initial,
            "seed": np.array([episode.seed], dtype=np.int64),
        },
    )


def load_episode(path: Path, config: WorldConfig) -> Episode:
    with np.load(path) as z:
        frames = z["frames"].astype(np.float32) / 255.0
        actions = z["actions"].astype(np.int64)
        row, col, color, bg = (int(v) for v in z["initial"])
        seed = int(z["seed"][0])
    return Episode(
        frames=frames,
        actions=actions,
        initial=WorldState(row=row, col=col, color=color, background_seed=bg),
        seed=seed,
        config=config,
    )


def generate_dataset(
    out_dir: str | Path,
    num_episodes: int,
    episode_length: int,
    seed: int = 0,
    repeat_p: float = 0.75,
    config: WorldConfig = WorldConfig(),
    val_frac: float = 0.1,
    test_frac: float = 0.1,
) -> DatasetMeta:
    """Simulate episodes and write them under out_dir with a train/val/test split."""
    if episode_length < 2:
        raise ValueError("episode_length must be at least 2")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    counts = split_counts(num_episodes, val_frac, test_frac)
    rng = np.random.default_rng(seed)
    episode_seeds = rng.integers(0, 2**31, size=num_episodes)

    k = 0
    for split in SPLITS:
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        for i in range(counts[split]):
            ep = run_episode(int(episode_seeds[k]), episode_length, config, repeat_p)
            save_episode(split_dir / f"episode_{i:05d}.npz", ep)
            k += 1

    meta = DatasetMeta(
        version=META_VERSION,
        grid=config.grid,
        cell=config.cell,
        palette_size=config.palette_size,
        background_seed=config.background_seed,
        num_actions=len(ACTION_NAMES),
        action_names=list(ACTION_NAMES),
        episode_length=episode_length,
        repeat_p=repeat_p,
        seed=seed,
        split_sizes=counts,
    )
    payload = meta.__dict__ | {"palette": SPRITE_PALETTE.tolist()}
    (root / "meta.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return meta


def load_meta(root: str | Path) -> DatasetMeta:
    payload = json.loads((Path(root) / "meta.json").read_text())
    if payload.get("version") != META_VERSION:
        raise ValueError(f"unsupported dataset version {payload.get('version')!r}")
    payload.pop("palette", None)
    return DatasetMeta(**payload)


def episode_paths(root: str | Path, split: str) -> list[Path]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return sorted((Path(root) / split).glob("episode_*.npz"))


def load_split(root: str | Path, split: str) -> list[Episode]:
    meta = load_meta(root)
    config = meta.world_config()
    return [load_episode(p, config) for p in episode_paths(root, split)]
