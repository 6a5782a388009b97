"""Lossless patch tokenizer: frames to grids of continuous tokens and back.

Each non-overlapping patch is flattened to one token; tokens are centered by
per-channel means and scaled by a single global standard deviation so the
model always sees roughly unit-scale latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateDataError(ValueError):
    """Raised when fitted statistics are unusable (zero variance)."""


@dataclass(frozen=True)
class LatentStats:
    mean: tuple[float, float, float]  # per RGB channel
    sigma_d: float

    def __post_init__(self):
        if not self.sigma_d > 0:
            raise DegenerateDataError(f"sigma_d must be positive, got {self.sigma_d}")


IDENTITY_STATS = LatentStats(mean=(0.0, 0.0, 0.0), sigma_d=1.0)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/p, W/p, 3*p*p); exact inverse of unpatchify."""
    *lead, H, W, C = frames.shape
    if H % patch or W % patch:
        raise ValueError(f"frame size {H}x{W} not divisible by patch {patch}")
    h, w = H // patch, W // patch
    x = frames.reshape(*lead, h, patch, w, patch, C)
    x = np.moveaxis(x, -4, -3)  # (..., h, w, p, p, C)
    return x.reshape(*lead, h, w, patch * patch * C)


def unpatchify(latents: np.ndarray, patch: int) -> np.ndarray:
    *lead, h, w, d = latents.shape
    if d != patch * patch * 3:
        raise ValueError(f"token dim {d} does not match patch {patch} (expected {patch * patch * 3})")
    x = latents.reshape(*lead, h, w, patch, patch, 3)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h * patch, w * patch, 3)


class PatchTokenizer:
    """Bijective on its valid domain; decode clamps pixels to [0, 1]."""

    def __init__(self, patch: int = 8, stats: LatentStats = IDENTITY_STATS):
        self.patch = patch
        self.stats = stats
        # token layout is (py, px, channel), so the channel mean tiles over p*p
        self._mean_vec = np.tile(np.asarray(stats.mean, dtype=np.float32), patch * patch)

    @property
    def token_dim(self) -> int:
        return 3 * self.patch * self.patch

    def encode(self, frames: np.ndarray) -> np.ndarray:
        x = patchify(np.asarray(frames, dtype=np.float32), self.patch)
        return (x - self._mean_vec) / np.float32(self.stats.sigma_d)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        x = np.asarray(latents, dtype=np.float32) * np.float32(self.stats.sigma_d) + self._mean_vec
        return np.clip(unpatchify(x, self.patch), 0.0, 1.0)


def fit_stats(frames: np.ndarray, patch: int = 8) -> LatentStats:
    """Measure channel means and the global latent standard deviation.

    Only training-split frames may be passed in; validation and test frames
    must never contribute.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.size == 0:
        raise ValueError("cannot fit statistics on an empty dataset")
    lat = patchify(frames, patch)
    per_channel = lat.reshape(-1, patch * patch, 3).mean(axis=(0, 1))
    centered = lat - np.tile(per_channel, patch * patch)
    sigma = float(centered.std())
    if sigma == 0.0:
        raise DegenerateDataError("training latents have zero variance; sigma_d would be 0")
    return LatentStats(mean=tuple(float(m) for m in per_channel), sigma_d=sigma)
