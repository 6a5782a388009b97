"""Deterministic sprite world: a single colored block moving on a textured grid.

Serves three roles: dataset generator for training, exact simulator for
evaluation, and oracle for scoring whether generated frames follow actions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

ACTION_NAMES = ("noop", "up", "down", "left", "right", "paint")
NUM_ACTIONS = len(ACTION_NAMES)

# Bright, well-separated sprite colors; the background stays dim so the
# per-cell color response is unambiguous.
SPRITE_PALETTE = np.array(
    [
        [230, 40, 40],
        [40, 220, 60],
        [70, 90, 235],
    ],
    dtype=np.uint8,
)

_MOVES = {
    "up": (-1, 0),
    "down": (1, 0),
    "left": (0, -1),
    "right": (0, 1),
}


def action_id(name: str) -> int:
    try:
        return ACTION_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown action name {name!r}; vocabulary: {ACTION_NAMES}") from None


@dataclass(frozen=True)
class WorldConfig:
    grid: int = 8
    cell: int = 8
    palette_size: int = 3
    background_seed: int = 7

    @property
    def frame_size(self) -> int:
        return self.grid * self.cell


@dataclass(frozen=True)
class WorldState:
    row: int
    col: int
    color: int
    background_seed: int
    step: int = 0


def initial_state(seed: int, config: WorldConfig = WorldConfig()) -> WorldState:
    rng = np.random.default_rng(seed)
    return WorldState(
        row=int(rng.integers(0, config.grid)),
        col=int(rng.integers(0, config.grid)),
        color=int(rng.integers(0, config.palette_size)),
        background_seed=config.background_seed,
        step=0,
    )


def transition(state: WorldState, action: int, config: WorldConfig = WorldConfig()) -> WorldState:
    """Apply one action. Pure: identical inputs give identical successors."""
    if not 0 <= action < NUM_ACTIONS:
        raise ValueError(f"unknown action id {action}; vocabulary size is {NUM_ACTIONS}")
    name = ACTION_NAMES[action]
    row, col, color = state.row, state.col, state.color
    if name in _MOVES:
        dr, dc = _MOVES[name]
        row = min(max(row + dr, 0), config.grid - 1)
        col = min(max(col + dc, 0), config.grid - 1)
    elif name == "paint":
        color = (color + 1) % config.palette_size
    return replace(state, row=row, col=col, color=color, step=state.step + 1)


@lru_cache(maxsize=8)
def _background(seed: int, grid: int, cell: int) -> np.ndarray:
    """Fixed dim texture keyed by seed: per-cell shading on a checker base."""
    rng = np.random.default_rng(seed)
    base = rng.integers(25, 60, size=3)
    alt = base + rng.integers(20, 45, size=3)
    shade = rng.integers(0, 25, size=(grid, grid, 1))
    rows, cols = np.indices((grid, grid))
    checker = ((rows + cols) % 2)[..., None]
    cells = np.where(checker == 0, base, alt) + shade
    img = np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)
    return np.clip(img, 0, 255).astype(np.uint8)


def render_u8(state: WorldState, config: WorldConfig = WorldConfig()) -> np.ndarray:
    """Render to uint8 (H, W, 3). The sprite fills exactly one grid cell."""
    img = _background(state.background_seed, config.grid, config.cell).copy()
    c = config.cell
    r0, c0 = state.row * c, state.col * c
    img[r0 : r0 + c, c0 : c0 + c] = SPRITE_PALETTE[state.color]
    return img


def render(state: WorldState, config: WorldConfig = WorldConfig()) -> np.ndarray:
    """Render to float32 RGB in [0, 1]."""
    return render_u8(state, config).astype(np.float32) / 255.0


def locate_sprite(frame: np.ndarray, color: int, config: WorldConfig = WorldConfig()) -> tuple[int, int]:
    """Nearest-cell argmax of the response to the given palette color.

    The response of a cell is the negative mean squared distance of its
    pixels to the palette color, so the best-matching cell wins even on
    images the simulator never produced.
    """
    g, c = config.grid, config.cell
    target = SPRITE_PALETTE[color].astype(np.float32) / 255.0
    cells = frame[: g * c, : g * c].reshape(g, c, g, c, 3)
    dist = ((cells - target) ** 2).mean(axis=(1, 3, 4))
    idx = int(np.argmin(dist))
    return idx // g, idx % g


def action_following_accuracy(
    frames: Sequence[np.ndarray],
    actions: Sequence[int],
    initial: WorldState,
    config: WorldConfig = WorldConfig(),
) -> float:
    """Fraction of frames whose sprite cell matches the true simulator.

    frames[k] is scored against the state reached by applying actions[:k+1]
    to the initial state.
    """
    if len(frames) != len(actions):
        raise ValueError(f"got {len(frames)} frames for {len(actions)} actions")
    if len(frames) == 0:
        return 0.0
    state = initial
    hits = 0
    for frame, action in zip(frames, actions):
        state = transition(state, int(action), config)
        if locate_sprite(np.asarray(frame), state.color, config) == (state.row, state.col):
            hits += 1
    return hits / len(frames)


def sample_actions(n: int, rng: np.random.Generator, repeat_p: float = 0.75) -> np.ndarray:
    """First-order Markov stream: keep the previous action with probability
    repeat_p, otherwise resample uniformly among the other actions.

    Run lengths are then exactly geometric with mean 1 / (1 - repeat_p).
    """
    out = np.empty(n, dtype=np.int64)
    prev = int(rng.integers(0, NUM_ACTIONS))
    out[0] = prev
    for i in range(1, n):
        if rng.random() >= repeat_p:
            step = int(rng.integers(1, NUM_ACTIONS))
            prev = (prev + step) % NUM_ACTIONS
        out[i] = prev
    return out


@dataclass
class Episode:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    actions: np.ndarray  # (T - 1,) int64
    initial: WorldState
    seed: int
    config: WorldConfig


def run_episode(
    seed: int,
    length: int,
    config: WorldConfig = WorldConfig(),
    repeat_p: float = 0.75,
) -> Episode:
    """Roll the simulator for `length` frames under the Markov action policy."""
    if length < 2:
        raise ValueError("episode length must be at least 2")
    rng = np.random.default_rng(seed)
    first = initial_state(int(rng.integers(0, 2**31)), config)
    actions = sample_actions(length - 1, rng, repeat_p)
    frames = np.empty((length, config.frame_size, config.frame_size, 3), dtype=np.float32)
    frames[0] = render(first, config)
    state = first
    for i, a in enumerate(actions):
        state = transition(state, int(a), config)
        frames[i + 1] = render(state, config)
    return Episode(frames=frames, actions=actions, initial=first, seed=seed, config=config)
