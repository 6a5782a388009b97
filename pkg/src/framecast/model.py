"""Block-causal diffusion transformer over per-frame token grids.

Attention is bidirectional inside a frame and causal across frames, so a
whole frame's tokens are predicted in parallel while each frame only sees
its predecessors. Conditioning on the per-frame timestep and action comes in
three interchangeable flavors: adaLN-zero (default), cross-attention, or an
extra in-context token per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

CONDITIONING_MODES = ("adaln_zero", "cross_attention", "in_context")


@dataclass
class ModelConfig:
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    mlp_dim: int = 512
    rope_split: tuple[int, int, int] = (16, 8, 8)
    conditioning: str = "adaln_zero"
    tokens_per_frame: int = 64
    token_dim: int = 192
    max_frames: int = 32
    num_actions: int = 6

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        n_t, n_h, n_w = self.rope_split
        if n_t + n_h + n_w != self.head_dim:
            raise ValueError(f"rope_split {self.rope_split} must sum to head_dim {self.head_dim}")
        if any(n % 2 for n in self.rope_split):
            raise ValueError(f"rope_split parts must be even, got {self.rope_split}")
        side = math.isqrt(self.tokens_per_frame)
        if side * side != self.tokens_per_frame:
            raise ValueError("tokens_per_frame must be a perfect square")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.tokens_per_frame)

    @property
    def start_action_id(self) -> int:
        # reserved conditioning id for the first frame of an episode
        return self.num_actions


# Named sizes: "desk" trains in well under an hour on a small CPU box; the
# larger presets mirror common scaling ladders and are not meant for CPU runs.
PRESETS: dict[str, dict] = {
    "desk": dict(hidden_dim=128, num_layers=4, num_heads=4, mlp_dim=512),
    "desk5m": dict(hidden_dim=256, num_layers=6, num_heads=8, mlp_dim=1024, rope_split=(16, 8, 8)),
    "130m": dict(hidden_dim=768, num_layers=12, num_heads=12, mlp_dim=2048, rope_split=(32, 16, 16)),
    "310m": dict(hidden_dim=1024, num_layers=16, num_heads=16, mlp_dim=2730, rope_split=(32, 16, 16)),
    "774m": dict(hidden_dim=1536, num_layers=18, num_heads=24, mlp_dim=4096, rope_split=(32, 16, 16)),
}


def config_from_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def build_block_causal_mask(num_frames: int, tokens_per_frame: int, device=None) -> torch.Tensor:
    """Boolean (L, L) matrix; allow[q, k] iff frame(k) <= frame(q)."""
    frames = torch.arange(num_frames, device=device).repeat_interleave(tokens_per_frame)
    return frames[None, :] <= frames[:, None]


def rope_angles(positions: torch.Tensor, rope_split: tuple[int, int, int], base: float = 10000.0) -> torch.Tensor:
    """Per-axis rotary angles, concatenated: (L, 3) -> (L, head_dim/2).

    Axis a with span n_a contributes n_a/2 frequencies; rotations on different
    axes act on disjoint slices of the head dimension.
    """
    if any(n % 2 for n in rope_split):
        raise ValueError(f"rope_split parts must be even, got {rope_split}")
    chunks = []
    for axis, n in enumerate(rope_split):
        half = n // 2
        inv_freq = base ** (-torch.arange(half, dtype=positions.dtype, device=positions.device) / half)
        chunks.append(positions[:, axis : axis + 1] * inv_freq[None, :])
    return torch.cat(chunks, dim=-1)


def apply_rope3d(x: torch.Tensor, positions: torch.Tensor, rope_split: tuple[int, int, int],
                 base: float = 10000.0) -> torch.Tensor:
    """Rotate query/key vectors (..., L, head_dim) by their (frame, row, col) positions."""
    angles = rope_angles(positions.to(x.dtype), rope_split, base)
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x.reshape(*x.shape[:-1], -1, 2).unbind(-1)
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.reshape(x.shape)


class KVCache:
    """Per-layer keys/values for committed context tokens, append-only."""

    def __init__(self, num_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * num_layers
        self.values: list[torch.Tensor | None] = [None] * num_layers
        self.frames = 0  # committed frames covered by the cache

    def __len__(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> None:
        if self.keys[layer] is None:
            self.keys[layer] = k
            self.values[layer] = v
        else:
            self.keys[layer] = torch.cat((self.keys[layer], k), dim=-2)
            self.values[layer] = torch.cat((self.values[layer], v), dim=-2)


def _timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of a continuous timestep in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[..., None] * 1000.0 * freqs
    return torch.cat([args.cos(), args.sin()], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden_dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(_timestep_embedding(t, self.freq_dim))


class Mlp(nn.Module):
    def __init__(self, hidden_dim: int, mlp_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(hidden_dim, mlp_dim)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(mlp_dim, hidden_dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class Block(nn.Module):
    """One transformer block; the conditioning pathway depends on the mode."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        affine = cfg.conditioning != "adaln_zero"
        self.norm1 = nn.LayerNorm(h, elementwise_affine=affine)
        self.norm2 = nn.LayerNorm(h, elementwise_affine=affine)
        self.qkv = nn.Linear(h, 3 * h)
        self.proj = nn.Linear(h, h)
        self.mlp = Mlp(h, cfg.mlp_dim)
        if cfg.conditioning == "adaln_zero":
            self.ada = nn.Sequential(nn.SiLU(), nn.Linear(h, 6 * h))
            nn.init.zeros_(self.ada[1].weight)
            nn.init.zeros_(self.ada[1].bias)
        elif cfg.conditioning == "cross_attention":
            self.norm_x = nn.LayerNorm(h)
            self.q_x = nn.Linear(h, h)
            self.kv_x = nn.Linear(h, 2 * h)
            self.proj_x = nn.Linear(h, h)

    def _attend(self, x, angles, allow, layer_idx, cache):
        B, L, h = x.shape
        nh, dh = self.cfg.num_heads, self.cfg.head_dim
        q, k, v = self.qkv(x).view(B, L, 3, nh, dh).permute(2, 0, 3, 1, 4).unbind(0)
        cos, sin = angles
        q = _rotate(q, cos, sin)
        k = _rotate(k, cos, sin)
        if cache is not None:
            if cache.append_tokens:
                cache.cache.append(layer_idx, k[:, :, : cache.append_tokens], v[:, :, : cache.append_tokens])
            past_k, past_v = cache.cache.keys[layer_idx], cache.cache.values[layer_idx]
            if past_k is not None and cache.past_tokens:
                k = torch.cat((past_k[:, :, : cache.past_tokens], k), dim=-2)
                v = torch.cat((past_v[:, :, : cache.past_tokens], v), dim=-2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~allow, float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, h))

    def _cross_attend(self, x, cond_kv):
        # queries grouped per frame attend to that frame's two conditioning
        # vectors (timestep, action); no positional rotation is involved
        B, L, h = x.shape
        T = cond_kv.shape[1]
        nh, dh = self.cfg.num_heads, self.cfg.head_dim
        q = self.q_x(self.norm_x(x)).view(B, T, -1, nh, dh).transpose(2, 3)
        k, v = self.kv_x(cond_kv).view(B, T, 2, 2, nh, dh).permute(3, 0, 1, 4, 2, 5).unbind(0)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        out = (att.softmax(dim=-1) @ v).transpose(2, 3).reshape(B, L, h)
        return self.proj_x(out)

    def forward(self, x, cond, angles, allow, layer_idx, cache):
        if self.cfg.conditioning == "adaln_zero":
            sh1, sc1, g1, sh2, sc2, g2 = self.ada(cond).chunk(6, dim=-1)
            x = x + g1 * self._attend(_modulate(self.norm1(x), sh1, sc1), angles, allow, layer_idx, cache)
            x = x + g2 * self.mlp(_modulate(self.norm2(x), sh2, sc2))
        else:
            x = x + self._attend(self.norm1(x), angles, allow, layer_idx, cache)
            if self.cfg.conditioning == "cross_attention":
                x = x + self._cross_attend(x, cond)
            x = x + self.mlp(self.norm2(x))
        return x


def _rotate(x, cos, sin):
    x1, x2 = x.reshape(*x.shape[:-1], -1, 2).unbind(-1)
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.reshape(x.shape)


@dataclass
class _CacheView:
    cache: KVCache
    past_tokens: int  # cached tokens the new queries may attend to
    append_tokens: int  # leading new tokens whose K/V should be appended


class BlockCausalTransformer(nn.Module):
    """Per-token velocity predictor v(x_t | context frames, t, action).

    forward() consumes (B, T, P, token_dim) noisy latents with per-frame
    timesteps and per-frame conditioning action ids (the id of the action
    leading into each frame; the first frame of an episode uses the reserved
    start id). Output matches the input grid.

    `causal=False` or `use_rope=False` exist for baselines and plumbing
    checks; production models keep both on.
    """

    def __init__(self, config: ModelConfig, causal: bool = True, use_rope: bool = True):
        super().__init__()
        self.config = config
        self.causal = causal
        self.use_rope = use_rope
        h = config.hidden_dim
        self.token_in = nn.Linear(config.token_dim, h)
        self.t_embed = TimestepEmbedder(h)
        self.action_embed = nn.Embedding(config.num_actions + 1, h)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.num_layers))
        affine = config.conditioning != "adaln_zero"
        self.norm_out = nn.LayerNorm(h, elementwise_affine=affine)
        if config.conditioning == "adaln_zero":
            self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(h, 2 * h))
            nn.init.zeros_(self.ada_out[1].weight)
            nn.init.zeros_(self.ada_out[1].bias)
        self.token_out = nn.Linear(h, config.token_dim)
        self._init_weights()

    def _init_weights(self):
        def init(m):
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        self.apply(init)
        nn.init.normal_(self.action_embed.weight, std=0.02)
        for blk in self.blocks:
            if self.config.conditioning == "adaln_zero":
                nn.init.zeros_(blk.ada[1].weight)
                nn.init.zeros_(blk.ada[1].bias)
        if self.config.conditioning == "adaln_zero":
            nn.init.zeros_(self.ada_out[1].weight)
            nn.init.zeros_(self.ada_out[1].bias)
        nn.init.zeros_(self.token_out.weight)
        nn.init.zeros_(self.token_out.bias)

    @property
    def seq_tokens_per_frame(self) -> int:
        return self.config.tokens_per_frame + (1 if self.config.conditioning == "in_context" else 0)

    def new_cache(self) -> KVCache:
        return KVCache(self.config.num_layers)

    def _positions(self, num_frames: int, start_frame: int, device, dtype) -> torch.Tensor:
        cfg = self.config
        side = cfg.grid_side
        rows = torch.arange(side, device=device).repeat_interleave(side)
        cols = torch.arange(side, device=device).repeat(side)
        if cfg.conditioning == "in_context":
            rows = torch.cat([rows, rows.new_zeros(1)])
            cols = torch.cat([cols, cols.new_zeros(1)])
        P = self.seq_tokens_per_frame
        frames = (torch.arange(num_frames, device=device) + start_frame).repeat_interleave(P)
        pos = torch.stack([frames, rows.repeat(num_frames), cols.repeat(num_frames)], dim=-1)
        if not self.use_rope:
            pos = torch.zeros_like(pos)
        return pos.to(dtype)

    def forward(
        self,
        latents: torch.Tensor,
        timesteps: torch.Tensor,
        action_ids: torch.Tensor,
        start_frame: int = 0,
        cache: KVCache | None = None,
        append_frames: int = 0,
        return_features: tuple[int, ...] = (),
    ):
        cfg = self.config
        B, T, P, D = latents.shape
        if P != cfg.tokens_per_frame or D != cfg.token_dim:
            raise ValueError(f"latent grid ({P}, {D}) does not match config "
                             f"({cfg.tokens_per_frame}, {cfg.token_dim})")
        if timesteps.shape != (B, T) or action_ids.shape != (B, T):
            raise ValueError("timesteps and action_ids must both have shape (batch, frames)")
        if int(action_ids.max()) > cfg.num_actions or int(action_ids.min()) < 0:
            raise ValueError(f"action id out of range [0, {cfg.num_actions}]")

        t_emb = self.t_embed(timesteps.to(latents.dtype))  # (B, T, h)
        a_emb = self.action_embed(action_ids)
        x = self.token_in(latents)  # (B, T, P, h)

        if cfg.conditioning == "adaln_zero":
            cond = torch.nn.functional.silu(t_emb + a_emb)[:, :, None, :]  # per frame, broadcast on tokens
        elif cfg.conditioning == "cross_attention":
            cond = torch.stack([t_emb, a_emb], dim=2)  # (B, T, 2, h)
        else:
            x = torch.cat([x, (t_emb + a_emb)[:, :, None, :]], dim=2)  # (B, T, P+1, h)
            cond = None

        Pf = self.seq_tokens_per_frame
        x = x.reshape(B, T * Pf, cfg.hidden_dim)
        if cfg.conditioning == "adaln_zero":
            cond = cond.expand(B, T, Pf, cfg.hidden_dim).reshape(B, T * Pf, cfg.hidden_dim)

        pos = self._positions(T, start_frame, latents.device, latents.dtype)
        angles = rope_angles(pos, cfg.rope_split)
        rot = (angles.cos(), angles.sin())

        past = 0
        view = None
        if cache is not None:
            past = cache.frames * Pf
            view = _CacheView(cache=cache, past_tokens=past, append_tokens=append_frames * Pf)
        if self.causal:
            new_mask = build_block_causal_mask(T, Pf, device=latents.device)
        else:
            new_mask = torch.ones(T * Pf, T * Pf, dtype=torch.bool, device=latents.device)
        if past:
            allow = torch.cat([torch.ones(T * Pf, past, dtype=torch.bool, device=latents.device), new_mask], dim=1)
        else:
            allow = new_mask

        features = {}
        for i, blk in enumerate(self.blocks):
            x = blk(x, cond, rot, allow, i, view)
            if i in return_features:
                features[i] = x.reshape(B, T, Pf, cfg.hidden_dim)
        if cache is not None and append_frames:
            cache.frames += append_frames

        if cfg.conditioning == "adaln_zero":
            sh, sc = self.ada_out(cond).chunk(2, dim=-1)
            x = _modulate(self.norm_out(x), sh, sc)
        else:
            x = self.norm_out(x)
        out = self.token_out(x).reshape(B, T, Pf, cfg.token_dim)[:, :, :P]
        if return_features:
            return out, features
        return out
