"""Autoregressive frame generation.

One engine drives four acceleration paths that compose freely: a multistep
ODE solver in clean-data parameterization, few-step sampling of a distilled
student, speculative multi-frame decoding under a repeated action, and a
key/value cache over committed context frames. Committed context is lightly
re-noised once per commit so the model never conditions on its own raw
outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .model import BlockCausalTransformer, KVCache
from .trigflow import f_clean, trig_to_fm_input, trigflow_F_from_v


class SamplingFault(RuntimeError):
    """Non-finite latents appeared during generation."""


@dataclass
class SampleConfig:
    mode: str = "ode"  # "ode" | "consistency"
    num_steps: int = 18
    t_max: float = 0.999
    context_noise_t: float = 0.05
    speculative_n: int = 1
    use_kv_cache: bool = True
    sigma_d: float = 1.0

    def __post_init__(self):
        if self.mode not in ("ode", "consistency"):
            raise ValueError(f"mode must be 'ode' or 'consistency', got {self.mode!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.speculative_n < 1:
            raise ValueError("speculative_n must be >= 1")
        if not 0.0 <= self.context_noise_t < 1.0:
            raise ValueError("context_noise_t must lie in [0, 1)")
        if not 0.0 < self.t_max < 1.0:
            raise ValueError("t_max must lie in (0, 1)")
        if self.context_noise_t >= self.min_sampling_t:
            raise ValueError(
                f"context_noise_t {self.context_noise_t} must stay below the "
                f"smallest positive sampling timestep {self.min_sampling_t:.4f}"
            )

    @property
    def min_sampling_t(self) -> float:
        if self.mode == "ode":
            return self.t_max / self.num_steps
        tp = math.pi / 2 / self.num_steps
        return math.sin(tp) / (math.sin(tp) + math.cos(tp))


def ode_schedule(num_steps: int, t_max: float = 0.999) -> torch.Tensor:
    """Uniform, strictly decreasing times from t_max down to exactly 0."""
    return torch.linspace(t_max, 0.0, num_steps + 1, dtype=torch.float64)


def consistency_schedule(num_steps: int) -> torch.Tensor:
    """Trig-domain times, linear over [0, pi/2], taken in decreasing order."""
    return torch.linspace(0.0, math.pi / 2, num_steps + 1, dtype=torch.float64)[1:].flip(0)


def denoise_to_x0(xt: torch.Tensor, t: float, v_pred: torch.Tensor) -> torch.Tensor:
    """Invert the linear interpolation given a velocity prediction.

    Equals (x_t - t * eps_hat) / (1 - t) with eps_hat = (1 - t) v + x_t,
    rearranged to the numerically benign x_t - t * v.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must lie in [0, 1), got {t}")
    return xt - t * v_pred


def inject_context_noise(context: torch.Tensor, context_noise_t: float, rng: torch.Generator) -> torch.Tensor:
    """Lightly corrupt context frames: (1 - t_c) * frame + t_c * fresh noise.

    Returns a new tensor; the caller's committed clean frames stay intact.
    """
    if not 0.0 <= context_noise_t < 1.0:
        raise ValueError("context_noise_t must lie in [0, 1)")
    if context_noise_t == 0.0:
        return context.clone()
    noise = torch.randn(context.shape, generator=rng, dtype=context.dtype)
    return (1 - context_noise_t) * context + context_noise_t * noise


@dataclass
class SpecStats:
    proposed: int = 0
    accepted: int = 0
    rounds: int = 0
    forward_passes: int = 0

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def as_dict(self) -> dict:
        return {
            "proposed": self.proposed,
            "accepted": self.accepted,
            "rounds": self.rounds,
            "forward_passes": self.forward_passes,
            "acceptance": self.acceptance,
        }


@dataclass
class SamplerState:
    """Single-owner decoding state; committed frames are never rolled back."""

    clean: list[torch.Tensor] = field(default_factory=list)  # committed (P, D) latents
    noised: list[torch.Tensor] = field(default_factory=list)  # fixed re-noised copies fed as context
    cond_ids: list[int] = field(default_factory=list)
    rng: torch.Generator = field(default_factory=torch.Generator)
    cache: KVCache | None = None

    @property
    def frame_index(self) -> int:
        return len(self.clean)

    def context_tensor(self) -> torch.Tensor | None:
        if not self.noised:
            return None
        return torch.stack(self.noised)


class Sampler:
    """Drives a trained velocity model through autoregressive decoding."""

    def __init__(self, model: BlockCausalTransformer, config: SampleConfig):
        self.model = model
        self.config = config
        if config.mode == "ode":
            self._schedule = ode_schedule(config.num_steps, config.t_max)
        else:
            self._schedule = consistency_schedule(config.num_steps)

    @torch.no_grad()
    def init_state(
        self,
        seed: int,
        prompt_latents: torch.Tensor | None = None,
        prompt_cond_ids: list[int] | None = None,
    ) -> SamplerState:
        rng = torch.Generator().manual_seed(seed)
        state = SamplerState(rng=rng)
        if self.config.use_kv_cache:
            state.cache = self.model.new_cache()
        if prompt_latents is not None:
            ids = prompt_cond_ids or [self.model.config.start_action_id] * prompt_latents.shape[0]
            for frame, cid in zip(prompt_latents, ids):
                self._commit(state, frame, int(cid))
        return state

    def _commit(self, state: SamplerState, frame: torch.Tensor, cond_id: int) -> None:
        state.clean.append(frame)
        state.noised.append(inject_context_noise(frame, self.config.context_noise_t, state.rng))
        state.cond_ids.append(cond_id)

    def _model_pass(self, state, chunk, t_chunk, chunk_ids, first_step):
        """One forward over [uncached context?; chunk]; returns chunk velocities."""
        cfg = self.config
        n = chunk.shape[0]
        ctx_count = state.frame_index
        tc = cfg.context_noise_t
        if cfg.use_kv_cache and state.cache is not None:
            new_ctx = ctx_count - state.cache.frames if first_step else 0
            ctx_frames = state.noised[ctx_count - new_ctx : ctx_count]
            seq = torch.stack([*ctx_frames, *chunk]) if new_ctx else chunk
            t_vec = torch.tensor([tc] * new_ctx + [t_chunk] * n, dtype=chunk.dtype)
            ids = torch.tensor(state.cond_ids[ctx_count - new_ctx : ctx_count] + chunk_ids)
            out = self.model(
                seq[None],
                t_vec[None],
                ids[None],
                start_frame=state.cache.frames,
                cache=state.cache,
                append_frames=new_ctx,
            )
        else:
            ctx = state.context_tensor()
            seq = torch.cat([ctx, chunk]) if ctx is not None else chunk
            t_vec = torch.tensor([tc] * ctx_count + [t_chunk] * n, dtype=chunk.dtype)
            ids = torch.tensor(state.cond_ids + chunk_ids)
            out = self.model(seq[None], t_vec[None], ids[None])
        return out[0, -n:]

    def _denoise_chunk(self, state: SamplerState, chunk_ids: list[int]) -> torch.Tensor:
        """Generate len(chunk_ids) frames jointly over the step schedule."""
        cfg = self.config
        n = len(chunk_ids)
        P, D = self.model.config.tokens_per_frame, self.model.config.token_dim
        eps = torch.stack([torch.randn(P, D, generator=state.rng) for _ in range(n)])
        sched = self._schedule

        if cfg.mode == "ode":
            x = eps
            x0 = None
            x0_prev = h_prev = None
            for k in range(cfg.num_steps):
                s, r = float(sched[k]), float(sched[k + 1])
                v = self._model_pass(state, x, s, chunk_ids, first_step=(k == 0))
                x0 = denoise_to_x0(x, s, v)
                x, h_prev = _solver_step(x, x0, s, r, x0_prev, h_prev)
                x0_prev = x0
                if not torch.isfinite(x).all():
                    raise SamplingFault(f"non-finite latents at step {k} (t={s:.4f})")
            return x
        else:
            sd = cfg.sigma_d
            x = sd * eps
            x0 = None
            for k in range(cfg.num_steps):
                tp = float(sched[k])
                t = math.sin(tp) / (math.sin(tp) + math.cos(tp))
                x_fm, _ = trig_to_fm_input(x, torch.tensor(tp, dtype=x.dtype), sd)
                v = self._model_pass(state, x_fm, t, chunk_ids, first_step=(k == 0))
                F = trigflow_F_from_v(x_fm, v, torch.tensor(t, dtype=x.dtype))
                x0 = f_clean(x, torch.tensor(tp, dtype=x.dtype), F, sd)
                if not torch.isfinite(x0).all():
                    raise SamplingFault(f"non-finite latents at step {k} (t'={tp:.4f})")
                if k + 1 < cfg.num_steps:
                    tp_next = float(sched[k + 1])
                    fresh = torch.stack([torch.randn(P, D, generator=state.rng) for _ in range(n)])
                    x = math.cos(tp_next) * x0 + math.sin(tp_next) * sd * fresh
            return x0

    @torch.no_grad()
    def sample_frame(self, state: SamplerState, action: int) -> torch.Tensor:
        """Generate and commit exactly one frame conditioned on one action."""
        frame = self._denoise_chunk(state, [int(action)])[0]
        self._commit(state, frame, int(action))
        return frame

    @torch.no_grad()
    def generate_round(self, state: SamplerState, pending: list[int],
                       full_chunk: bool = False) -> tuple[torch.Tensor, int, int]:
        """One speculative round over the head of a pending action list.

        Denoises a chunk under pending[0] repeated and commits the prefix
        whose true actions match it. With full_chunk the round always
        proposes N frames, discarding any that run past the known stream;
        otherwise the chunk is capped at the pending length (the streaming
        case, where unseen future actions should not burn compute). Returns
        the committed frames plus (accepted, proposed) counts.
        """
        if not pending:
            raise ValueError("action stream is empty")
        n = self.config.speculative_n if full_chunk else min(self.config.speculative_n, len(pending))
        cur = int(pending[0])
        chunk = self._denoise_chunk(state, [cur] * n)
        m = 1
        while m < min(n, len(pending)) and int(pending[m]) == cur:
            m += 1
        for j in range(m):
            self._commit(state, chunk[j], cur)
        return chunk[:m], m, n

    @torch.no_grad()
    def generate(self, state: SamplerState, actions) -> tuple[torch.Tensor, SpecStats]:
        """Consume an action stream speculatively; returns committed frames.

        The committed sequence length always equals the action count
        regardless of speculation depth or acceptance pattern.
        """
        actions = [int(a) for a in actions]
        if not actions:
            raise ValueError("action stream is empty")
        stats = SpecStats()
        committed: list[torch.Tensor] = []
        i = 0
        while i < len(actions):
            frames, m, n = self.generate_round(state, actions[i:], full_chunk=True)
            stats.rounds += 1
            stats.proposed += n
            stats.accepted += m
            stats.forward_passes += self.config.num_steps
            committed.extend(frames)
            i += m
        return torch.stack(committed), stats


def _solver_step(x, x0, s, r, x0_prev, h_prev):
    """Second-order multistep update in clean-data parameterization.

    Times follow the linear path (alpha = 1 - t, sigma = t); the final step to
    r = 0 and the first step fall back to first order.
    """
    if r <= 0.0:
        return x0, None
    h = math.log((1 - r) / r) - math.log((1 - s) / s)
    exp_term = ((1 - s) * r) / (s * (1 - r))  # e^{-h}, exact at the endpoints
    if x0_prev is None:
        d = x0
    else:
        rho = h_prev / h
        d = (1 + 1 / (2 * rho)) * x0 - (1 / (2 * rho)) * x0_prev
    return (r / s) * x + (1 - r) * (1 - exp_term) * d, h
