"""Benchmark harness: rollout quality, throughput, and ablation tables.

Rows mirror the structure of the usual ablations (speculation depth, action
conditioning, distillation noise distribution, cache on/off); speedups are
always quoted against an explicitly named baseline row measured on the same
machine with interleaved trials.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .metrics import interleaved_fps, measure_fps, psnr, ssim
from .model import BlockCausalTransformer
from .sampling import SampleConfig, Sampler, SpecStats
from .tokenizer import LatentStats, PatchTokenizer
from .world import Episode, WorldConfig, action_following_accuracy, initial_state, render, sample_actions


@dataclass
class BenchReport:
    name: str
    fps: float | None = None
    speedup: float | None = None
    baseline: str | None = None
    psnr_mean: float | None = None
    ssim_mean: float | None = None
    action_accuracy: float | None = None
    spec_stats: dict | None = None
    config: dict = field(default_factory=dict)
    absent: bool = False
    # reserved for forks that add learned-feature metrics
    fvd: float | None = None
    lpips: float | None = None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def rollout_episode(
    model: BlockCausalTransformer,
    tokenizer: PatchTokenizer,
    sample_cfg: SampleConfig,
    episode: Episode,
    seed: int = 0,
) -> tuple[np.ndarray, SpecStats]:
    """Generate the episode's frames from its first frame and action stream."""
    prompt = torch.from_numpy(tokenizer.encode(episode.frames[0]))
    prompt = prompt.reshape(1, -1, prompt.shape[-1]).float()
    sampler = Sampler(model, sample_cfg)
    state = sampler.init_state(seed=seed, prompt_latents=prompt)
    latents, stats = sampler.generate(state, episode.actions.tolist())
    side = tokenizer_grid_side(model)
    lat = latents.reshape(latents.shape[0], side, side, -1).numpy()
    return tokenizer.decode(lat), stats


def tokenizer_grid_side(model: BlockCausalTransformer) -> int:
    return model.config.grid_side


def evaluate_quality(
    model: BlockCausalTransformer,
    tokenizer: PatchTokenizer,
    sample_cfg: SampleConfig,
    episodes: list[Episode],
    seed: int = 0,
    max_episodes: int | None = None,
) -> dict:
    """Mean PSNR/SSIM against ground truth and oracle action accuracy."""
    eps = episodes[:max_episodes] if max_episodes else episodes
    accs, psnrs, ssims = [], [], []
    spec = SpecStats()
    for k, ep in enumerate(eps):
        frames, stats = rollout_episode(model, tokenizer, sample_cfg, ep, seed=seed + k)
        accs.append(action_following_accuracy(frames, ep.actions, ep.initial, ep.config))
        psnrs.append(np.mean([psnr(f, g) for f, g in zip(frames, ep.frames[1:])]))
        ssims.append(np.mean([ssim(f, g) for f, g in zip(frames, ep.frames[1:])]))
        spec.proposed += stats.proposed
        spec.accepted += stats.accepted
        spec.rounds += stats.rounds
        spec.forward_passes += stats.forward_passes
    return {
        "action_accuracy": float(np.mean(accs)),
        "psnr_mean": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
        "spec_stats": spec.as_dict(),
        "episodes": len(eps),
    }


def make_bench_session(
    model: BlockCausalTransformer,
    tokenizer: PatchTokenizer,
    sample_cfg: SampleConfig,
    actions: np.ndarray,
    world_config: WorldConfig = WorldConfig(),
    seed: int = 0,
):
    """Session factory for measure_fps: each session replays the same trace."""
    prompt_frame = render(initial_state(seed, world_config), world_config)
    prompt = torch.from_numpy(tokenizer.encode(prompt_frame))
    prompt = prompt.reshape(1, -1, prompt.shape[-1]).float()

    def make():
        sampler = Sampler(model, sample_cfg)
        state = sampler.init_state(seed=seed, prompt_latents=prompt)
        pos = 0

        def step(n: int) -> int:
            nonlocal pos
            if pos + n > len(actions):
                raise RuntimeError(f"trace exhausted: need {n} more actions at {pos}/{len(actions)}")
            frames, _ = sampler.generate(state, actions[pos : pos + n].tolist())
            pos += n
            return int(frames.shape[0])

        return step

    return make


def bench_trace(length: int, repeat_p: float = 0.9, seed: int = 123) -> np.ndarray:
    """Repeat-heavy action trace used for throughput rows."""
    return sample_actions(length, np.random.default_rng(seed), repeat_p)


def _load(ckpt_path) -> tuple[BlockCausalTransformer, PatchTokenizer, dict]:
    model, stats, meta = load_checkpoint(ckpt_path)
    patch = meta.get("patch", 8)
    return model, PatchTokenizer(patch, stats), meta


def bench_row(
    name: str,
    ckpt_path,
    sample_cfg: SampleConfig,
    warmup: int = 1,
    num_frames: int = 16,
    trials: int = 3,
    trace: np.ndarray | None = None,
    episodes: list[Episode] | None = None,
    max_episodes: int | None = 4,
    seed: int = 0,
) -> BenchReport:
    """Measure one configuration; missing checkpoints yield an absent row."""
    if ckpt_path is None or not Path(ckpt_path).exists():
        return BenchReport(name=name, absent=True, config=dataclasses.asdict(sample_cfg))
    model, tokenizer, meta = _load(ckpt_path)
    report = BenchReport(name=name, config=dataclasses.asdict(sample_cfg))
    if trace is None:
        trace = bench_trace(warmup + num_frames * trials + num_frames, seed=seed)
    make = make_bench_session(model, tokenizer, sample_cfg, trace, seed=seed)
    report.fps = measure_fps(make, warmup=warmup, num_frames=num_frames, trials=trials)
    if episodes:
        q = evaluate_quality(model, tokenizer, sample_cfg, episodes, seed=seed, max_episodes=max_episodes)
        report.psnr_mean = q["psnr_mean"]
        report.ssim_mean = q["ssim_mean"]
        report.action_accuracy = q["action_accuracy"]
        report.spec_stats = q["spec_stats"]
    return report


def speedup_pair(
    ckpt_path,
    cfg_base: SampleConfig,
    cfg_test: SampleConfig,
    warmup: int = 1,
    num_frames: int = 16,
    trials: int = 3,
    seed: int = 0,
    trace: np.ndarray | None = None,
) -> tuple[float, float]:
    """Interleaved fps of (base, test) for the same checkpoint and trace."""
    model, tokenizer, _ = _load(ckpt_path)
    if trace is None:
        trace = bench_trace(warmup + num_frames * trials + num_frames, seed=seed)
    make_a = make_bench_session(model, tokenizer, cfg_base, trace, seed=seed)
    make_b = make_bench_session(model, tokenizer, cfg_test, trace, seed=seed)
    return interleaved_fps(make_a, make_b, warmup=warmup, num_frames=num_frames, trials=trials)


def ablation_suite(
    checkpoints: dict[str, Path | str | None],
    episodes: list[Episode] | None = None,
    num_frames: int = 16,
    trials: int = 3,
    seed: int = 0,
) -> list[BenchReport]:
    """Structured ablations over speculation depth, conditioning, distillation
    noise distribution, and KV caching; absent checkpoints keep their rows."""
    reports: list[BenchReport] = []
    student = checkpoints.get("student")

    def add(report: BenchReport, baseline_name: str | None = None):
        report.baseline = baseline_name
        if baseline_name:
            base = next((r for r in reports if r.name == baseline_name), None)
            if base and base.fps and report.fps:
                report.speedup = report.fps / base.fps
        reports.append(report)

    # speculation depth on the few-step student
    for n in (1, 2, 3, 4):
        cfg = SampleConfig(mode="consistency", num_steps=4, speculative_n=n)
        add(
            bench_row(f"speculative_n{n}", student, cfg, num_frames=num_frames, trials=trials, seed=seed),
            baseline_name=None if n == 1 else "speculative_n1",
        )

    # action-conditioning variants of the base model (quality-focused)
    for mode in ("adaln_zero", "cross_attention", "in_context"):
        cfg = SampleConfig(mode="ode", num_steps=18)
        add(bench_row(f"conditioning_{mode}", checkpoints.get(f"cond_{mode}"), cfg,
                      num_frames=num_frames, trials=1, episodes=episodes, seed=seed))

    # distillation noise distribution / loss composition
    for key in ("scm_adv_0.0_1.6", "scm_adv_0.2_1.6", "scm_0.0_1.6", "scm_0.2_1.6"):
        cfg = SampleConfig(mode="consistency", num_steps=4)
        add(bench_row(f"distill_{key}", checkpoints.get(key), cfg,
                      num_frames=num_frames, trials=1, episodes=episodes, seed=seed))

    # KV cache on/off
    for flag in (False, True):
        cfg = SampleConfig(mode="consistency", num_steps=4, use_kv_cache=flag)
        add(bench_row(f"kv_cache_{'on' if flag else 'off'}", student, cfg,
                      num_frames=num_frames, trials=trials, seed=seed),
            baseline_name="kv_cache_off" if flag else None)
    return reports


def write_reports(reports: list[BenchReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.as_dict()) + "\n")
