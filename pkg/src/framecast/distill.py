"""Few-step student distillation with trajectory-tangent matching and
adversarial supervision.

The pretrained velocity model is wrapped as a trig-domain denoiser F. The
student chases a stopgrad EMA copy of itself plus a scaled trajectory
tangent, weighted by a learned per-timestep weight; discriminator heads on
frozen teacher features sharpen the clean-frame predictions.
"""

from __future__ import annotations

import copy
import json
import math
import statistics
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .model import BlockCausalTransformer, _timestep_embedding
from .trigflow import (
    f_clean,
    sample_trig_timesteps,
    trig_to_fm_input,
    trig_to_fm_t,
    trigflow_F_from_v,
)


class DivergenceError(RuntimeError):
    """Distillation loss ran away from its trailing median."""


@dataclass
class DistillConfig:
    steps: int = 1000
    batch_size: int = 2
    lr: float = 2e-6
    grad_clip: float = 0.1
    weight_lr: float = 1e-4
    disc_lr: float = 2e-4
    ema_decay: float = 0.999
    p_mean: float = 0.0
    p_std: float = 1.6
    lambda_adv: float = 0.5
    tangent_norm_c: float = 0.1
    use_jvp: bool = True
    seed: int = 0
    log_every: int = 25
    ckpt_every: int = 500
    divergence_factor: float = 10.0
    divergence_patience: int = 100


class TimeWeightNet(nn.Module):
    """Scalar adaptive weight w(t') on a sinusoidal embedding of t'."""

    def __init__(self, width: int = 64):
        super().__init__()
        self.width = width
        self.net = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, 1))

    def forward(self, t_prime: torch.Tensor) -> torch.Tensor:
        emb = _timestep_embedding(t_prime, self.width)
        return self.net(emb).squeeze(-1)


class DiscriminatorHeads(nn.Module):
    """Independent 2-layer heads over frame-pooled frozen-teacher features."""

    def __init__(self, hidden_dim: int, feature_layers: tuple[int, ...], width: int = 64):
        super().__init__()
        self.feature_layers = feature_layers
        self.heads = nn.ModuleDict(
            {str(i): nn.Sequential(nn.Linear(hidden_dim, width), nn.SiLU(), nn.Linear(width, 1))
             for i in feature_layers}
        )

    def forward(self, features: dict[int, torch.Tensor], image_tokens: int) -> torch.Tensor:
        """features[i]: (B, T, P_seq, h); returns per-frame scores (B, T)."""
        scores = [
            self.heads[str(i)](features[i][:, :, :image_tokens].mean(dim=2)).squeeze(-1)
            for i in self.feature_layers
        ]
        return torch.stack(scores).mean(dim=0)


def model_F(
    module: BlockCausalTransformer,
    x_tprime: torch.Tensor,
    t_prime: torch.Tensor,
    action_ids: torch.Tensor,
    sigma_d: float,
) -> torch.Tensor:
    """Evaluate the trig-domain denoiser F backed by a velocity network."""
    x_fm, t = trig_to_fm_input(x_tprime, t_prime, sigma_d)
    v = module(x_fm, t, action_ids)
    return trigflow_F_from_v(x_fm, v, t)


def directional_dF(
    F_fn,
    x_tprime: torch.Tensor,
    t_prime: torch.Tensor,
    dx_dt: torch.Tensor,
    use_jvp: bool = True,
    fd_step_scale: float = 1e-3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Value of F and its forward-mode derivative along (dx/dt', 1).

    Falls back to central differences with step 1e-3 * (1 + ||x||) when
    forward-mode autodiff is unavailable or disabled.
    """
    if use_jvp:
        return torch.func.jvp(F_fn, (x_tprime, t_prime), (dx_dt, torch.ones_like(t_prime)))
    h = fd_step_scale * (1.0 + float(x_tprime.norm()))
    f_plus = F_fn(x_tprime + h * dx_dt, t_prime + h)
    f_minus = F_fn(x_tprime - h * dx_dt, t_prime - h)
    return F_fn(x_tprime, t_prime), (f_plus - f_minus) / (2 * h)


def tangent_df_dt(
    x_tprime: torch.Tensor,
    t_prime: torch.Tensor,
    sigma_d: float,
    F_teacher_fn,
    F_minus_fn,
    use_jvp: bool = True,
    fd_step_scale: float = 1e-3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Total derivative of the stopgrad clean-data predictor along the flow.

    df/dt' = -cos(t')(sigma_d F_minus - dx/dt') - sin(t')(x + sigma_d dF_minus/dt'),
    with the trajectory velocity dx/dt' = sigma_d * F_teacher estimated by the
    frozen teacher. Returns (tangent, F_minus) so the caller reuses the value.
    """
    with torch.no_grad():
        dx_dt = sigma_d * F_teacher_fn(x_tprime, t_prime)
    F_minus, dF_dt = directional_dF(F_minus_fn, x_tprime, t_prime, dx_dt, use_jvp, fd_step_scale)
    tp = t_prime
    while tp.dim() < x_tprime.dim():
        tp = tp[..., None]
    tangent = -torch.cos(tp) * (sigma_d * F_minus - dx_dt) - torch.sin(tp) * (x_tprime + sigma_d * dF_dt)
    return tangent, F_minus


def normalize_tangent(tangent: torch.Tensor, c: float) -> torch.Tensor:
    """Scale by the norm of the frame-summed tangent (plus c), per batch element."""
    summed = tangent.sum(dim=1)  # collapse the frame axis
    norm = summed.flatten(1).norm(dim=-1) + c
    return tangent / norm.view(-1, *([1] * (tangent.dim() - 1)))


def scm_loss(
    F_theta: torch.Tensor,
    target: torch.Tensor,
    w: torch.Tensor,
) -> torch.Tensor:
    """Adaptively weighted squared error: e^w/D * ||F - target||^2 - w.

    F_theta, target: (B, T, P, D); w: (B, T). Mean over batch and frames;
    D is the per-frame dimensionality.
    """
    dim = F_theta.shape[-1] * F_theta.shape[-2]
    sq = (F_theta - target.detach()).square().sum(dim=(-1, -2))
    return (torch.exp(w) / dim * sq - w).mean()


def adversarial_losses(
    disc: DiscriminatorHeads,
    teacher: BlockCausalTransformer,
    real_x0: torch.Tensor,
    fake_x0: torch.Tensor,
    s: torch.Tensor,
    action_ids: torch.Tensor,
    rng: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge losses on re-noised real and generated frames.

    The generator term only sees gradients through the fake branch; the
    discriminator term detaches the generator.
    """
    image_tokens = teacher.config.tokens_per_frame
    eps_real = torch.randn(real_x0.shape, generator=rng, dtype=real_x0.dtype)
    eps_fake = torch.randn(fake_x0.shape, generator=rng, dtype=fake_x0.dtype)
    s_b = s[..., None, None]
    x_real = (1 - s_b) * real_x0 + s_b * eps_real
    x_fake = (1 - s_b) * fake_x0 + s_b * eps_fake

    layers = disc.feature_layers
    with torch.no_grad():
        _, feats_real = teacher(x_real, s, action_ids, return_features=layers)
    _, feats_fake = teacher(x_fake, s, action_ids, return_features=layers)

    d_real = disc(feats_real, image_tokens)
    d_fake = disc(feats_fake, image_tokens)
    d_fake_detached = disc({k: f.detach() for k, f in feats_fake.items()}, image_tokens)

    disc_loss = torch.relu(1 - d_real).mean() + torch.relu(1 + d_fake_detached).mean()
    gen_loss = -d_fake.mean()
    return disc_loss, gen_loss


def parameter_checksum(module: nn.Module) -> float:
    return float(sum(p.double().abs().sum() for p in module.parameters()))


class Distiller:
    """Owns the student, its EMA stopgrad twin, the frozen teacher, the
    adaptive weight net, and the discriminator heads."""

    def __init__(
        self,
        student: BlockCausalTransformer,
        teacher: BlockCausalTransformer,
        sigma_d: float,
        config: DistillConfig,
    ):
        self.student = student
        self.teacher = teacher
        self.sigma_d = float(sigma_d)
        self.cfg = config
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.theta_minus = copy.deepcopy(student)
        for p in self.theta_minus.parameters():
            p.requires_grad_(False)

        n_layers = teacher.config.num_layers
        self.feature_layers = (max(0, n_layers // 2 - 1), n_layers - 1)
        self.w_phi = TimeWeightNet()
        self.disc = DiscriminatorHeads(teacher.config.hidden_dim, self.feature_layers)

        self.opt_student = torch.optim.AdamW(
            [
                {"params": self.student.parameters(), "lr": config.lr},
                {"params": self.w_phi.parameters(), "lr": config.weight_lr},
            ],
            weight_decay=0.0,
        )
        self.opt_disc = torch.optim.AdamW(self.disc.parameters(), lr=config.disc_lr, weight_decay=0.0)
        self.rng = torch.Generator().manual_seed(config.seed)
        self._loss_window: deque[float] = deque(maxlen=config.divergence_patience)
        self._diverging = 0
        self.step_count = 0

    def _F_fn(self, module, action_ids):
        def fn(x_tp, t_prime):
            return model_F(module, x_tp, t_prime, action_ids, self.sigma_d)
        return fn

    def compute_scm(self, x0: torch.Tensor, action_ids: torch.Tensor, t_prime: torch.Tensor,
                    eps: torch.Tensor):
        """Shared forward pass pieces: returns (loss_scm, F_theta, x_tp, aux)."""
        sd = self.sigma_d
        tp_b = t_prime[..., None, None]
        x_tp = torch.cos(tp_b) * x0 + torch.sin(tp_b) * sd * eps

        tangent, F_minus = tangent_df_dt(
            x_tp, t_prime, sd,
            self._F_fn(self.teacher, action_ids),
            self._F_fn(self.theta_minus, action_ids),
            use_jvp=self.cfg.use_jvp,
        )
        if not torch.isfinite(tangent).all():
            return None
        tp_cos = torch.cos(t_prime)[..., None, None]
        target = F_minus + tp_cos * normalize_tangent(tangent, self.cfg.tangent_norm_c)

        F_theta = model_F(self.student, x_tp, t_prime, action_ids, sd)
        w = self.w_phi(t_prime)
        loss = scm_loss(F_theta, target, w)
        return loss, F_theta, x_tp, {"w_mean": float(w.mean().detach())}

    def distill_step(self, x0: torch.Tensor, action_ids: torch.Tensor) -> dict:
        """One optimization step; the teacher is never updated."""
        cfg = self.cfg
        B, T = x0.shape[:2]
        t_prime = sample_trig_timesteps((B, T), cfg.p_mean, cfg.p_std, self.sigma_d, self.rng)
        eps = torch.randn(x0.shape, generator=self.rng, dtype=x0.dtype)

        out = self.compute_scm(x0, action_ids, t_prime, eps)
        if out is None:
            self.step_count += 1
            return {"step": self.step_count, "skipped": True}
        loss_scm, F_theta, x_tp, aux = out

        disc_loss = torch.zeros(())
        gen_loss = torch.zeros(())
        if cfg.lambda_adv > 0:
            s = torch.sigmoid(torch.randn((B, T), generator=self.rng, dtype=x0.dtype))
            x_hat = f_clean(x_tp, t_prime, F_theta, self.sigma_d)
            disc_loss, gen_loss = adversarial_losses(
                self.disc, self.teacher, x0, x_hat, s, action_ids, self.rng
            )

        total = loss_scm + cfg.lambda_adv * gen_loss
        self.opt_student.zero_grad(set_to_none=True)
        self.opt_disc.zero_grad(set_to_none=True)
        total.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.student.parameters(), cfg.grad_clip)
        self.opt_student.step()

        if cfg.lambda_adv > 0:
            self.opt_disc.zero_grad(set_to_none=True)
            disc_loss.backward()
            self.opt_disc.step()

        with torch.no_grad():
            for p_ema, p in zip(self.theta_minus.parameters(), self.student.parameters()):
                p_ema.lerp_(p, 1 - cfg.ema_decay)

        self.step_count += 1
        self._check_divergence(float(loss_scm))
        return {
            "step": self.step_count,
            "loss_scm": float(loss_scm),
            "loss_disc": float(disc_loss),
            "loss_gen": float(gen_loss),
            "grad_norm": float(grad_norm),
            **aux,
        }

    def _check_divergence(self, loss: float) -> None:
        # violating losses stay out of the window so a runaway cannot drag
        # the trailing median up with it
        if len(self._loss_window) == self._loss_window.maxlen:
            med = statistics.median(self._loss_window)
            if med > 0 and loss > self.cfg.divergence_factor * med:
                self._diverging += 1
                if self._diverging >= self.cfg.divergence_patience:
                    raise DivergenceError(
                        f"loss {loss:.4g} exceeded {self.cfg.divergence_factor}x the trailing "
                        f"median {med:.4g} for {self._diverging} consecutive steps"
                    )
                return
            self._diverging = 0
        self._loss_window.append(loss)

    def tangent_check(self, x0: torch.Tensor, action_ids: torch.Tensor, seed: int = 0) -> float:
        """Relative error of the forward-mode tangent against central differences
        of the stopgrad clean-data predictor along the teacher trajectory."""
        gen = torch.Generator().manual_seed(seed)
        B, T = x0.shape[:2]
        t_prime = sample_trig_timesteps((B, T), self.cfg.p_mean, self.cfg.p_std, self.sigma_d, gen)
        t_prime = t_prime.clamp(0.1, math.pi / 2 - 0.1)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        tp_b = t_prime[..., None, None]
        x_tp = torch.cos(tp_b) * x0 + torch.sin(tp_b) * self.sigma_d * eps

        F_minus_fn = self._F_fn(self.theta_minus, action_ids)
        tangent, _ = tangent_df_dt(
            x_tp, t_prime, self.sigma_d,
            self._F_fn(self.teacher, action_ids), F_minus_fn, use_jvp=True,
        )

        def f_of(x, tp):
            return f_clean(x, tp, F_minus_fn(x, tp), self.sigma_d)

        with torch.no_grad():
            dx_dt = self.sigma_d * self._F_fn(self.teacher, action_ids)(x_tp, t_prime)
            h = 1e-4
            fd = (f_of(x_tp + h * dx_dt, t_prime + h) - f_of(x_tp - h * dx_dt, t_prime - h)) / (2 * h)
        return float((tangent - fd).norm() / (fd.norm() + 1e-12))


def distill(
    distiller: Distiller,
    latents: torch.Tensor,
    cond_ids: torch.Tensor,
    log_path: str | Path | None = None,
    checkpoint_fn=None,
    progress: bool = False,
) -> list[dict]:
    """Run the distillation loop over encoded episodes."""
    cfg = distiller.cfg
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    records = []
    log_file = open(log_path, "a") if log_path else None
    started = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            idx = torch.randint(0, latents.shape[0], (cfg.batch_size,), generator=gen)
            rec = distiller.distill_step(latents[idx], cond_ids[idx])
            if step % cfg.log_every == 0 or step == cfg.steps:
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if progress:
                    rate = step / (time.perf_counter() - started)
                    print(f"distill {step}/{cfg.steps} scm {rec.get('loss_scm', float('nan')):.5f} "
                          f"({rate:.2f} it/s)", flush=True)
            if checkpoint_fn and (step % cfg.ckpt_every == 0 or step == cfg.steps):
                checkpoint_fn(distiller.student, step)
    finally:
        if log_file:
            log_file.close()
    return records
