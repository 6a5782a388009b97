"""Conversions between the linear-path velocity model and its trigonometric
reparameterization, where time lives in [0, pi/2] and x = cos(t')x0 + sin(t')*sigma_d*eps.

The few-step student and its distillation objective both operate in this
domain while the underlying network stays a plain velocity predictor.
"""

from __future__ import annotations

import torch


def trig_to_fm_t(t_prime):
    """Map trig time in [0, pi/2] to linear-path time: sin / (sin + cos)."""
    s, c = torch.sin(t_prime), torch.cos(t_prime)
    return s / (s + c)


def fm_scale(t):
    """Input rescaling sqrt(t^2 + (1 - t)^2) tied to the time mapping."""
    return torch.sqrt(t * t + (1 - t) * (1 - t))


def trig_to_fm_input(x_tprime: torch.Tensor, t_prime: torch.Tensor, sigma_d: float):
    """Convert a trig-domain sample to the (input, time) the velocity model expects."""
    t = trig_to_fm_t(t_prime)
    scale = fm_scale(t)
    while scale.dim() < x_tprime.dim():
        scale = scale[..., None]
    return (x_tprime / sigma_d) * scale, t


def trigflow_F_from_v(x_t: torch.Tensor, v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Assemble the trig-domain denoiser from a velocity prediction:
    F = [(1 - 2t) x_t + (1 - 2t + 2t^2) v] / sqrt(t^2 + (1 - t)^2)."""
    while t.dim() < x_t.dim():
        t = t[..., None]
    return ((1 - 2 * t) * x_t + (1 - 2 * t + 2 * t * t) * v) / fm_scale(t)


def f_clean(x_tprime: torch.Tensor, t_prime: torch.Tensor, F: torch.Tensor, sigma_d: float) -> torch.Tensor:
    """Clean-data prediction: f = cos(t') x - sin(t') sigma_d F."""
    tp = t_prime
    while tp.dim() < x_tprime.dim():
        tp = tp[..., None]
    return torch.cos(tp) * x_tprime - torch.sin(tp) * sigma_d * F


def sample_trig_timesteps(
    shape,
    p_mean: float,
    p_std: float,
    sigma_d: float,
    generator: torch.Generator,
    dtype=torch.float32,
) -> torch.Tensor:
    """Per-frame trig times t' = arctan(e^tau / sigma_d), tau ~ N(p_mean, p_std^2)."""
    tau = torch.randn(shape, generator=generator, dtype=dtype) * p_std + p_mean
    return torch.atan(torch.exp(tau) / sigma_d)
