"""Reference-based visual quality metrics and wall-clock throughput."""

from __future__ import annotations

import statistics
import time

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 99.0  # reported for numerically-zero MSE

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP_DB / 10):
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window on the luma channel.

    Valid-mode windowing, so inputs must be at least window pixels on a side.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    if min(a.shape) < window:
        raise ValueError(f"images of shape {a.shape} are smaller than the {window}x{window} window")

    kern = _gaussian_kernel(window, sigma)
    mu_a = convolve2d(a, kern, mode="valid")
    mu_b = convolve2d(b, kern, mode="valid")
    var_a = convolve2d(a * a, kern, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, kern, mode="valid") - mu_b**2
    cov = convolve2d(a * b, kern, mode="valid") - mu_a * mu_b

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def measure_fps(make_session, warmup: int = 1, num_frames: int = 16, trials: int = 3) -> float:
    """Median frames/second over fresh sessions.

    make_session() returns step(n) -> frames_committed; each trial runs
    `warmup` untimed frames then times `num_frames` committed frames.
    """
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    results = []
    for _ in range(trials):
        step = make_session()
        step(warmup)
        t0 = time.perf_counter()
        done = step(num_frames)
        elapsed = time.perf_counter() - t0
        if done != num_frames:
            raise RuntimeError(f"session committed {done} frames, requested {num_frames}")
        results.append(num_frames / elapsed)
    return statistics.median(results)


def interleaved_fps(make_a, make_b, warmup: int = 1, num_frames: int = 16, trials: int = 3):
    """A/B/A/B alternated single-trial timings to control machine drift;
    returns (median_fps_a, median_fps_b)."""
    fps_a, fps_b = [], []
    for _ in range(trials):
        fps_a.append(measure_fps(make_a, warmup, num_frames, trials=1))
        fps_b.append(measure_fps(make_b, warmup, num_frames, trials=1))
    return statistics.median(fps_a), statistics.median(fps_b)
