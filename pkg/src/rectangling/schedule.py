"""Noise schedules, forward diffusion, deterministic DDIM steps, and
classifier-free guidance combination.

Shared mathematical substrate for the motion and content diffusion models.
All operations are pure functions; timesteps are 0-based indices into the
schedule arrays, and the virtual step before 0 (denoted t = -1) has
cumulative alpha exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VIRTUAL_PRE0 = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance schedule and its derived cumulative products."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at step t; the virtual pre-0 step returns 1."""
        if t < 0:
            return 1.0
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class LatentState:
    """A diffusion-space array tagged with its timestep."""

    data: np.ndarray
    t: int


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 2
    cfg_scale: float = 6.0
    eta: float = 0.0
    seed: int = 0
    clip_x0: bool = True

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.multiply.accumulate(alphas)
    sched = NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)
    sched.betas.setflags(write=False)
    sched.alphas.setflags(write=False)
    sched.alpha_bars.setflags(write=False)
    return sched


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, LatentState) else np.asarray(x, dtype=np.float64)


def q_sample(x0, t: int, eps: np.ndarray, sched: NoiseSchedule) -> LatentState:
    """Diffuse clean data to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = _as_array(x0)
    if not 0 <= t < sched.T:
        raise ValueError(f"t must be in [0, {sched.T}), got {t}")
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar(t)
    return LatentState(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, t)


def ddim_step(
    x_t,
    x0_pred: np.ndarray,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    noise: np.ndarray | None = None,
) -> LatentState:
    """One DDIM reverse step from t to t_prev given the clean prediction.

    The implied noise is recovered from (x_t, x0_pred) and re-applied at the
    t_prev noise level. t_prev = -1 addresses the virtual pre-0 step
    (alpha_bar = 1), which returns x0_pred itself.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got t_prev={t_prev}, t={t}")
    x = _as_array(x_t)
    if isinstance(x_t, LatentState) and x_t.t != t:
        raise ValueError(f"x_t is tagged with t={x_t.t} but ddim_step got t={t}")
    if x0_pred.shape != x.shape:
        raise ValueError(f"x0_pred shape {x0_pred.shape} != x_t shape {x.shape}")

    ab_t = sched.alpha_bar(t)
    eps_hat = (x - np.sqrt(ab_t) * x0_pred) / np.sqrt(1.0 - ab_t)
    if t_prev < 0:
        return LatentState(x0_pred.copy(), t_prev)

    ab_p = sched.alpha_bar(t_prev)
    if eta == 0.0:
        prev = np.sqrt(ab_p) * x0_pred + np.sqrt(1.0 - ab_p) * eps_hat
    else:
        sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
        if noise is None:
            raise ValueError("eta > 0 requires a noise array")
        dir_coef = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
        prev = np.sqrt(ab_p) * x0_pred + dir_coef * eps_hat + sigma * noise
    return LatentState(prev, t_prev)


def cfg_combine(pred_cond: np.ndarray, pred_uncond: np.ndarray, scale: float) -> np.ndarray:
    """pred_uncond + scale * (pred_cond - pred_uncond), exact at scale 0 and 1."""
    if pred_cond.shape != pred_uncond.shape:
        raise ValueError(f"shape mismatch: {pred_cond.shape} vs {pred_uncond.shape}")
    if scale == 1.0:
        return pred_cond.copy()
    if scale == 0.0:
        return pred_uncond.copy()
    return pred_uncond + scale * (pred_cond - pred_uncond)


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Descending DDIM timestep subsequence: evenly spaced from T-1 down to 0.

    num_steps = 1 gives [T-1]; the caller appends the virtual pre-0 step.
    """
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    if num_steps == 1:
        return np.array([T - 1], dtype=np.int64)
    ts = np.round(np.linspace(T - 1, 0, num_steps)).astype(np.int64)
    if np.any(np.diff(ts) >= 0):
        raise AssertionError("timestep subsequence is not strictly decreasing")
    return ts
