"""Noise schedule, closed-form noising, epsilon-matching teacher training and
deterministic (DDIM-style) sampling.

Denoisers are callables ``eps(x, t) -> predicted noise`` on (N, H, W) batches;
``make_denoiser`` wraps trained parameters. Images enter diffusion in data
space, ``2 * pixel - 1``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from hipa.autodiff import tape as ad
from hipa.autodiff.denoiser import DenoiserParams, bind, graph, make_denoiser
from hipa.autodiff.optim import AdamState, adam_step
from hipa.rng import SplitMix64

log = logging.getLogger(__name__)

DEFAULT_T = 100
DEFAULT_BETA = (1e-4, 0.02)
TEACHER_STEPS = 15


class NumericalAbort(RuntimeError):
    """Raised when a loss turns non-finite; carries the last good state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar[t] for t = 0..T, with alpha_bar[0] = 1."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t)]


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA[0],
                  beta_end: float = DEFAULT_BETA[1]) -> DiffusionSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    t = np.arange(T, dtype=np.float64)
    betas = beta_start + t / (T - 1) * (beta_end - beta_start)
    sched = DiffusionSchedule(betas)
    ab = sched.alpha_bars
    if not np.all(np.diff(ab) < 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    return sched


def to_data(image) -> np.ndarray:
    return 2.0 * np.asarray(image, dtype=np.float64) - 1.0


def to_pixels(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _check_t(schedule: DiffusionSchedule, t):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range 1..{schedule.T}")
    return t


def forward_noise(schedule: DiffusionSchedule, x0, t, noise) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise. ``t`` may be
    a scalar or one timestep per leading batch entry."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bar(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)


@dataclass(frozen=True)
class SamplerConfig:
    timesteps: tuple

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if not ts:
            raise ValueError("sampler needs at least one timestep")
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timestep subsequence must be strictly decreasing: {ts}")
        if ts[-1] < 1:
            raise ValueError("timesteps must be >= 1")
        object.__setattr__(self, "timesteps", ts)

    @property
    def n_steps(self) -> int:
        return len(self.timesteps)


def uniform_timesteps(T: int, n_steps: int) -> SamplerConfig:
    """n evenly spaced timesteps from T down, always including T."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in 1..{T}")
    ts = [int(round(T - i * T / n_steps)) for i in range(n_steps)]
    return SamplerConfig(tuple(ts))


def sample_multistep(denoiser, schedule: DiffusionSchedule, cfg: SamplerConfig, x_T) -> np.ndarray:
    """Deterministic sampler; returns the x0 estimate at the last selected step."""
    if cfg.timesteps[0] != schedule.T:
        raise ValueError(f"subsequence must start at T={schedule.T}, got {cfg.timesteps[0]}")
    ab = schedule.alpha_bars
    x = np.asarray(x_T, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    ts = cfg.timesteps
    x0 = None
    for i, t in enumerate(ts):
        eps = denoiser(x, t)
        x0 = (x - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t])
        if i + 1 < len(ts):
            s = ts[i + 1]
            x = math.sqrt(ab[s]) * x0 + math.sqrt(1.0 - ab[s]) * eps
    return x0[0] if single else x0


def generate_one_step(denoiser, schedule: DiffusionSchedule, x_T) -> np.ndarray:
    x = np.asarray(x_T, dtype=np.float64)
    ab = schedule.alpha_bars[schedule.T]
    eps = denoiser(x[None] if x.ndim == 2 else x, schedule.T)
    out = (x - math.sqrt(1.0 - ab) * (eps[0] if x.ndim == 2 else eps)) / math.sqrt(ab)
    return out


def noise_batch(seed: int, index: int, n: int, size: int) -> np.ndarray:
    """x_T draws keyed by (seed, sample index); shared by teacher and student."""
    return np.stack([SplitMix64(seed).spawn(7, index + i).normal((size, size)) for i in range(n)])


@dataclass
class TeacherRun:
    params: DenoiserParams
    losses: list

    def running_mean(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        c = np.cumsum(np.concatenate([[0.0], x]))
        w = np.minimum(np.arange(1, len(x) + 1), window)
        return (c[1:] - c[np.arange(1, len(x) + 1) - w]) / w


def cosine_lr(lr: float, step: int, steps: int) -> float:
    return 0.5 * lr * (1.0 + math.cos(math.pi * step / steps))


def train_teacher(params: DenoiserParams, images, schedule: DiffusionSchedule, steps: int = 2000,
                  batch: int = 8, lr: float = 5e-3, seed: int = 0, decay: bool = True) -> TeacherRun:
    """Epsilon-matching: minimize mean (eps_hat(x_t, t) - eps)^2 with t uniform
    on 1..T. ``images`` are pixel-space grids in [0, 1]. With ``decay`` the
    learning rate follows a cosine from ``lr`` down to 0."""
    data = to_data(np.stack([np.asarray(im, dtype=np.float64) for im in images]))
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if params.T != schedule.T:
        raise ValueError(f"params built for T={params.T}, schedule has T={schedule.T}")
    rng = SplitMix64(seed).spawn(11)
    state = AdamState()
    values = {k: v.copy() for k, v in params.tensors.items()}
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(data), (batch,))
        t = rng.integers(1, schedule.T + 1, (batch,))
        noise = rng.normal((batch,) + data.shape[1:])
        xt = forward_noise(schedule, data[idx], t, noise)
        tape = ad.Tape()
        cur = DenoiserParams(values, params.groups, params.size, params.T)
        pv = bind(tape, cur, trainable=True)
        loss = ad.square(graph(pv, {}, xt, t, params.T) - noise).mean()
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise NumericalAbort(f"teacher loss is {lv} at step {step}",
                                 DenoiserParams(values, params.groups, params.size, params.T))
        grads = ad.backward(tape, loss, pv)
        values = adam_step(values, grads, state, cosine_lr(lr, step, steps) if decay else lr)
        losses.append(lv)
        if step % 500 == 0:
            log.info("teacher step %d loss %.4f", step, lv)
    trained = DenoiserParams(values, dict(params.groups), params.size, params.T, dict(params.meta))
    return TeacherRun(trained, losses)


__all__ = ["DiffusionSchedule", "SamplerConfig", "NumericalAbort", "make_schedule", "forward_noise",
           "uniform_timesteps", "sample_multistep", "generate_one_step", "train_teacher",
           "make_denoiser", "noise_batch", "to_data", "to_pixels"]
