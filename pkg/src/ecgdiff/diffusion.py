"""Noise schedule, forward corruption and the conditional reverse sampler.

Conventions used throughout:

* steps are 1-based, ``t = 1..T``; index 0 of ``boundaries`` is the t=0 level 1.0
* the network is always conditioned on the *sqrt-level* ``sqrt(alpha_bar)``;
  forward mixing squares it back
* a "model" is any callable ``model(x_t, condition, level) -> eps_hat`` on
  tensors of shape ``(N, L)``, ``(N, L)`` and ``(N,)``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_STEPS = 50
DEFAULT_BETA_1 = 1e-4
DEFAULT_BETA_T = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # (T,), betas[t-1] is beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray
    boundaries: np.ndarray   # (T+1,), [1, sqrt(abar_1), ..., sqrt(abar_T)]
    posterior_variance: np.ndarray  # (T,), beta-tilde_t

    @property
    def T(self):
        return int(self.betas.size)

    @property
    def beta_1(self):
        return float(self.betas[0])

    @property
    def beta_T(self):
        return float(self.betas[-1])

    def params(self):
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T}

    def sigma(self, t):
        return float(np.sqrt(self.posterior_variance[t - 1]))


def make_schedule(T=DEFAULT_STEPS, beta_1=DEFAULT_BETA_1, beta_T=DEFAULT_BETA_T):
    """Quadratic schedule: betas interpolate linearly in sqrt-space."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_1 < beta_T < 1.0):
        raise ValueError(f"need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_T}")
    T = int(T)
    t = np.arange(1, T + 1, dtype=np.float64)
    root = (T - t) / (T - 1) * np.sqrt(beta_1) + (t - 1) / (T - 1) * np.sqrt(beta_T)
    betas = root**2
    # pin endpoints against sqrt/square round-off
    betas[0], betas[-1] = beta_1, beta_T
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    boundaries = np.concatenate([[1.0], np.sqrt(alpha_bars)])
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    post_var = betas * (1.0 - prev) / (1.0 - alpha_bars)
    post_var[0] = betas[0]
    for arr in (betas, alphas, alpha_bars, boundaries, post_var):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, boundaries, post_var)


def forward_sample(x0, alpha_bar, eps):
    """Closed-form marginal ``sqrt(abar) x0 + sqrt(1 - abar) eps``.

    ``alpha_bar`` may be a scalar or a per-row tensor broadcastable against
    the leading dimension of ``x0``.
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ValueError(f"shape mismatch: {np.shape(x0)} vs {np.shape(eps)}")
    if torch.is_tensor(alpha_bar):
        if torch.any(alpha_bar <= 0) or torch.any(alpha_bar > 1):
            raise ValueError("alpha_bar must lie in (0, 1]")
        a = alpha_bar.reshape(-1, *([1] * (x0.dim() - 1))) if x0.dim() > 1 else alpha_bar
        return torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
    if not (0.0 < alpha_bar <= 1.0):
        raise ValueError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def forward_step(x_prev, beta, eps):
    """One Markov transition of the forward chain."""
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def sample_noise_level(t, schedule, generator=None):
    """Draw a sqrt-level uniformly between the boundaries of step ``t``.

    ``t`` is an int or a 1-D integer tensor; returns a float or a float64
    tensor of the same shape.
    """
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor([t] if scalar else t, dtype=torch.long)
    if torch.any(tt < 1) or torch.any(tt > schedule.T):
        raise ValueError(f"step out of range 1..{schedule.T}")
    bounds = torch.tensor(schedule.boundaries, dtype=torch.float64)
    hi = bounds[tt - 1]
    lo = bounds[tt]
    u = torch.rand(tt.shape, dtype=torch.float64, generator=generator)
    level = lo + u * (hi - lo)
    return float(level[0]) if scalar else level


def shot_generator(seed, shot=0):
    """Independent torch generator for shot ``shot`` under master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(shot),))
    state = int(ss.generate_state(1, dtype=np.uint64)[0])
    return torch.Generator().manual_seed(state)


def _model_dtype(model, fallback):
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return fallback


def _as_batch(x, dtype):
    x = torch.as_tensor(x)
    if not torch.is_floating_point(x):
        x = x.to(torch.float64)
    x = x.to(dtype)
    return (x.unsqueeze(0), True) if x.dim() == 1 else (x, False)


def reverse_step(x_t, t, condition, schedule, model, generator=None, noise=None):
    """One ancestral update ``x_t -> x_{t-1}`` (batched, shapes ``(N, L)``).

    Noise ``sigma_t * z`` is added only for ``t > 1``. ``noise`` overrides the
    draw of ``z`` from ``generator``.
    """
    if x_t.shape != condition.shape:
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(condition.shape)}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} out of range 1..{schedule.T}")
    alpha = float(schedule.alphas[t - 1])
    abar = float(schedule.alpha_bars[t - 1])
    level = torch.full((x_t.shape[0],), float(np.sqrt(abar)), dtype=x_t.dtype)
    eps_hat = model(x_t, condition, level)
    coef = (1.0 - alpha) / np.sqrt(1.0 - abar)
    x_prev = (x_t - coef * eps_hat) / np.sqrt(alpha)
    if t > 1:
        if noise is None:
            noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
        x_prev = x_prev + schedule.sigma(t) * noise
    return x_prev


@torch.no_grad()
def reverse_sample(condition, schedule, model, generator=None, on_step=None):
    """Run the reverse chain from pure noise to an estimate of the clean signal.

    ``condition`` is ``(L,)`` or ``(N, L)``; the output has the same shape.
    ``on_step(t, x)`` is called with ``t = T`` for the initial draw and then
    after each update with the new step index (``t - 1``).
    """
    cond, squeeze = _as_batch(condition, _model_dtype(model, torch.float32))
    if not torch.all(torch.isfinite(cond)):
        raise ValueError("condition contains NaN or Inf")
    x = torch.randn(cond.shape, generator=generator, dtype=cond.dtype)
    if on_step is not None:
        on_step(schedule.T, x.squeeze(0) if squeeze else x)
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, t, cond, schedule, model, generator)
        if on_step is not None:
            on_step(t - 1, x.squeeze(0) if squeeze else x)
    return x.squeeze(0) if squeeze else x


def multi_shot_samples(condition, schedule, model, shots, seed):
    """All ``shots`` reconstructions stacked on a new leading axis."""
    if int(shots) != shots or shots < 1:
        raise ValueError(f"shots must be a positive integer, got {shots!r}")
    return torch.stack([
        reverse_sample(condition, schedule, model, shot_generator(seed, m))
        for m in range(int(shots))
    ])


def multi_shot_denoise(condition, schedule, model, shots, seed):
    """Average of ``shots`` independent reverse runs.

    Shot ``m`` draws from ``shot_generator(seed, m)``, so the first ``k`` shots
    of an ``M``-shot run are the same as those of a ``k``-shot run.
    """
    return multi_shot_samples(condition, schedule, model, shots, seed).mean(dim=0)
