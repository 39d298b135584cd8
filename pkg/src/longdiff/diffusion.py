"""Noise schedule, forward noising, the epsilon-prediction loss and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .autograd import Tensor, as_tensor, mean, no_grad, square

# model(z_t[B,...], t[B] int array, cond) -> eps_hat with z_t's shape
Denoiser = Callable[[Any, np.ndarray, Any], Any]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar[t]``, with the convention ``alpha_bar[-1] = 1`` (clean signal)."""
        t = np.asarray(t)
        return np.where(t < 0, 1.0, self.alpha_bars[np.clip(t, 0, None)])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with ``alpha_bar`` as the running product of ``1 - beta``."""
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Per-batch coefficients reshaped to broadcast against a ``ndim`` tensor."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is a step or a per-sample array.

    Works on arrays or tensors (returning the same kind).
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T})")
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"q_sample: z0 {np.shape(z0)} and eps {np.shape(eps)} differ")
    ab = sched.alpha_bars[t_arr]
    ndim = len(np.shape(z0))
    a = _coef(np.sqrt(ab), t_arr, ndim)
    s = _coef(np.sqrt(1.0 - ab), t_arr, ndim)
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        return as_tensor(z0) * a + as_tensor(eps) * s
    return a * np.asarray(z0) + s * np.asarray(eps)


def eps_loss(model: Denoiser, z0, t, eps, cond, sched: NoiseSchedule) -> Tensor:
    """Mean squared error between ``eps`` and the model's prediction at ``q_sample``."""
    z_t = q_sample(z0, t, eps, sched)
    t_arr = np.broadcast_to(np.asarray(t), (np.shape(z0)[0],))
    pred = as_tensor(model(z_t, t_arr, cond))
    return mean(square(pred - as_tensor(eps)))


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0,
              rng: np.random.Generator | None = None, clip_z0: float | None = None) -> np.ndarray:
    """One DDIM update from step ``t`` to ``t_prev`` (``t_prev = -1`` means the clean end).

    With ``clip_z0`` the clean estimate is clipped to ``[-clip_z0, clip_z0]`` and the
    noise estimate re-derived from it, so the update stays on the same DDIM path.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab_t = float(sched.alpha_bar(t))
    ab_prev = float(sched.alpha_bar(t_prev))
    if ab_t <= 0.0:
        raise ValueError("alpha_bar_t = 0: cannot recover z0")
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if clip_z0 is not None:
        z0_hat = np.clip(z0_hat, -clip_z0, clip_z0)
        eps_hat = (z_t - np.sqrt(ab_t) * z0_hat) / np.sqrt(1.0 - ab_t)
    sigma = 0.0
    if eta > 0.0:
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    out = np.sqrt(ab_prev) * z0_hat + direction
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 needs an rng for the fresh noise")
        out = out + sigma * rng.standard_normal(z_t.shape)
    return out


def recover_z0(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    ab = float(sched.alpha_bars[t])
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


@dataclass
class SamplerConfig:
    num_ddim_steps: int = 25
    eta: float = 0.0
    num_latent_samples: int = 10
    seed: int = 0
    clip_z0: float | None = None

    def validate(self, T: int) -> None:
        if not 1 <= self.num_ddim_steps <= T:
            raise ValueError(f"num_ddim_steps must be in [1, {T}]")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.num_latent_samples < 1:
            raise ValueError("num_latent_samples must be >= 1")
        if self.clip_z0 is not None and self.clip_z0 <= 0:
            raise ValueError("clip_z0 must be positive")


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Uniformly spaced steps over ``[0, T-1]``, both endpoints included, increasing."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}]")
    if num_steps == 1:
        return np.array([T - 1])
    steps = np.round(np.linspace(0, T - 1, num_steps)).astype(int)
    assert np.all(np.diff(steps) > 0)
    return steps


def ddim_chain(model: Denoiser, z_T: np.ndarray, cond, sched: NoiseSchedule, cfg: SamplerConfig,
               rng: np.random.Generator | None = None, trace: list | None = None) -> np.ndarray:
    """Run the reverse chain from ``z_T`` over ``cfg.num_ddim_steps`` steps."""
    steps = ddim_timesteps(sched.T, cfg.num_ddim_steps)[::-1]
    prevs = np.append(steps[1:], -1)
    z = np.asarray(z_T, dtype=np.float64)
    batch = z.shape[0]
    with no_grad():
        for t, tp in zip(steps, prevs):
            eps_hat = model(z, np.full(batch, t, dtype=int), cond)
            eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            z = ddim_step(z, eps_hat, int(t), int(tp), sched, cfg.eta, rng, cfg.clip_z0)
            if trace is not None:
                trace.append(z.copy())
    return z


def sample_latent(model: Denoiser, cond, sched: NoiseSchedule, cfg: SamplerConfig,
                  rng: np.random.Generator, shape: tuple, return_chains: bool = False):
    """Average of ``cfg.num_latent_samples`` independent DDIM chains.

    ``shape`` is the batched latent shape ``[B, C, H, W]`` that ``model`` consumes with
    ``cond``. Chains draw their initial noise from ``rng`` in index order and are
    averaged in that order.
    """
    cfg.validate(sched.T)
    finals = []
    for _ in range(cfg.num_latent_samples):
        z_T = rng.standard_normal(shape)
        finals.append(ddim_chain(model, z_T, cond, sched, cfg, rng))
    total = np.zeros(shape)
    for z in finals:
        total += z
    avg = total / len(finals)
    if return_chains:
        return avg, finals
    return avg
