"""Prior-shifted diffusion over class-label vectors.

The forward kernel corrupts a one-hot label ``y0`` toward a class prior::

    y_t = sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps + (1 - sqrt(ab_t)) * prior

so that ``y_T`` is approximately ``N(prior, I)``. Timesteps are 1-based;
``alpha_bar(0)`` is 1 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InvariantError, SamplingError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. Arrays are stored 0-based: ``beta[t - 1]`` is beta_t."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t):
        """alpha_bar for 0-based-or-later step(s) ``t``; accepts ints or tensors."""
        table = self._table()
        if torch.is_tensor(t):
            return torch.as_tensor(table, dtype=torch.float64, device=t.device)[t.long()]
        return float(table[t])

    def _table(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar])


def make_schedule(T: int = 100, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ConfigError("T must be >= 2")
    if not 0.0 < beta1 < betaT < 1.0:
        raise ConfigError("need 0 < beta1 < betaT < 1")
    beta = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _coef(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar_t broadcast against a (B, N) tensor."""
    if torch.is_tensor(t):
        ab = sched.alpha_bar_at(t.to(like.device)).to(like.dtype)
        return ab.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(sched.alpha_bar_at(int(t)), dtype=like.dtype, device=like.device)


def _check_t(t, sched: NoiseSchedule, low: int = 1) -> None:
    tt = t if torch.is_tensor(t) else torch.tensor(t)
    if tt.numel() and (int(tt.min()) < low or int(tt.max()) > sched.T):
        raise InvariantError(f"timestep out of range [{low}, {sched.T}]: {tt.tolist()}")


def forward_sample(y0, prior, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form draw of ``y_t`` given the noise ``eps``."""
    _check_t(t, sched)
    if not torch.isfinite(eps).all():
        raise InvariantError("eps must be finite")
    ab = _coef(sched, t, y0)
    s = torch.sqrt(ab)
    return s * y0 + torch.sqrt(1.0 - ab) * eps + (1.0 - s) * prior


def x0_from_noise(y_t, eps_hat, prior, t, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward kernel for ``y0`` given a noise estimate."""
    _check_t(t, sched)
    ab = _coef(sched, t, y_t)
    s = torch.sqrt(ab)
    return (y_t - torch.sqrt(1.0 - ab) * eps_hat - (1.0 - s) * prior) / s


def reverse_step(y_t, eps_hat, prior, t, sched: NoiseSchedule, eta: float = 0.0, generator=None):
    """One reverse update from step ``t`` to ``t - 1``.

    With ``eta = 0`` the update is deterministic and affine in
    ``(y_t, eps_hat, prior)``. ``eta > 0`` splits part of the noise term into
    fresh Gaussian noise.
    """
    y0_hat = x0_from_noise(y_t, eps_hat, prior, t, sched)
    prev = t - 1
    ab_prev = _coef(sched, prev, y_t)
    s_prev = torch.sqrt(ab_prev)
    out = s_prev * y0_hat + (1.0 - s_prev) * prior
    if eta == 0:
        return out + torch.sqrt(1.0 - ab_prev) * eps_hat
    ab = _coef(sched, t, y_t)
    sigma = eta * torch.sqrt((1.0 - ab_prev) / (1.0 - ab)) * torch.sqrt(1.0 - ab / ab_prev)
    direction = torch.sqrt(torch.clamp(1.0 - ab_prev - sigma**2, min=0.0))
    z = torch.randn(y_t.shape, generator=generator, dtype=y_t.dtype, device=y_t.device)
    return out + direction * eps_hat + sigma * z


def sample_prediction(denoiser, prior, cond, sched: NoiseSchedule, generator=None, eta: float = 0.0,
                      y_T=None, callback=None):
    """Run the reverse chain from ``y_T ~ N(prior, I)`` down to a ``y0`` estimate.

    ``denoiser(y_t, prior, cond, t)`` must return the noise estimate for a batch
    ``t`` tensor. ``callback(t, y_t, eps_hat)`` is invoked after each denoiser
    call. Returns ``(y0_hat, predicted_class)``.
    """
    if y_T is None:
        noise = torch.randn(prior.shape, generator=generator, dtype=prior.dtype, device=prior.device)
        y_T = prior + noise
    y = y_T
    batch = prior.shape[0]
    for step in range(sched.T, 0, -1):
        t = torch.full((batch,), step, dtype=torch.long, device=prior.device)
        eps_hat = denoiser(y, prior, cond, t)
        if not torch.isfinite(eps_hat).all():
            raise SamplingError(f"denoiser returned non-finite noise at step {step}", step=step)
        if callback is not None:
            callback(step, y, eps_hat)
        y = reverse_step(y, eps_hat, prior, t, sched, eta=eta, generator=generator)
    return y, y.argmax(dim=-1)
