"""DDPM noise schedule and the forward (noising) process.

Timesteps are 1-based: ``t`` runs over 1..T and ``alphas[t - 1]`` is the
per-step signal retention of q(x_t | x_{t-1}) = N(sqrt(a_t) x_{t-1}, (1 - a_t) I).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alphas: torch.Tensor  # (T,) float64

    def __post_init__(self):
        a = self.alphas
        if a.ndim != 1 or len(a) == 0:
            raise ValueError("alphas must be a non-empty vector")
        if not bool(((a > 0) & (a < 1)).all()):
            raise ValueError("every alpha must lie in (0, 1)")

    @classmethod
    def linear(cls, timesteps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        return cls(1.0 - betas)

    @property
    def timesteps(self) -> int:
        return len(self.alphas)

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, 0)

    @property
    def sigmas(self) -> torch.Tensor:
        """Reverse-step standard deviations, sigma_t^2 = 1 - alpha_t."""
        return torch.sqrt(1.0 - self.alphas)

    def check_t(self, t: torch.Tensor | int) -> None:
        t = torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.timesteps).any()):
            raise ValueError(f"timestep outside 1..{self.timesteps}")

    def bar(self, t: torch.Tensor | int) -> torch.Tensor:
        """Cumulative alpha at (1-based) timestep(s) t."""
        self.check_t(t)
        return self.alpha_bars[torch.as_tensor(t) - 1]


def _expand(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def forward_diffuse(x0: torch.Tensor, t: torch.Tensor | int, noise: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form sample of q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` is a scalar or a per-sample vector along the leading axis of x0.
    """
    if not bool(torch.isfinite(x0).all()):
        raise ValueError("x0 must be finite")
    abar = schedule.bar(t)
    if abar.ndim:
        abar = _expand(abar, x0)
    else:
        abar = abar.to(x0.dtype)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def forward_chain(x0: torch.Tensor, t: int, noises: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Apply the one-step kernel t times; ``noises[s]`` drives step s + 1."""
    schedule.check_t(t)
    x = x0
    for s in range(t):
        a = schedule.alphas[s].to(x0.dtype)
        x = torch.sqrt(a) * x + torch.sqrt(1.0 - a) * noises[s]
    return x
