"""Visual discriminator, GAN losses, and the adaptive-length forward
diffusion chain that noise-augments discriminator inputs.

The chain length grows when the discriminator gets too confident on real
images and shrinks when it struggles, following the overfitting heuristic of
instance-noise diffusion GANs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .errors import ArgumentError, ConfigError

DISC_EPS = 1e-7


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (T_cap,) strictly positive, increasing
    alphas_bar: np.ndarray  # (T_cap,) cumulative products of (1 - beta)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ConfigError("betas must be a non-empty vector")
        if (b <= 0).any() or (b >= 1).any():
            raise ConfigError("betas must lie strictly in (0, 1)")
        if (np.diff(b) < 0).any():
            raise ConfigError("betas must be non-decreasing")
        ab = np.asarray(self.alphas_bar, dtype=np.float64)
        if (np.diff(ab) >= 0).any() or (ab <= 0).any() or (ab > 1).any():
            raise ConfigError("alphas_bar must be strictly decreasing in (0, 1]")

    @property
    def t_max_cap(self):
        return len(self.betas)

    @classmethod
    def linear(cls, t_max_cap=32, beta_start=1e-4, beta_end=0.02):
        betas = np.linspace(beta_start, beta_end, t_max_cap)
        return cls(betas=betas, alphas_bar=np.cumprod(1.0 - betas))


@dataclass
class DiffusionState:
    """Adaptive chain length plus the balance statistic that drives it."""

    t_max: int = 0
    r_d: float = 0.0
    t_max_cap: int = 32
    update_interval: int = 4
    target: float = 0.6
    ema: float = 0.99
    step: int = 0

    def __post_init__(self):
        if not 0 <= self.t_max <= self.t_max_cap:
            raise ConfigError("t_max must lie in [0, t_max_cap]")
        if not -1.0 <= self.r_d <= 1.0:
            raise ConfigError("r_d must lie in [-1, 1]")

    def to_dict(self):
        return dict(t_max=self.t_max, r_d=self.r_d, t_max_cap=self.t_max_cap,
                    update_interval=self.update_interval, target=self.target,
                    ema=self.ema, step=self.step)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def forward_diffuse(x, t, schedule, rng_seed):
    """Closed-form forward diffusion x_t = sqrt(a_bar_t) x + sqrt(1-a_bar_t) eps.

    x: (B, ...) torch tensor in [0, 1], internally mapped to [-1, 1].
    t: per-item integer steps, 0 <= t <= t_max_cap; t=0 is the identity.
    Output is in the [-1, 1] domain except t=0 items, which pass through
    unchanged (they are mapped consistently for the discriminator by the
    caller; see gan_losses).
    """
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t > schedule.t_max_cap).any():
        raise ArgumentError(f"diffusion step out of range [0, {schedule.t_max_cap}]")
    gen = torch.Generator().manual_seed(int(rng_seed) & 0x7FFFFFFFFFFFFFFF)
    eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    # a_bar indexed from t=1; t=0 means no noise (a_bar = 1).
    ab = torch.ones(schedule.t_max_cap + 1, dtype=x.dtype)
    ab[1:] = torch.as_tensor(schedule.alphas_bar, dtype=x.dtype)
    ab_t = ab[t].reshape((-1,) + (1,) * (x.dim() - 1))
    x_signed = 2.0 * x - 1.0
    noisy = torch.sqrt(ab_t) * x_signed + torch.sqrt(1.0 - ab_t) * eps
    keep = (t == 0).reshape((-1,) + (1,) * (x.dim() - 1))
    return torch.where(keep, x, noisy)


def sample_t(state, batch_size, rng_seed):
    """Per-item steps drawn uniformly from {0, ..., t_max}."""
    rng = np.random.default_rng(int(rng_seed))
    return rng.integers(0, state.t_max + 1, size=batch_size)


def adapt_chain_length(state, d_outputs_on_real):
    """Update the balance EMA from real-image scores; every update_interval
    calls, move t_max one step toward the regime the statistic asks for."""
    d = np.asarray(
        d_outputs_on_real.detach().numpy() if torch.is_tensor(d_outputs_on_real)
        else d_outputs_on_real, dtype=np.float64,
    )
    if d.size == 0:
        raise ArgumentError("empty discriminator-output batch")
    r_d = state.ema * state.r_d + (1.0 - state.ema) * float(np.sign(d - 0.5).mean())
    step = state.step + 1
    t_max = state.t_max
    if step % state.update_interval == 0:
        if r_d > state.target:
            t_max = min(t_max + 1, state.t_max_cap)
        else:
            t_max = max(t_max - 1, 0)
    return replace(state, t_max=t_max, r_d=r_d, step=step)


class VisualDiscriminator(nn.Module):
    """Convolutional real/fake scorer; output strictly inside (0, 1)."""

    def __init__(self, width=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(4 * width, 1)

    def forward(self, x):
        score = torch.sigmoid(self.head(self.net(x)[..., 0, 0])[..., 0])
        return torch.clamp(score, DISC_EPS, 1.0 - DISC_EPS)


def gan_losses(real, fake, state, schedule, disc, rng_seed,
               generator_loss="nonsaturating", diffuse=True):
    """GAN losses with diffusion-noised discriminator inputs.

    real, fake: (B, 3, H, W) in [0, 1]. Independently sampled per-item steps
    for the real and fake batches. Gradients of the generator loss flow to
    `fake` through the diffusion chain. With diffuse=False (or t_max == 0)
    this reduces exactly to the plain GAN losses.
    """
    if real.shape[0] != fake.shape[0] or real.shape[0] < 1:
        raise ArgumentError("real and fake batches must be equal-sized and non-empty")
    b = real.shape[0]
    if diffuse:
        t_real = sample_t(state, b, rng_seed)
        t_fake = sample_t(state, b, int(rng_seed) + 1)
    else:
        t_real = np.zeros(b, dtype=int)
        t_fake = np.zeros(b, dtype=int)
    real_in = forward_diffuse(real, t_real, schedule, int(rng_seed) + 2)
    fake_in = forward_diffuse(fake, t_fake, schedule, int(rng_seed) + 3)

    d_real = disc(real_in)
    d_fake = disc(fake_in)
    loss_disc = (-torch.log(d_real) - torch.log(1.0 - d_fake)).mean()
    if generator_loss == "nonsaturating":
        loss_gen = (-torch.log(d_fake)).mean()
    elif generator_loss == "as_printed":
        loss_gen = (-torch.log(1.0 - d_fake)).mean()
    else:
        raise ConfigError(f"unknown generator_loss {generator_loss!r}")
    return loss_gen, loss_disc, d_real
