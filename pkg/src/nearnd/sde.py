"""Forward/reverse diffusion SDE machinery.

Forward process: dx = f(x, t) dt + g(t) dw on t in [t_min, 1], with a
closed-form marginal x_t = mean_scale(t) * x_0 + std(t) * eps. Sampling
integrates the reverse-time SDE

    x_{n-1} - x_n = [f(x, t) - g(t)^2 * score(x, t)] dt + g(t) dw

with Euler-Maruyama steps, optionally followed by Langevin corrector
iterations. Everything here operates on raw tensors of shape (N, *dims); the
image-facing sampler wraps the result back into an ImageBatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .data import MODEL_RANGE, ImageBatch


class DivergenceError(RuntimeError):
    """A training loss or sampling trajectory became non-finite."""


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a per-sample scalar (N,) for broadcasting against (N, *dims)."""
    return v.reshape(v.shape[0], *([1] * (like.ndim - 1)))


class VPSchedule:
    """Variance-preserving SDE with linear beta(t).

    f(x, t) = -0.5 beta(t) x, g(t) = sqrt(beta(t)),
    mean_scale(t) = exp(-0.25 t^2 (b1 - b0) - 0.5 t b0),
    std(t) = sqrt(1 - mean_scale(t)^2). Prior at t=1 is N(0, I).
    """

    kind = "variance-preserving"

    def __init__(self, beta_min: float = 0.1, beta_max: float = 20.0, t_min: float = 1e-3):
        if not 0.0 < t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if beta_min <= 0 or beta_max <= beta_min:
            raise ValueError("need 0 < beta_min < beta_max")
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)
        self.t_min = float(t_min)
        self.prior_std = 1.0

    def beta(self, t: torch.Tensor) -> torch.Tensor:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def drift(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return -0.5 * _bcast(self.beta(t), x) * x

    def diffusion(self, t: torch.Tensor) -> torch.Tensor:
        return torch.sqrt(self.beta(t))

    def mean_scale(self, t: torch.Tensor) -> torch.Tensor:
        log_scale = -0.25 * t**2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
        return torch.exp(log_scale)

    def marginal_std(self, t: torch.Tensor) -> torch.Tensor:
        return torch.sqrt(1.0 - self.mean_scale(t) ** 2)

    def params(self) -> dict:
        return {
            "kind": self.kind,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "t_min": self.t_min,
        }


class VESchedule:
    """Variance-exploding SDE with geometric sigma(t).

    f = 0, g(t) = sigma(t) sqrt(2 log(sigma_max / sigma_min)),
    mean_scale(t) = 1, std(t) = sigma_min (sigma_max / sigma_min)^t.
    Prior at t=1 is N(0, sigma_max^2 I).
    """

    kind = "variance-exploding"

    def __init__(self, sigma_min: float = 0.01, sigma_max: float = 50.0, t_min: float = 1e-3):
        if not 0.0 < t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if sigma_min <= 0 or sigma_max <= sigma_min:
            raise ValueError("need 0 < sigma_min < sigma_max")
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.t_min = float(t_min)
        self.prior_std = float(sigma_max)

    def sigma(self, t: torch.Tensor) -> torch.Tensor:
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def drift(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(x)

    def diffusion(self, t: torch.Tensor) -> torch.Tensor:
        return self.sigma(t) * math.sqrt(2.0 * math.log(self.sigma_max / self.sigma_min))

    def mean_scale(self, t: torch.Tensor) -> torch.Tensor:
        return torch.ones_like(t)

    def marginal_std(self, t: torch.Tensor) -> torch.Tensor:
        return self.sigma(t)

    def params(self) -> dict:
        return {
            "kind": self.kind,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "t_min": self.t_min,
        }


def make_schedule(kind: str, **kwargs):
    if kind in ("vp", "variance-preserving"):
        return VPSchedule(**kwargs)
    if kind in ("ve", "variance-exploding"):
        return VESchedule(**kwargs)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class SamplerConfig:
    """Discretization of the reverse SDE."""

    num_steps: int = 1000
    t_min: float = 1e-3
    corrector_steps: int = 1
    corrector_snr: float = 0.16
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if self.corrector_steps < 0:
            raise ValueError("corrector_steps must be >= 0")


def perturb(
    x0: torch.Tensor, t: torch.Tensor, schedule, generator: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw x_t = mean_scale(t) x_0 + std(t) eps from the forward marginal.

    t is a per-sample vector of length N within [schedule.t_min, 1]. Returns
    (x_t, eps) so the DSM loss can reuse the exact noise draw.
    """
    t = torch.as_tensor(t, dtype=x0.dtype)
    if t.shape != (x0.shape[0],):
        raise ValueError(f"t must be a vector of length {x0.shape[0]}, got shape {tuple(t.shape)}")
    if (t < schedule.t_min - 1e-12).any() or (t > 1.0 + 1e-12).any():
        raise ValueError(f"t values must lie in [{schedule.t_min}, 1]")
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = _bcast(schedule.mean_scale(t), x0) * x0 + _bcast(schedule.marginal_std(t), x0) * eps
    return xt, eps


def dsm_loss(score_net, x0: torch.Tensor, schedule, generator: torch.Generator) -> torch.Tensor:
    """Denoising score-matching loss with likelihood weighting lambda(t) = std(t)^2.

    E_{t, eps} [ std(t)^2 || s(x_t, t) + eps / std(t) ||^2 ]
      = E || std(t) s(x_t, t) + eps ||^2,
    mean over the batch, sum over data dimensions. t ~ U[t_min, 1].
    """
    if x0.shape[0] < 1:
        raise ValueError("batch must be nonempty")
    n = x0.shape[0]
    t = schedule.t_min + (1.0 - schedule.t_min) * torch.rand(n, generator=generator, dtype=x0.dtype)
    xt, eps = perturb(x0, t, schedule, generator)
    score = score_net(xt, t)
    resid = _bcast(schedule.marginal_std(t), x0) * score + eps
    loss = (resid**2).reshape(n, -1).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise DivergenceError("denoising score-matching loss is non-finite")
    return loss


def _langevin_correct(
    x: torch.Tensor,
    t_vec: torch.Tensor,
    score_net,
    steps: int,
    snr: float,
    generator: torch.Generator,
) -> torch.Tensor:
    for _ in range(steps):
        grad = score_net(x, t_vec)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        grad_norm = grad.reshape(grad.shape[0], -1).norm(dim=-1).mean()
        noise_norm = noise.reshape(noise.shape[0], -1).norm(dim=-1).mean()
        if grad_norm == 0:
            continue
        step_size = 2.0 * (snr * noise_norm / grad_norm) ** 2
        x = x + step_size * grad + torch.sqrt(2.0 * step_size) * noise
    return x


def reverse_step(
    x: torch.Tensor,
    t: float,
    dt: float,
    score_net,
    schedule,
    generator: torch.Generator,
    corrector_steps: int = 0,
    corrector_snr: float = 0.16,
    step_index: int | None = None,
) -> torch.Tensor:
    """One Euler-Maruyama step of the reverse SDE from t to t - dt.

    x <- x - [f(x, t) - g(t)^2 s(x, t)] dt + g(t) sqrt(dt) z, then
    corrector_steps Langevin iterations at t - dt.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t - dt < schedule.t_min - 1e-9:
        raise ValueError(f"step from t={t} by dt={dt} undershoots t_min={schedule.t_min}")
    n = x.shape[0]
    t_vec = torch.full((n,), float(t), dtype=x.dtype)
    score = score_net(x, t_vec)
    g = _bcast(schedule.diffusion(t_vec), x)
    z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    x = x - (schedule.drift(x, t_vec) - g**2 * score) * dt + g * math.sqrt(dt) * z
    if corrector_steps > 0:
        t_next = torch.full((n,), float(t - dt), dtype=x.dtype)
        x = _langevin_correct(x, t_next, score_net, corrector_steps, corrector_snr, generator)
    if not torch.isfinite(x).all():
        where = "" if step_index is None else f" at step {step_index}"
        raise DivergenceError(f"reverse SDE state became non-finite{where}")
    return x


def sample_tensor(
    score_net,
    schedule,
    config: SamplerConfig,
    n: int,
    sample_shape: tuple[int, ...],
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw n samples by integrating the reverse SDE from t=1 down to t_min.

    Initializes at the schedule's prior N(0, prior_std^2 I) and takes
    config.num_steps uniform steps. Returns the raw, unclamped tensor.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if config.t_min < schedule.t_min - 1e-12:
        raise ValueError("sampler t_min undershoots the schedule's t_min")
    if generator is None:
        generator = torch.Generator().manual_seed(config.rng_seed)
    with torch.no_grad():
        x = schedule.prior_std * torch.randn((n, *sample_shape), generator=generator)
        dt = (1.0 - config.t_min) / config.num_steps
        for i in range(config.num_steps):
            t = 1.0 - i * dt
            x = reverse_step(
                x,
                t,
                dt,
                score_net,
                schedule,
                generator,
                corrector_steps=config.corrector_steps,
                corrector_snr=config.corrector_snr,
                step_index=i,
            )
    return x


def sample(
    score_net,
    schedule,
    config: SamplerConfig,
    n: int,
    sample_shape: tuple[int, int, int],
    generator: torch.Generator | None = None,
) -> ImageBatch:
    """Image sampler: reverse SDE chain with the final output clamped to [-1, 1]."""
    x = sample_tensor(score_net, schedule, config, n, sample_shape, generator)
    return ImageBatch(x.clamp(-1.0, 1.0), MODEL_RANGE)
