"""EDM-style diffusion machinery.

Implements the noise schedule sigma(t) = t with Karras spacing, the
preconditioning coefficients, the log-normal training-noise distribution,
the weighted denoising loss, and the deterministic second-order Heun sampler
for the probability-flow ODE.  The sampler and schedule are plain numpy;
the loss works on torch tensors so gradients flow to the denoiser.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
import torch


class DiffusionError(RuntimeError):
    pass


class SamplerFault(DiffusionError):
    """Non-finite values appeared during sampling."""


class TrainingFault(DiffusionError):
    """Non-finite loss; carries diagnostics in args."""


@dataclasses.dataclass(frozen=True)
class DiffusionConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sampling_steps: int = 64
    guidance_weight: float = 0.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise DiffusionError("need 0 < sigma_min < sigma_max")
        if self.sampling_steps < 2:
            raise DiffusionError("need at least 2 sampling steps")


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Descending sigmas, one per sampling step, with a terminal zero."""

    sigmas: np.ndarray

    def __post_init__(self):
        self.sigmas.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1


def karras_sigmas(cfg: DiffusionConfig) -> NoiseSchedule:
    """sigma_i = (s_max^(1/rho) + i/(N-1) * (s_min^(1/rho) - s_max^(1/rho)))^rho
    for i in 0..N-1, plus the terminal 0."""
    n = cfg.sampling_steps
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    inv_rho = 1.0 / cfg.rho
    lo, hi = cfg.sigma_min**inv_rho, cfg.sigma_max**inv_rho
    sigmas = (hi + ramp * (lo - hi)) ** cfg.rho
    sigmas[0], sigmas[-1] = cfg.sigma_max, cfg.sigma_min  # exact endpoints
    return NoiseSchedule(np.concatenate([sigmas, [0.0]]))


def precondition(sigma, cfg: DiffusionConfig):
    """(c_skip, c_out, c_in, c_noise) for the denoiser parameterization
    D(x; sigma) = c_skip * x + c_out * F(c_in * x; c_noise)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DiffusionError("precondition needs sigma > 0")
    sd2 = cfg.sigma_data**2
    denom = sigma**2 + sd2
    c_skip = sd2 / denom
    c_out = sigma * cfg.sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, cfg: DiffusionConfig):
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2,
    the reciprocal of c_out^2, giving the inner regression unit weight."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + cfg.sigma_data**2) / (sigma * cfg.sigma_data) ** 2


def sample_training_sigma(
    rng: np.random.Generator, cfg: DiffusionConfig, size: Optional[int] = None
):
    """ln sigma ~ Normal(p_mean, p_std^2); scalar when size is None."""
    draw = rng.standard_normal(size)
    return np.exp(cfg.p_mean + cfg.p_std * draw)


# Denoiser protocol for the loss: callable(noised, sigma, cond) -> denoised,
# where noised is a torch tensor (B, ...) and sigma a torch tensor (B,).
DenoiserFn = Callable


def edm_loss(
    denoiser: DenoiserFn,
    clean: torch.Tensor,
    cond,
    rng: np.random.Generator,
    cfg: DiffusionConfig,
) -> torch.Tensor:
    """Weighted denoising score-matching loss.

    For each sample: draw sigma from the training distribution, corrupt the
    clean target with Gaussian noise of that scale, run the denoiser, and
    score lambda(sigma) * mean((D - clean)^2) over the target elements.
    Returns the batch mean as a differentiable scalar.
    """
    if clean.ndim < 2:
        raise DiffusionError("clean batch must have a leading batch dimension")
    batch = clean.shape[0]
    sigma_np = sample_training_sigma(rng, cfg, size=batch)
    noise_np = rng.standard_normal(tuple(clean.shape))
    sigma = torch.as_tensor(sigma_np, dtype=clean.dtype, device=clean.device)
    noise = torch.as_tensor(noise_np, dtype=clean.dtype, device=clean.device)
    sig = sigma.reshape((batch,) + (1,) * (clean.ndim - 1))
    noised = clean + noise * sig
    denoised = denoiser(noised, sigma, cond)
    if denoised.shape != clean.shape:
        raise DiffusionError(
            f"denoiser output shape {tuple(denoised.shape)} != clean {tuple(clean.shape)}"
        )
    weight = torch.as_tensor(
        loss_weight(sigma_np, cfg), dtype=clean.dtype, device=clean.device
    )
    per_sample = ((denoised - clean) ** 2).reshape(batch, -1).mean(dim=1)
    loss = (weight * per_sample).mean()
    if not torch.isfinite(loss):
        raise TrainingFault(
            "non-finite loss",
            {
                "sigma": sigma_np.tolist(),
                "per_sample": per_sample.detach().cpu().numpy().tolist(),
            },
        )
    return loss


def heun_sample(
    denoiser: DenoiserFn,
    cond,
    shape: tuple[int, ...],
    seed: int,
    cfg: DiffusionConfig,
) -> np.ndarray:
    """Integrate the probability-flow ODE from sigma_max down to 0 with
    Heun's method over the Karras schedule.

    The denoiser is called with float64 numpy arrays of the given shape and
    a scalar sigma.  Uses exactly 2N-1 denoiser evaluations for N steps (the
    final step has no second-order correction since sigma hits 0).
    Deterministic in the seed.
    """
    sched = karras_sigmas(cfg)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) * sched.sigmas[0]
    for i in range(sched.n_steps):
        t, t_next = sched.sigmas[i], sched.sigmas[i + 1]
        d = (x - denoiser(x, float(t), cond)) / t
        x_next = x + (t_next - t) * d
        if t_next > 0:
            d_next = (x_next - denoiser(x_next, float(t_next), cond)) / t_next
            x_next = x + (t_next - t) * 0.5 * (d + d_next)
        x = x_next
        if not np.all(np.isfinite(x)):
            raise SamplerFault(f"non-finite sample at step {i}, sigma {t:g}")
    return x


def analytic_gaussian_denoiser(cfg: DiffusionConfig) -> DenoiserFn:
    """Exact denoiser for zero-mean Gaussian data with variance sigma_data^2:
    D(x; sigma) = x * sigma_data^2 / (sigma_data^2 + sigma^2).

    The optimal denoiser for this toy distribution in closed form; used to
    validate the sampler against known terminal statistics.
    """
    sd2 = cfg.sigma_data**2

    def denoiser(x, sigma, cond):
        return x * (sd2 / (sd2 + sigma**2))

    return denoiser
