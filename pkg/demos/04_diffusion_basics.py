"""The denoising machinery on its own, no gridworld involved.

Walks the noise schedule, the preconditioner, and the Heun sampler using
the closed-form optimal denoiser for a Gaussian data distribution.  For
that denoiser the sampler should reproduce N(0, sigma_data^2) draws, which
makes the whole loop checkable with two moment statistics.
"""

import numpy as np

from gridplan.diffusion import (
    DiffusionConfig,
    analytic_gaussian_denoiser,
    heun_sample,
    karras_sigmas,
    precondition,
)


def main():
    cfg = DiffusionConfig()
    schedule = karras_sigmas(cfg)
    sig = schedule.sigmas
    print(f"schedule: {len(sig)} levels, sigma[0]={sig[0]:.1f}, "
          f"sigma[-2]={sig[-2]:.4f}, terminal={sig[-1]:.1f}")
    print(f"midpoint sigma[32]={sig[32]:.6f}")

    print("\npreconditioner coefficients:")
    print(f"{'sigma':>8} {'c_skip':>12} {'c_out':>12} {'c_in':>12} "
          f"{'c_noise':>9}")
    for sigma in (0.002, 0.5, 80.0):
        c_skip, c_out, c_in, c_noise = precondition(sigma, cfg)
        print(f"{sigma:8.3f} {c_skip:12.6g} {c_out:12.6g} {c_in:12.6g} "
              f"{c_noise:9.4f}")

    calls = []
    inner = analytic_gaussian_denoiser(cfg)

    def counting(x, sigma, cond):
        calls.append(sigma)
        return inner(x, sigma, cond)

    n = 2000
    samples = heun_sample(counting, None, (n, 1), 42, cfg).ravel()
    print(f"\nHeun sampler: {len(calls)} denoiser calls for "
          f"{cfg.sampling_steps} steps (2N-1, the final step is Euler)")
    print(f"{n} samples: mean {samples.mean():+.4f} (want ~0), "
          f"std {samples.std():.4f} (want ~{cfg.sigma_data})")


if __name__ == "__main__":
    main()
