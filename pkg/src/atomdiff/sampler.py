"""Classifier-free-guided Euler sampling of latents and split decoding into structures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from atomdiff.datasets import CLASS_NAMES, NULL_CLASS, AtomCountHistogram
from atomdiff.diffusion import DiT, centered_noise
from atomdiff.geometry import AtomicSystem
from atomdiff.nn import NumericalError
from atomdiff.vae import VAE, split_decode


@dataclass
class SamplingSpec:
    class_label: int
    num_samples: int
    steps: int = 500
    guidance: float = 1.0
    n_atoms: int | None = None
    histogram: AtomCountHistogram | None = None
    seed: int = 0

    def __post_init__(self):
        if self.class_label not in CLASS_NAMES:
            raise ValueError("class_label must be molecule (0) or crystal (1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.n_atoms is None and self.histogram is None:
            raise ValueError("need either a pinned atom count or a histogram")


def cfg_combine(z_cond, z_uncond, guidance: float):
    return (1 - guidance) * z_uncond + guidance * z_cond


def euler_step(zt, z1_pred, t: float, dt: float):
    if 1 - t < 1e-9:
        raise ValueError("Euler step at t = 1 would divide by zero")
    if t + dt > 1 + 1e-12:
        raise ValueError("Euler step would overshoot t = 1")
    return zt + dt * (z1_pred - zt) / (1 - t)


def time_grid(steps: int) -> list[float]:
    """t = 0, 1/T, ..., (T-1)/T; the last step lands exactly on t = 1."""
    return [k / steps for k in range(steps)]


@torch.no_grad()
def integrate(
    model: DiT,
    z0: torch.Tensor,
    pad_mask: torch.Tensor,
    class_label: int,
    steps: int,
    guidance: float,
    conditional_only: bool = False,
) -> torch.Tensor:
    """Run the guided Euler loop from ``z0``; returns the t = 1 latents.

    ``conditional_only`` skips the null-label pass (reference path for tests).
    """
    B = z0.shape[0]
    c = torch.full((B,), class_label, dtype=torch.long)
    phi = torch.full((B,), NULL_CLASS, dtype=torch.long)
    dt = 1.0 / steps
    z = z0
    self_cond = torch.zeros_like(z0)
    for t in time_grid(steps):
        tt = torch.full((B,), t, dtype=z.dtype)
        if conditional_only:
            pred = model(z, tt, c, self_cond, pad_mask)
        else:
            both = model(
                torch.cat([z, z]),
                torch.cat([tt, tt]),
                torch.cat([c, phi]),
                torch.cat([self_cond, self_cond]),
                torch.cat([pad_mask, pad_mask]),
            )
            pred = cfg_combine(both[:B], both[B:], guidance)
        self_cond = pred
        z = euler_step(z, pred, t, dt)
        if not torch.isfinite(z).all():
            raise NumericalError(f"non-finite latents at t={t:.4f}")
    return z


def draw_atom_counts(spec: SamplingSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.n_atoms is not None:
        return np.full(spec.num_samples, int(spec.n_atoms), dtype=np.int64)
    return spec.histogram.sample(rng, spec.num_samples)


def sample_latents(model: DiT, spec: SamplingSpec, rng=None, conditional_only: bool = False):
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    counts = draw_atom_counts(spec, rng)
    n_max = int(counts.max())
    pad_mask = torch.as_tensor(np.arange(n_max)[None, :] < counts[:, None])
    z0 = centered_noise(rng, pad_mask, model.latent_dim)
    z1 = integrate(model, z0, pad_mask, spec.class_label, spec.steps, spec.guidance, conditional_only)
    return z1, pad_mask


@torch.no_grad()
def sample(dit: DiT, vae: VAE, spec: SamplingSpec, batch_size: int = 256) -> list[AtomicSystem | None]:
    """Generate ``spec.num_samples`` systems; None marks a per-sample decode failure."""
    if dit.latent_dim != vae.latent_dim:
        raise ValueError(f"DiT latent dim {dit.latent_dim} != VAE latent dim {vae.latent_dim}")
    rng = np.random.default_rng(spec.seed)
    out: list[AtomicSystem | None] = []
    remaining = spec.num_samples
    while remaining > 0:
        n = min(batch_size, remaining)
        sub = SamplingSpec(spec.class_label, n, spec.steps, spec.guidance, spec.n_atoms, spec.histogram, spec.seed)
        z1, pad_mask = sample_latents(dit, sub, rng)
        decoded = vae.decode(z1, pad_mask)
        out.extend(split_decode(decoded, pad_mask, np.full(n, spec.class_label)))
        remaining -= n
    return out
