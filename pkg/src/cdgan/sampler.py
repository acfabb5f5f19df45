"""Discriminator-driven Langevin sampling in latent space.

The energy of a latent is the Gaussian prior negative log-density plus the
negated scalar-head logit, optionally minus a conditional alignment term
lambda * (v . encoder(G(z))) for a chosen direction v in embedding space.
The chain is the unadjusted discretization

    z' = z - (eps/2) * grad_E(z) + sqrt(eps) * eta,  eta ~ N(0, noise_std^2).

An auxiliary-noise variant samples through G(z) + eps * z' with the extra
latent z' updated jointly, to reduce mode dropping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "EnergyConfig",
    "energy",
    "langevin_step",
    "run_chain",
    "run_cddls",
    "ChainDiverged",
]


class ChainDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergyConfig:
    mode: str = "unconditional"           # or "conditional"
    condition_vector: tuple | None = None  # length-d_e, conditional mode only
    cond_lambda: float = 1.0
    epsilon: float = 0.1
    n_steps: int = 1000
    noise_std: float = 0.1
    aux_noise: bool = False
    aux_noise_scale: float | None = None   # None: reuse epsilon
    divergence_bound: float = 1e3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("step size must be positive")
        if self.n_steps < 0:
            raise ValueError("step count must be nonnegative")
        if self.mode not in ("unconditional", "conditional"):
            raise ValueError(f"unknown mode: {self.mode!r}")
        if self.mode == "conditional" and self.condition_vector is None:
            raise ValueError("conditional mode needs a condition vector")


def _decode(z, models, cfg):
    """Latent(s) -> image batch, honoring the auxiliary-noise trick."""
    if cfg.aux_noise:
        d_z = models.config.latent_dim
        scale = cfg.aux_noise_scale if cfg.aux_noise_scale is not None else cfg.epsilon
        img = models.generator(z[:, :d_z])
        extra = z[:, d_z:].reshape(img.shape)
        return img + scale * extra
    return models.generator(z)


def energy(z: torch.Tensor, models, cfg: EnergyConfig):
    """Per-sample energy and its gradient w.r.t. the latent batch.

    With cond_lambda = 0 (or unconditional mode) this is the prior term
    ||z||^2 / 2 minus the scalar-head logit of the decoded sample.
    """
    z = z.detach().requires_grad_(True)
    img = _decode(z, models, cfg)
    emb = models.encoder(img)
    e = 0.5 * (z * z).sum(dim=1) - models.head_disc(emb).squeeze(-1)
    if cfg.mode == "conditional" and cfg.cond_lambda != 0.0:
        v = torch.as_tensor(np.asarray(cfg.condition_vector), dtype=emb.dtype)
        e = e - cfg.cond_lambda * (emb @ v)
    (grad,) = torch.autograd.grad(e.sum(), z)
    return e.detach(), grad


def langevin_step(z: torch.Tensor, grad_e: torch.Tensor,
                  rng: np.random.Generator, cfg: EnergyConfig) -> torch.Tensor:
    """One unadjusted Langevin update of the latent batch."""
    if z.shape != grad_e.shape:
        raise ValueError("latent/gradient shape mismatch")
    eta = rng.standard_normal(z.shape) * cfg.noise_std
    noise = torch.as_tensor(eta, dtype=z.dtype)
    return z - 0.5 * cfg.epsilon * grad_e + (cfg.epsilon ** 0.5) * noise


def run_chain(energy_fn, z0: torch.Tensor, cfg: EnergyConfig,
              rng: np.random.Generator, record_every: int = 0):
    """Iterate the chain from z0; returns (z_final, trajectory).

    ``energy_fn(z) -> (energies, grad)``. Aborts if any latent norm
    exceeds the divergence bound. The trajectory holds detached snapshots
    every ``record_every`` steps (0 disables recording).
    """
    z = z0.detach().clone()
    trajectory = []
    for t in range(cfg.n_steps):
        _, grad = energy_fn(z)
        z = langevin_step(z, grad, rng, cfg)
        norms = torch.linalg.vector_norm(z, dim=1)
        if float(norms.max()) > cfg.divergence_bound:
            raise ChainDiverged(
                f"latent norm {float(norms.max()):.3g} exceeded bound at step {t}")
        if record_every and (t + 1) % record_every == 0:
            trajectory.append(z.detach().clone())
    return z, trajectory


def run_cddls(models, cfg: EnergyConfig, n_samples: int,
              rng: np.random.Generator, record_every: int = 0):
    """Langevin-refined samples from a trained model.

    Draws prior latents, runs the configured chain, and decodes the final
    iterates. With n_steps = 0 this is plain prior sampling through G.
    Returns (images, trajectory).
    """
    was_training = models.encoder.training
    models.eval()
    try:
        d_z = models.config.latent_dim
        dim = d_z
        if cfg.aux_noise:
            c, s = models.config.channels, models.config.image_size
            dim = d_z + c * s * s
        dtype = models.config.torch_dtype
        z0 = torch.as_tensor(rng.standard_normal((n_samples, dim)), dtype=dtype)
        if cfg.n_steps == 0:
            with torch.no_grad():
                return _decode(z0, models, cfg), []
        z, trajectory = run_chain(lambda z: energy(z, models, cfg), z0, cfg, rng,
                                  record_every=record_every)
        with torch.no_grad():
            return _decode(z, models, cfg), trajectory
    finally:
        models.train(was_training)
