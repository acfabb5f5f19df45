"""Alternating GAN training with a contrastively trained discriminator.

One discriminator step: draw a real batch and latents, build two real
views and one fake view, minimize

    L_D = L_con_real + lambda_con * L_con_fake + lambda_dis * L_dis

jointly over encoder + projection heads + scalar head (the scalar head
sees gradient-blocked embeddings, so it is the only module the GAN term
touches). One generator step minimizes the non-saturating loss through a
freshly augmented fake view. Both sides use bias-corrected Adam with a
linear learning-rate warmup.

Everything stochastic runs off named numpy substreams spawned from the
config seed, so a run is a pure function of (config, dataset, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment as aug
from . import losses
from .nets import ArchConfig, ModelBundle, build_models, stop_gradient

__all__ = [
    "OptimConfig",
    "TrainConfig",
    "StepReport",
    "AdamState",
    "RngStreams",
    "TrainState",
    "TrainingDiverged",
    "adam_update",
    "ema_update",
    "discriminator_step",
    "generator_step",
    "simclr_step",
    "train",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("step", "lcon_plus", "lcon_minus", "ldis", "ld", "lg",
                  "lr", "gnorm_d", "gnorm_g")


class TrainingDiverged(RuntimeError):
    """Raised when losses stay non-finite; carries the offending report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class OptimConfig:
    alpha: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: int = 3000

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")

    def effective_lr(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.alpha
        return self.alpha * min(1.0, (step + 1) / self.warmup_steps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    n_d: int = 1
    total_generator_steps: int = 2000
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    ema_halflife_samples: float | None = None
    seed: int = 0
    checkpoint_interval: int = 500
    augment_preset: str = "simclr"
    fake_augment_preset: str | None = None  # None: same family as the real views

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.n_d < 1:
            raise ValueError("need at least one discriminator update per round")


@dataclass
class StepReport:
    step: int
    lcon_plus: float | None = None
    lcon_minus: float | None = None
    ldis: float | None = None
    ld: float | None = None
    lg: float | None = None
    lr: float | None = None
    gnorm_d: float | None = None
    gnorm_g: float | None = None

    def row(self):
        vals = [getattr(self, c) for c in REPORT_COLUMNS]
        return [float("nan") if v is None else v for v in vals]

    def finite(self) -> bool:
        vals = [self.lcon_plus, self.lcon_minus, self.ldis, self.ld, self.lg]
        return all(np.isfinite(v) for v in vals if v is not None)


class AdamState:
    """First/second moment buffers plus this optimizer's update counter."""

    def __init__(self, params):
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.step = 0


def adam_update(params, grads, state: AdamState, cfg: OptimConfig) -> None:
    """Standard bias-corrected Adam, in place, with linear warmup.

    A zero gradient leaves its parameter unchanged while the moments decay.
    """
    lr = cfg.effective_lr(state.step)
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(-lr * m_hat / (v_hat.sqrt() + cfg.epsilon))
    state.step = t


def ema_update(shadow, params, batch_size: int, halflife_samples: float) -> None:
    """shadow <- beta * shadow + (1-beta) * params,
    beta = 0.5 ** (batch_size / halflife_samples)."""
    if halflife_samples <= 0:
        raise ValueError("halflife must be positive")
    beta = 0.5 ** (batch_size / halflife_samples)
    with torch.no_grad():
        for s, p in zip(shadow, params):
            s.mul_(beta).add_(p, alpha=1.0 - beta)


class RngStreams:
    """Named, independently spawned numpy substreams for one run.

    data: minibatch order; real_aug: t1/t2 draws; fake: latents + t3 in the
    discriminator step; gen: latents + t3 in the generator step.
    """

    NAMES = ("data", "real_aug", "fake", "gen")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def state_dict(self):
        return {n: getattr(self, n).bit_generator.state for n in self.NAMES}

    def load_state_dict(self, state):
        for n in self.NAMES:
            getattr(self, n).bit_generator.state = state[n]


@dataclass
class TrainState:
    models: ModelBundle
    adam_d: AdamState
    adam_g: AdamState
    optim: OptimConfig
    train_cfg: TrainConfig
    rng: RngStreams
    generator_steps: int = 0
    ema_shadow: list | None = None
    aug_spec: aug.AugmentationSpec | None = None       # None: preset lookup
    fake_aug_spec: aug.AugmentationSpec | None = None

    @classmethod
    def create(cls, arch: ArchConfig, optim: OptimConfig, train_cfg: TrainConfig,
               aug_spec: aug.AugmentationSpec | None = None):
        init_rng = np.random.default_rng(
            np.random.SeedSequence(train_cfg.seed).spawn(5)[4])
        models = build_models(arch, seed=int(init_rng.integers(2 ** 31)))
        models.train()
        adam_d = AdamState(models.discriminator_parameters())
        adam_g = AdamState(models.generator_parameters())
        shadow = None
        if train_cfg.ema_halflife_samples is not None:
            shadow = [p.detach().clone() for p in models.generator_parameters()]
        return cls(models, adam_d, adam_g, optim, train_cfg,
                   RngStreams(train_cfg.seed), 0, shadow, aug_spec)

    def real_spec(self) -> aug.AugmentationSpec:
        if self.aug_spec is not None:
            return self.aug_spec
        return aug.PRESETS[self.train_cfg.augment_preset]

    def fake_spec(self) -> aug.AugmentationSpec:
        if self.train_cfg.fake_augment_preset is not None:
            return aug.PRESETS[self.train_cfg.fake_augment_preset]
        if self.fake_aug_spec is not None:
            return self.fake_aug_spec
        return self.real_spec()


def _latents(rng: np.random.Generator, n: int, models: ModelBundle) -> torch.Tensor:
    z = rng.standard_normal((n, models.config.latent_dim))
    return torch.as_tensor(z, dtype=models.config.torch_dtype)


def _grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(g.detach().pow(2).sum())
    return total ** 0.5


def discriminator_step(state: TrainState, real_batch: torch.Tensor) -> StepReport:
    """One joint update of encoder + heads; generator untouched bitwise."""
    models = state.models
    cfg = state.train_cfg
    w = cfg.weights
    n = real_batch.shape[0]
    if n < 2:
        raise ValueError("discriminator step needs a batch of at least 2")

    v1 = aug.augment(real_batch, state.real_spec(), state.rng.real_aug)
    v2 = aug.augment(real_batch, state.real_spec(), state.rng.real_aug)
    with torch.no_grad():
        fake = models.generator(_latents(state.rng.fake, n, models))
    vf = aug.augment(fake, state.fake_spec(), state.rng.fake)

    # one encoder pass for all views, so every view sees the same
    # normalized weights and the power-iteration state advances once
    emb = models.encoder(torch.cat([v1, v2, vf], dim=0))
    e1, e2, ef = emb[:n], emb[n:2 * n], emb[2 * n:]

    z1 = models.head_real(e1)
    z2 = models.head_real(e2)
    lcon_plus = losses.simclr_loss(z1, z2, w.tau)

    zf = models.head_fake(ef)
    zr = models.head_fake(torch.cat([e1, e2], dim=0))
    lcon_minus = losses.fake_contrast_from_embeddings(zf, zr, w.tau)

    ldis = losses.discriminator_head_loss(
        stop_gradient(e2), stop_gradient(ef), models.head_disc)

    total, breakdown = losses.discriminator_total_loss(lcon_plus, lcon_minus, ldis, w)

    params = models.discriminator_parameters()
    grads = torch.autograd.grad(total, params, allow_unused=True)
    report = StepReport(
        step=state.generator_steps,
        lcon_plus=breakdown.con_real,
        lcon_minus=breakdown.con_fake,
        ldis=breakdown.dis,
        ld=breakdown.total,
        lr=state.optim.effective_lr(state.adam_d.step),
        gnorm_d=_grad_norm(grads),
    )
    if not report.finite():
        raise TrainingDiverged("non-finite discriminator loss", report)
    adam_update(params, grads, state.adam_d, state.optim)
    return report


def generator_step(state: TrainState) -> StepReport:
    """One generator update; all discriminator-side modules untouched."""
    models = state.models
    cfg = state.train_cfg
    z = _latents(state.rng.gen, cfg.batch_size, models)
    vf = aug.augment(models.generator(z), state.fake_spec(), state.rng.gen)
    lg = losses.generator_loss(vf, models.encoder, models.head_disc)

    params = models.generator_parameters()
    grads = torch.autograd.grad(lg, params)
    report = StepReport(
        step=state.generator_steps,
        lg=float(lg.detach()),
        lr=state.optim.effective_lr(state.adam_g.step),
        gnorm_g=_grad_norm(grads),
    )
    if not report.finite():
        raise TrainingDiverged("non-finite generator loss", report)
    adam_update(params, grads, state.adam_g, state.optim)
    if state.ema_shadow is not None:
        ema_update(state.ema_shadow, params, cfg.batch_size,
                   cfg.ema_halflife_samples)
    state.generator_steps += 1
    return report


def simclr_step(models: ModelBundle, adam: AdamState, optim: OptimConfig,
                real_batch: torch.Tensor, spec: aug.AugmentationSpec,
                rng: np.random.Generator, tau: float) -> float:
    """A standalone two-view contrastive step on encoder + real head.

    This is the limit the joint discriminator step reduces to when both
    extra loss weights are zero.
    """
    n = real_batch.shape[0]
    v1 = aug.augment(real_batch, spec, rng)
    v2 = aug.augment(real_batch, spec, rng)
    emb = models.encoder(torch.cat([v1, v2], dim=0))
    z1 = models.head_real(emb[:n])
    z2 = models.head_real(emb[n:])
    loss = losses.simclr_loss(z1, z2, tau)
    params = list(models.encoder.parameters()) + list(models.head_real.parameters())
    grads = torch.autograd.grad(loss, params)
    adam_update(params, grads, adam, optim)
    return float(loss.detach())


class _EpochSampler:
    """Reshuffled epoch order over a fixed dataset, driven by one stream."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def train(state: TrainState, images: torch.Tensor, log_path=None,
          checkpoint_fn=None, progress_fn=None) -> list[StepReport]:
    """Run the alternating loop until the configured generator step count.

    images: full training set, (N, C, H, W) in [-1, 1]. ``checkpoint_fn``
    is called as checkpoint_fn(state) at the configured interval and at the
    end. Aborts after 3 consecutive non-finite step losses.
    """
    cfg = state.train_cfg
    sampler = _EpochSampler(images.shape[0], cfg.batch_size, state.rng.data)
    reports: list[StepReport] = []
    bad_streak = 0

    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if Path(log_path).stat().st_size == 0:
            writer.writerow(REPORT_COLUMNS)

    def emit(report):
        reports.append(report)
        if writer is not None:
            writer.writerow(report.row())
            log_file.flush()

    try:
        while state.generator_steps < cfg.total_generator_steps:
            try:
                for _ in range(cfg.n_d):
                    batch = images[torch.as_tensor(sampler.next_indices())]
                    emit(discriminator_step(state, batch))
                emit(generator_step(state))
                bad_streak = 0
            except TrainingDiverged as exc:
                bad_streak += 1
                if exc.report is not None:
                    emit(exc.report)
                state.generator_steps += 1
                if bad_streak >= 3:
                    raise TrainingDiverged(
                        "aborting: 3 consecutive non-finite steps", exc.report)
            if checkpoint_fn is not None and state.generator_steps % cfg.checkpoint_interval == 0:
                checkpoint_fn(state)
            if progress_fn is not None:
                progress_fn(state, reports[-1])
        if checkpoint_fn is not None:
            checkpoint_fn(state)
    finally:
        if log_file is not None:
            log_file.close()
    return reports
