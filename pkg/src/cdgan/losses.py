"""Contrastive and adversarial loss functions.

Every loss here is a pure function of its tensor arguments. Batched
implementations are vectorized but kept numerically careful: all softmax /
cross-entropy style terms go through ``torch.logsumexp`` (max-subtracted),
because at temperature 0.1 cosine scores reach +-10 and the test oracles
require 1e-5 relative agreement.

Convention: projected embeddings are rows of an (N, d) tensor; images are
(N, C, H, W) in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "nt_xent_score",
    "info_nce",
    "simclr_loss",
    "supcon_loss",
    "contrastive_real_loss",
    "contrastive_fake_loss",
    "fake_contrast_from_embeddings",
    "discriminator_head_loss",
    "discriminator_total_loss",
    "generator_loss",
    "baseline_gan_losses",
]

_EPS_NORM = 0.0  # zero-norm inputs are an error, not something to fudge


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the joint discriminator-side objective."""

    lambda_con: float = 1.0
    lambda_dis: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.lambda_con < 0 or self.lambda_dis < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term decomposition of the discriminator-side loss."""

    con_real: float
    con_fake: float
    dis: float
    total: float


def nt_xent_score(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature-scaled cosine similarity of two embedding vectors.

    Symmetric in (u, v) and invariant to positive rescaling of either
    argument. Raises on zero-norm inputs (degenerate embedding).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("nt_xent_score undefined for zero-norm embeddings")
    return (u @ v) / (tau * nu * nv)


def _cosine_scores(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """All-pairs NT-Xent scores between rows of a and rows of b."""
    norms_a = torch.linalg.vector_norm(a, dim=1)
    norms_b = torch.linalg.vector_norm(b, dim=1)
    if (norms_a == 0).any() or (norms_b == 0).any():
        raise ValueError("zero-norm embedding row")
    an = a / norms_a[:, None]
    bn = b / norms_b[:, None]
    return (an @ bn.T) / tau


def info_nce(scores: torch.Tensor, positive_index: int) -> torch.Tensor:
    """Cross entropy of the softmax over candidate scores at the positive.

    ``scores`` is a length-K vector of log-density-ratio scores for one
    anchor; ``positive_index`` is 0-based.
    """
    scores = torch.as_tensor(scores)
    if scores.ndim != 1 or scores.numel() < 1:
        raise ValueError("scores must be a nonempty 1-D vector")
    k = scores.numel()
    if not (0 <= positive_index < k):
        raise IndexError(f"positive index {positive_index} out of range for K={k}")
    return torch.logsumexp(scores, dim=0) - scores[positive_index]


def supcon_loss(scores: torch.Tensor, positives) -> torch.Tensor:
    """Multi-positive contrastive loss: mean negative log-softmax over the
    positive set. With a singleton positive set this is exactly
    ``info_nce(scores, p)``.
    """
    scores = torch.as_tensor(scores)
    if scores.ndim != 1:
        raise ValueError("scores must be a 1-D vector")
    idx = sorted(set(int(p) for p in positives))
    if not idx:
        raise ValueError("positive set must be non-empty")
    k = scores.numel()
    if idx[0] < 0 or idx[-1] >= k:
        raise IndexError("positive index out of range")
    lse = torch.logsumexp(scores, dim=0)
    pos = torch.stack([scores[i] for i in idx])
    return (lse - pos).mean()


def simclr_loss(z1: torch.Tensor, z2: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetrized two-view contrastive loss over projected embeddings.

    For an anchor z1[i] the candidates are all of z2 plus z1 without row i
    (2N-1 candidates) with z2[i] positive; symmetrically for z2 anchors.
    The result is the mean over all 2N anchor terms.
    """
    if z1.shape != z2.shape:
        raise ValueError(f"view shape mismatch: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    n = z1.shape[0]
    z = torch.cat([z1, z2], dim=0)  # (2N, d)
    sim = _cosine_scores(z, z, tau)  # (2N, 2N)
    neg_inf = torch.finfo(sim.dtype).min
    mask = torch.eye(2 * n, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(mask, neg_inf)
    # positive of anchor i is its augmented twin, i.e. row (i + n) mod 2n
    pos_idx = torch.arange(2 * n, device=sim.device)
    pos_idx = (pos_idx + n) % (2 * n)
    pos = sim.gather(1, pos_idx[:, None]).squeeze(1)
    lse = torch.logsumexp(sim, dim=1)
    return (lse - pos).mean()


def contrastive_real_loss(view1, view2, encoder, head, tau: float) -> torch.Tensor:
    """Two-view contrastive loss on real samples through encoder + real head.

    Gradient flows into the encoder and the real projection head only.
    """
    if view1.shape != view2.shape:
        raise ValueError("real views must share a shape")
    z1 = head(encoder(view1))
    z2 = head(encoder(view2))
    return simclr_loss(z1, z2, tau)


def contrastive_fake_loss(fake_view, real_view1, real_view2, encoder, head, tau: float) -> torch.Tensor:
    """Multi-positive contrastive loss treating all fakes as one class.

    For each fake anchor the candidate set is [other fakes; real view 1;
    real view 2] and the positives are the other fakes. Every embedding,
    real and fake alike, passes through the *fake* projection head.
    Requires at least two fake samples (the positive set must be
    non-empty).
    """
    if fake_view.shape[0] < 2:
        raise ValueError(f"need at least 2 fake samples, got {fake_view.shape[0]}")
    zf = head(encoder(fake_view))
    if real_view1.shape[0] > 0:
        zr = head(encoder(torch.cat([real_view1, real_view2], dim=0)))
    else:
        zr = zf.new_zeros((0, zf.shape[1]))
    return fake_contrast_from_embeddings(zf, zr, tau)


def fake_contrast_from_embeddings(zf: torch.Tensor, zr: torch.Tensor, tau: float) -> torch.Tensor:
    """Embedding-level core of :func:`contrastive_fake_loss`.

    ``zf`` are projected fake embeddings (Nf, d); ``zr`` the projected
    embeddings of both real views stacked (2Nr, d), possibly empty.
    """
    n_f = zf.shape[0]
    if n_f < 2:
        raise ValueError(f"need at least 2 fake samples, got {n_f}")
    if zr.shape[0] > 0:
        scores_fr = _cosine_scores(zf, zr, tau)  # (Nf, 2Nr)
    else:
        scores_fr = zf.new_zeros((n_f, 0))
    scores_ff = _cosine_scores(zf, zf, tau)  # (Nf, Nf)
    neg_inf = torch.finfo(scores_ff.dtype).min
    mask = torch.eye(n_f, dtype=torch.bool, device=zf.device)
    scores_ff = scores_ff.masked_fill(mask, neg_inf)
    all_scores = torch.cat([scores_ff, scores_fr], dim=1)
    lse = torch.logsumexp(all_scores, dim=1)  # (Nf,)
    # mean log-softmax over the Nf-1 positives (the other fakes), per anchor
    pos_sum = scores_ff.masked_fill(mask, 0.0).sum(dim=1)
    per_anchor = lse - pos_sum / (n_f - 1)
    return per_anchor.mean()


def discriminator_head_loss(real_repr: torch.Tensor, fake_repr: torch.Tensor, head) -> torch.Tensor:
    """Binary cross entropy of the scalar head on gradient-blocked encodings.

    Callers must pass detached encoder outputs; gradient then reaches the
    head parameters only.
    """
    logit_r = head(real_repr).squeeze(-1)
    logit_f = head(fake_repr).squeeze(-1)
    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    return F.softplus(-logit_r).mean() + F.softplus(logit_f).mean()


def discriminator_total_loss(
    con_real: torch.Tensor,
    con_fake: torch.Tensor,
    dis: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the three discriminator-side terms, with breakdown."""
    total = con_real + weights.lambda_con * con_fake + weights.lambda_dis * dis
    breakdown = LossBreakdown(
        con_real=float(con_real.detach()),
        con_fake=float(con_fake.detach()),
        dis=float(dis.detach()),
        total=float(total.detach()),
    )
    return total, breakdown


def generator_loss(fake_view, encoder, head_d) -> torch.Tensor:
    """Non-saturating generator loss through the frozen-by-convention
    discriminator path. No gradient blocking here: the gradient must reach
    the generator through the augmented view.
    """
    logits = head_d(encoder(fake_view)).squeeze(-1)
    return F.softplus(-logits).mean()


def baseline_gan_losses(real_logits: torch.Tensor, fake_logits: torch.Tensor, variant: str):
    """Standard scalar-discriminator GAN losses, (d_loss, g_loss).

    variant: "minimax" | "non_saturating" | "hinge".
    """
    r = torch.as_tensor(real_logits)
    f = torch.as_tensor(fake_logits)
    if not (torch.isfinite(r).all() and torch.isfinite(f).all()):
        raise ValueError("logits must be finite")
    if variant == "minimax":
        d_loss = F.softplus(-r).mean() + F.softplus(f).mean()
        g_loss = -F.softplus(f).mean()  # E[log(1 - sigmoid(f))]
    elif variant == "non_saturating":
        d_loss = F.softplus(-r).mean() + F.softplus(f).mean()
        g_loss = F.softplus(-f).mean()
    elif variant == "hinge":
        d_loss = F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
        g_loss = -f.mean()
    else:
        raise ValueError(f"unknown GAN loss variant: {variant!r}")
    return d_loss, g_loss
