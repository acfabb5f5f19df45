"""Evaluation protocols over a pluggable feature backend.

Metric values are only comparable within one backend, so every record
carries the backend identity string. The default desk-scale backend is a
fixed, seeded random convolutional projector that is never trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "FeatureBackend",
    "RandomConvBackend",
    "EncoderBackend",
    "GaussianStats",
    "gaussian_stats",
    "frechet_distance",
    "inception_style_score",
    "linear_eval",
    "linear_eval_weights",
    "LinearEvalResult",
    "class_wise_fid",
    "MetricRecord",
    "write_metric_records",
]


class FeatureBackend:
    """Fixed map from image batches to feature vectors (and optionally
    class probabilities). Deterministic; never trained here."""

    identity: str

    def features(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def class_probs(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError


class RandomConvBackend(FeatureBackend):
    """Seeded random conv projector with a random softmax classifier head.

    Weights are drawn once from the seed and frozen; the identity string
    records seed and dimensions so metric files are self-describing.
    """

    def __init__(self, seed: int = 0, feature_dim: int = 64, n_classes: int = 10,
                 channels: int = 3):
        rng = np.random.default_rng(seed)
        self.identity = f"randconv-v1/seed={seed}/d={feature_dim}/c={n_classes}"
        self.feature_dim = feature_dim

        def conv_w(c_out, c_in, k):
            w = rng.standard_normal((c_out, c_in, k, k))
            return torch.as_tensor(w / np.sqrt(c_in * k * k), dtype=torch.float32)

        self._w1 = conv_w(32, channels, 3)
        self._w2 = conv_w(64, 32, 3)
        self._proj = torch.as_tensor(
            rng.standard_normal((64 * 2, feature_dim)) / np.sqrt(64 * 2),
            dtype=torch.float32)
        self._cls = torch.as_tensor(
            rng.standard_normal((feature_dim, n_classes)) / np.sqrt(feature_dim),
            dtype=torch.float32)

    def _trunk(self, images: torch.Tensor) -> torch.Tensor:
        x = images.to(torch.float32)
        h = F.leaky_relu(F.conv2d(x, self._w1, stride=2, padding=1), 0.2)
        h = F.leaky_relu(F.conv2d(h, self._w2, stride=2, padding=1), 0.2)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return pooled @ self._proj

    def features(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self._trunk(images).numpy()

    def class_probs(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            logits = self._trunk(images) @ self._cls
            return torch.softmax(logits, dim=1).numpy()


class EncoderBackend(FeatureBackend):
    """Wraps a frozen encoder as a feature extractor."""

    def __init__(self, encoder, identity: str):
        self._encoder = encoder
        self.identity = identity

    def features(self, images: torch.Tensor) -> np.ndarray:
        was_training = self._encoder.training
        self._encoder.eval()
        try:
            with torch.no_grad():
                return self._encoder(images).to(torch.float64).numpy()
        finally:
            self._encoder.train(was_training)


@dataclass(frozen=True)
class GaussianStats:
    """Mean and (symmetrized) covariance of a feature set."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance is not symmetric")


def gaussian_stats(features: np.ndarray, ridge: float = 0.0) -> GaussianStats:
    """Unbiased (N-1) Gaussian fit; ``ridge`` adds ridge * I when a small
    sample needs regularizing."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 feature rows")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(cov.shape[0])
    return GaussianStats(mu, cov)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared 2-Wasserstein distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross
    square root computed as a symmetric eigendecomposition of
    S_a^{1/2} S_b S_a^{1/2} and negative eigenvalues clamped at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch between stats")
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = 0.5 * (inner + inner.T)
    cross_vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    trace_term = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(cross_vals).sum())
    return max(mean_term + trace_term, 0.0)


def inception_style_score(probs: np.ndarray) -> float:
    """exp of the mean KL between per-sample class posteriors and their
    marginal; lives in [1, C]."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected an N x C probability matrix")
    if (p < -1e-12).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("rows must be probability vectors")
    p = np.clip(p, 1e-16, None)
    marginal = p.mean(axis=0)
    kl = (p * (np.log(p) - np.log(marginal)[None, :])).sum(axis=1)
    return float(np.exp(kl.mean()))


@dataclass(frozen=True)
class LinearEvalResult:
    accuracy: float
    n_train: int
    n_test: int


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    return x / (torch.linalg.vector_norm(x, dim=1, keepdim=True) + 1e-12)


def linear_eval(train_features, train_labels, test_features, test_labels,
                epochs: int = 100, lr: float = 0.1, decay_epochs=(60, 75, 90),
                batch_size: int = 256, seed: int = 0,
                normalize: bool = False) -> LinearEvalResult:
    """Train a linear softmax classifier on frozen features, report test
    accuracy. Momentum-free SGD; the learning rate decays by 0.1 at the
    given epochs. Features are never mutated; ``normalize`` projects every
    feature row to the unit sphere first (the natural frame for encoders
    trained with cosine similarities).
    """
    xtr = torch.as_tensor(np.asarray(train_features), dtype=torch.float32)
    xte = torch.as_tensor(np.asarray(test_features), dtype=torch.float32)
    if normalize:
        xtr, xte = _unit_rows(xtr), _unit_rows(xte)
    ytr = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    yte = torch.as_tensor(np.asarray(test_labels), dtype=torch.long)
    classes = torch.unique(torch.cat([ytr, yte]))
    if classes.numel() < 2:
        raise ValueError("linear evaluation needs at least two classes")
    n_classes = int(classes.max()) + 1
    w, b = _fit_linear(xtr, ytr, n_classes, epochs, lr, decay_epochs,
                       batch_size, seed)
    pred = (xte @ w + b).argmax(dim=1)
    acc = float((pred == yte).to(torch.float64).mean())
    return LinearEvalResult(acc, xtr.shape[0], xte.shape[0])


def linear_eval_weights(train_features, train_labels, normalize: bool = False,
                        **kwargs) -> np.ndarray:
    """Class-weight matrix (n_classes, d) from the linear-eval training,
    usable as conditional directions for latent sampling."""
    xtr = torch.as_tensor(np.asarray(train_features), dtype=torch.float32)
    if normalize:
        xtr = _unit_rows(xtr)
    ytr = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    w, _ = _fit_linear(xtr, ytr, int(ytr.max()) + 1, **kwargs)
    return w.T.numpy()


def _fit_linear(xtr, ytr, n_classes, epochs=100, lr=0.1,
                decay_epochs=(60, 75, 90), batch_size=256, seed=0):
    rng = np.random.default_rng(seed)
    w = torch.zeros((xtr.shape[1], n_classes))
    b = torch.zeros(n_classes)
    n = xtr.shape[0]
    for epoch in range(epochs):
        step_lr = lr * (0.1 ** sum(epoch >= d for d in decay_epochs))
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.as_tensor(order[start:start + batch_size])
            xb, yb = xtr[idx], ytr[idx]
            probs = torch.softmax(xb @ w + b, dim=1)
            onehot = F.one_hot(yb, n_classes).to(probs.dtype)
            g = (probs - onehot) / xb.shape[0]
            w -= step_lr * (xb.T @ g)
            b -= step_lr * g.sum(dim=0)
    return w, b


def class_wise_fid(generated_by_class, reference_by_class, backend: FeatureBackend):
    """Per-class Frechet distances plus their mean.

    ``generated_by_class`` maps class -> image batch, or is a single batch
    used against every class subset (unconditional sampling). Class
    subsets smaller than the feature dimension get a 1e-6 ridge on the
    covariance.
    """
    per_class = {}
    for cls, ref_images in sorted(reference_by_class.items()):
        if ref_images.shape[0] == 0:
            raise ValueError(f"empty reference subset for class {cls}")
        if isinstance(generated_by_class, dict):
            gen_images = generated_by_class[cls]
        else:
            gen_images = generated_by_class
        ref_feat = backend.features(ref_images)
        gen_feat = backend.features(gen_images)
        dim = ref_feat.shape[1]
        ridge_r = 1e-6 if ref_feat.shape[0] < dim else 0.0
        ridge_g = 1e-6 if gen_feat.shape[0] < dim else 0.0
        per_class[cls] = frechet_distance(
            gaussian_stats(gen_feat, ridge=ridge_g),
            gaussian_stats(ref_feat, ridge=ridge_r))
    mean = float(np.mean(list(per_class.values())))
    return per_class, mean


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    backend: str
    value: float
    n_samples: int
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "metric": self.metric, "backend": self.backend,
            "value": self.value, "n_samples": self.n_samples, "seed": self.seed,
        }, sort_keys=True)


def write_metric_records(path, records):
    """Append metric records as line-delimited JSON."""
    with open(path, "a") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
