"""Model components: generator, spectrally normalized encoder, heads.

The "mini" architecture is a scaled-down convolutional pair (three conv
stages, widths 32/64/128) meant for desk-scale experiments. All weight
matrices are orthogonally initialized with zero biases; the encoder's
weights carry persistent power-iteration state for spectral normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ArchConfig",
    "ModelBundle",
    "stop_gradient",
    "spectral_normalize",
    "SpectralConv2d",
    "SpectralLinear",
    "Generator",
    "Encoder",
    "ProjectionHead",
    "DiscriminatorHead",
    "build_models",
]


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity in the forward pass, zero derivative in the backward pass."""
    return x.detach()


def spectral_normalize(w: torch.Tensor, u: torch.Tensor, n_iter: int = 1):
    """Divide a weight matrix by its power-iteration top singular value.

    One iteration: v <- W^T u / ||.||, u <- W v / ||.||, sigma = u^T W v.
    Returns (w / sigma, updated u). Non-matrix weights are flattened to
    (out, -1) by the calling layer before reaching here.

    Raises on a zero matrix (no direction to normalize).
    """
    if w.ndim != 2:
        raise ValueError("spectral_normalize expects a 2-D matrix")
    if not torch.any(w != 0):
        raise ValueError("spectral normalization undefined for the zero matrix")
    with torch.no_grad():
        for _ in range(max(n_iter, 0)):
            v = F.normalize(w.T @ u, dim=0)
            u = F.normalize(w @ v, dim=0)
    v = F.normalize(w.detach().T @ u, dim=0)
    sigma = u @ (w @ v)
    return w / sigma, u


class _SpectralWeight(nn.Module):
    """Mixin-ish holder for a spectrally normalized weight + u state."""

    weight: nn.Parameter
    u: torch.Tensor

    def _init_u(self, out_features: int, dtype):
        u = torch.randn(out_features, dtype=dtype)
        self.register_buffer("u", u / torch.linalg.vector_norm(u))

    def normalized_weight(self, n_iter: int = 1) -> torch.Tensor:
        w_mat = self.weight.reshape(self.weight.shape[0], -1)
        w_sn, u = spectral_normalize(w_mat, self.u, n_iter=n_iter)
        if self.training:
            self.u.copy_(u)  # state persists across steps
        return w_sn.reshape(self.weight.shape)


class SpectralLinear(_SpectralWeight):
    def __init__(self, in_features, out_features, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=dtype))
        self._init_u(out_features, dtype)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SpectralConv2d(_SpectralWeight):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, dtype=torch.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_ch, dtype=dtype))
        self._init_u(out_ch, dtype)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias,
                        stride=self.stride, padding=self.padding)


@dataclass(frozen=True)
class ArchConfig:
    """Descriptor for the mini generator/encoder pair and the heads."""

    image_size: int = 32
    channels: int = 3
    widths: tuple = (32, 64, 128)
    latent_dim: int = 64          # d_z
    embed_dim: int = 128          # d_e, encoder output width
    proj_dim: int = 128           # d_p, projection head output width
    head_hidden: int = 512
    disc_head_depth: int = 2      # 1 = linear head (ablation arm)
    shared_proj_heads: bool = False
    leaky_slope: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % (2 ** len(self.widths)) != 0:
            raise ValueError("image size must be divisible by 2^(conv stages)")
        if self.disc_head_depth not in (1, 2):
            raise ValueError("disc_head_depth must be 1 or 2")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


class Generator(nn.Module):
    """Latent -> image map ending in tanh, so outputs live in [-1, 1]."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        dt = cfg.torch_dtype
        widths = list(reversed(cfg.widths))  # deepest first
        self.base = cfg.image_size // (2 ** len(cfg.widths))
        self.base_ch = widths[0]
        self.fc = nn.Linear(cfg.latent_dim, widths[0] * self.base * self.base, dtype=dt)
        ups = []
        for w_in, w_out in zip(widths, widths[1:] + [widths[-1]]):
            ups.append(nn.ConvTranspose2d(w_in, w_out, 4, stride=2, padding=1, dtype=dt))
        self.ups = nn.ModuleList(ups)
        self.to_rgb = nn.Conv2d(widths[-1], cfg.channels, 3, padding=1, dtype=dt)

    def forward(self, z):
        h = self.fc(z).reshape(z.shape[0], self.base_ch, self.base, self.base)
        h = F.relu(h)
        for up in self.ups:
            h = F.relu(up(h))
        return torch.tanh(self.to_rgb(h))


class Encoder(nn.Module):
    """Image -> d_e embedding; all weights spectrally normalized, no
    batch normalization, leaky rectification in the body."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.slope = cfg.leaky_slope
        convs = []
        c_in = cfg.channels
        for w in cfg.widths:
            convs.append(SpectralConv2d(c_in, w, 3, stride=2, padding=1, dtype=dt))
            c_in = w
        self.convs = nn.ModuleList(convs)
        spatial = cfg.image_size // (2 ** len(cfg.widths))
        self.fc = SpectralLinear(c_in * spatial * spatial, cfg.embed_dim, dtype=dt)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.slope)
        return self.fc(h.flatten(1))


class ProjectionHead(nn.Module):
    """2-layer MLP d_e -> hidden -> d_p with ReLU in between."""

    def __init__(self, in_dim, hidden, out_dim, dtype=torch.float32):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, out_dim, dtype=dtype)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class DiscriminatorHead(nn.Module):
    """Scalar-logit head on the embedding; depth 1 is the linear ablation."""

    def __init__(self, in_dim, hidden, depth=2, dtype=torch.float32):
        super().__init__()
        if depth == 1:
            self.net = nn.Linear(in_dim, 1, dtype=dtype)
        else:
            self.net = nn.Sequential(
                nn.Linear(in_dim, hidden, dtype=dtype),
                nn.ReLU(),
                nn.Linear(hidden, 1, dtype=dtype),
            )

    def forward(self, x):
        return self.net(x)


@dataclass
class ModelBundle:
    """All parameterized pieces of one experiment, grouped by update role."""

    config: ArchConfig
    generator: Generator
    encoder: Encoder
    head_real: ProjectionHead
    head_fake: ProjectionHead
    head_disc: DiscriminatorHead

    def generator_parameters(self):
        return list(self.generator.parameters())

    def discriminator_parameters(self):
        """Everything updated in a discriminator step: encoder + 3 heads.

        With shared projection heads the shared module contributes its
        parameters once.
        """
        mods = [self.encoder, self.head_real]
        if self.head_fake is not self.head_real:
            mods.append(self.head_fake)
        mods.append(self.head_disc)
        return [p for m in mods for p in m.parameters()]

    def contrastive_parameters(self):
        mods = [self.encoder, self.head_real]
        if self.head_fake is not self.head_real:
            mods.append(self.head_fake)
        return [p for m in mods for p in m.parameters()]

    def named_arrays(self) -> dict:
        """Canonical name -> tensor map (module.layer.kind), for checkpoints.

        Includes power-iteration buffers so a reload resumes bit-identically.
        """
        out = {}
        parts = {
            "generator": self.generator,
            "encoder": self.encoder,
            "head_real": self.head_real,
            "head_disc": self.head_disc,
        }
        if self.head_fake is not self.head_real:
            parts["head_fake"] = self.head_fake
        for mod_name, mod in parts.items():
            for name, t in mod.state_dict().items():
                out[f"{mod_name}.{name}"] = t
        return out

    def load_arrays(self, arrays: dict):
        parts = {
            "generator": self.generator,
            "encoder": self.encoder,
            "head_real": self.head_real,
            "head_disc": self.head_disc,
        }
        if self.head_fake is not self.head_real:
            parts["head_fake"] = self.head_fake
        for mod_name, mod in parts.items():
            sd = {}
            prefix = mod_name + "."
            for key, arr in arrays.items():
                if key.startswith(prefix):
                    sd[key[len(prefix):]] = torch.as_tensor(np.asarray(arr))
            mod.load_state_dict(sd)

    def train(self, mode=True):
        for m in (self.generator, self.encoder, self.head_real, self.head_fake, self.head_disc):
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _orthogonal(rng: np.random.Generator, shape, dtype) -> torch.Tensor:
    """Orthogonal init via QR of a Gaussian draw; gain 1, rows orthonormal
    when out <= fan_in (transposed otherwise)."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    if rows < cols:
        q = q.T
    return torch.as_tensor(np.ascontiguousarray(q.reshape(shape)), dtype=dtype)


def init_bundle_(bundle: ModelBundle, rng: np.random.Generator):
    """Orthogonal weights, zero biases, random unit power-iteration vectors.

    Driven by an explicit numpy generator so initialization is a pure
    function of the seed, independent of torch global RNG state.
    """
    dt = bundle.config.torch_dtype
    mods = [bundle.generator, bundle.encoder, bundle.head_real, bundle.head_disc]
    if bundle.head_fake is not bundle.head_real:
        mods.insert(3, bundle.head_fake)
    for mod in mods:
        for name, p in mod.named_parameters():
            with torch.no_grad():
                if p.ndim >= 2:
                    p.copy_(_orthogonal(rng, tuple(p.shape), dt))
                else:
                    p.zero_()
        for name, b in mod.named_buffers():
            if name.endswith("u"):
                with torch.no_grad():
                    u = torch.as_tensor(rng.standard_normal(b.shape[0]), dtype=dt)
                    b.copy_(u / torch.linalg.vector_norm(u))


def build_models(cfg: ArchConfig, seed: int = 0) -> ModelBundle:
    """Construct and initialize every network of one experiment."""
    dt = cfg.torch_dtype
    gen = Generator(cfg)
    enc = Encoder(cfg)
    head_r = ProjectionHead(cfg.embed_dim, cfg.head_hidden, cfg.proj_dim, dtype=dt)
    head_f = head_r if cfg.shared_proj_heads else ProjectionHead(
        cfg.embed_dim, cfg.head_hidden, cfg.proj_dim, dtype=dt)
    head_d = DiscriminatorHead(cfg.embed_dim, cfg.head_hidden, cfg.disc_head_depth, dtype=dt)
    bundle = ModelBundle(cfg, gen, enc, head_r, head_f, head_d)
    init_bundle_(bundle, np.random.default_rng(seed))
    return bundle
