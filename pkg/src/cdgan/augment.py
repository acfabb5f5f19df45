"""Stochastic, differentiable image augmentation pipeline.

Transform parameters are sampled up front into per-element
``SampledTransform`` records (so reapplication is deterministic), then
applied with ops that are all differentiable w.r.t. the input pixels:
crop via bilinear resampling (align-corners off, zero padding), color ops
as smooth pixel maps, flip/translate/cutout as linear maps.

Pipeline order is fixed: crop, flip, color jitter, grayscale, blur,
translate, cutout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "AugmentationSpec",
    "SampledTransform",
    "sample_transform",
    "apply_transform",
    "augment",
    "PRESETS",
]

_GRAY = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class AugmentationSpec:
    """Declarative description of the stochastic augmentation pipeline."""

    crop: bool = True
    crop_scale: tuple = (0.08, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: tuple = (0.4, 0.4, 0.4, 0.1)  # brightness/contrast/saturation/hue
    gray_p: float = 0.2
    blur_p: float = 0.0
    blur_sigma: tuple = (0.1, 2.0)
    translate_px: int = 0
    cutout_p: float = 0.0
    cutout_frac: float = 0.5

    def __post_init__(self):
        for p in (self.flip_p, self.jitter_p, self.gray_p, self.blur_p, self.cutout_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0,1]: {p}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop scale range must be within (0, 1]: {self.crop_scale}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("crop_scale", "crop_ratio", "jitter_strength", "blur_sigma"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# Named presets. "simclr" is the strong contrastive pipeline at 32x32
# (no blur at this resolution); "hflip_trans" is the weak GAN-standard one.
PRESETS = {
    "simclr": AugmentationSpec(),
    "hflip_trans": AugmentationSpec(
        crop=False, flip_p=0.5, jitter_p=0.0, gray_p=0.0, translate_px=4),
    "identity": AugmentationSpec(
        crop=False, crop_scale=(1.0, 1.0), flip_p=0.0, jitter_p=0.0, gray_p=0.0),
}


@dataclass(frozen=True)
class SampledTransform:
    """Fully resolved transform parameters for one batch element."""

    crop_box: tuple | None = None       # (top, left, height, width) in pixels
    flip: bool = False
    color: tuple | None = None          # (brightness, contrast, saturation, hue)
    gray: bool = False
    blur_sigma: float | None = None
    translate: tuple = (0, 0)           # (dy, dx) in pixels
    cutout: tuple | None = None         # (center_y, center_x, size)


def sample_transform(spec: AugmentationSpec, rng: np.random.Generator,
                     batch_size: int, image_size: int) -> list[SampledTransform]:
    """Draw one independent SampledTransform per batch element."""
    out = []
    for _ in range(batch_size):
        crop_box = _sample_crop(spec, rng, image_size) if spec.crop else None
        flip = bool(rng.random() < spec.flip_p)
        color = None
        if rng.random() < spec.jitter_p:
            sb, sc, ss, sh = spec.jitter_strength
            color = (
                float(rng.uniform(max(0.0, 1 - sb), 1 + sb)),
                float(rng.uniform(max(0.0, 1 - sc), 1 + sc)),
                float(rng.uniform(max(0.0, 1 - ss), 1 + ss)),
                float(rng.uniform(-sh, sh)),
            )
        gray = bool(rng.random() < spec.gray_p)
        blur_sigma = None
        if rng.random() < spec.blur_p:
            blur_sigma = float(rng.uniform(*spec.blur_sigma))
        translate = (0, 0)
        if spec.translate_px > 0:
            translate = (int(rng.integers(-spec.translate_px, spec.translate_px + 1)),
                         int(rng.integers(-spec.translate_px, spec.translate_px + 1)))
        cutout = None
        if rng.random() < spec.cutout_p:
            size = max(1, int(round(spec.cutout_frac * image_size)))
            cutout = (int(rng.integers(0, image_size)), int(rng.integers(0, image_size)), size)
        out.append(SampledTransform(crop_box, flip, color, gray, blur_sigma, translate, cutout))
    return out


def _sample_crop(spec, rng, size):
    """Area/aspect sampling with fallback to the full frame after 10 tries."""
    lo, hi = spec.crop_scale
    if lo == hi == 1.0:
        return (0, 0, size, size)
    area = size * size
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        log_r = rng.uniform(math.log(spec.crop_ratio[0]), math.log(spec.crop_ratio[1]))
        ratio = math.exp(log_r)
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= size and 0 < h <= size:
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            return (top, left, h, w)
    return (0, 0, size, size)


def apply_transform(images: torch.Tensor, transforms: list[SampledTransform]) -> torch.Tensor:
    """Apply per-element transforms; output shape equals input shape.

    Differentiable w.r.t. the input pixels everywhere except the [-1, 1]
    clamp of the color ops.
    """
    if images.ndim != 4:
        raise ValueError("expected a rank-4 image batch")
    if images.shape[0] != len(transforms):
        raise ValueError(
            f"{len(transforms)} transforms for a batch of {images.shape[0]}")
    x = images
    x = _crop_resize(x, transforms)
    x = _flip(x, transforms)
    x = _color_jitter(x, transforms)
    x = _grayscale(x, transforms)
    x = _blur(x, transforms)
    x = _translate(x, transforms)
    x = _cutout(x, transforms)
    return x


def augment(images, spec, rng):
    """One view: sample fresh per-element transforms and apply them."""
    ts = sample_transform(spec, rng, images.shape[0], images.shape[-1])
    return apply_transform(images, ts)


def _crop_resize(x, transforms):
    if all(t.crop_box is None for t in transforms):
        return x
    n, _, hh, ww = x.shape
    thetas = []
    for t in transforms:
        if t.crop_box is None:
            box = (0, 0, hh, ww)
        else:
            box = t.crop_box
        top, left, h, w = box
        # affine map from output normalized coords to the crop box, in the
        # align-corners-off convention grid_sample uses
        sx = w / ww
        sy = h / hh
        cx = 2 * (left + w / 2) / ww - 1
        cy = 2 * (top + h / 2) / hh - 1
        thetas.append([[sx, 0.0, cx], [0.0, sy, cy]])
    theta = torch.tensor(thetas, dtype=x.dtype, device=x.device)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=False)


def _flip(x, transforms):
    idx = [i for i, t in enumerate(transforms) if t.flip]
    if not idx:
        return x
    out = x.clone()
    out[idx] = torch.flip(x[idx], dims=[-1])
    return out


def _to01(x):
    return (x + 1.0) * 0.5


def _from01(x):
    return x.clamp(0.0, 1.0) * 2.0 - 1.0


def _luma(x01):
    w = torch.tensor(_GRAY, dtype=x01.dtype, device=x01.device).view(1, 3, 1, 1)
    return (x01 * w).sum(dim=1, keepdim=True)


def _hue_matrix(angle, dtype):
    """Rotation about the gray axis in RGB space; smooth in the angle."""
    theta = angle * math.pi
    c, s = math.cos(theta), math.sin(theta)
    one_third = 1.0 / 3.0
    sq = math.sqrt(1.0 / 3.0)
    m = [[c + (1 - c) * one_third, one_third * (1 - c) - sq * s, one_third * (1 - c) + sq * s],
         [one_third * (1 - c) + sq * s, c + one_third * (1 - c), one_third * (1 - c) - sq * s],
         [one_third * (1 - c) - sq * s, one_third * (1 - c) + sq * s, c + one_third * (1 - c)]]
    return torch.tensor(m, dtype=dtype)


def _color_jitter(x, transforms):
    if all(t.color is None for t in transforms):
        return x
    if x.shape[1] != 3:
        raise ValueError("color jitter requires 3-channel images")
    rows = []
    for i, t in enumerate(transforms):
        xi = x[i:i + 1]
        if t.color is None:
            rows.append(xi)
            continue
        b, c, s, h = t.color
        y = _to01(xi)
        y = y * b
        mean = _luma(y).mean(dim=(2, 3), keepdim=True)
        y = (y - mean) * c + mean
        g = _luma(y)
        y = (y - g) * s + g
        if h != 0.0:
            m = _hue_matrix(h, y.dtype).to(y.device)
            y = torch.einsum("rc,ncHW->nrHW", m, y)
        rows.append(_from01(y))
    return torch.cat(rows, dim=0)


def _grayscale(x, transforms):
    idx = [i for i, t in enumerate(transforms) if t.gray]
    if not idx:
        return x
    out = x.clone()
    sub = _to01(x[idx])
    g = _luma(sub).expand(-1, x.shape[1], -1, -1)
    out[idx] = g * 2.0 - 1.0
    return out


def _gaussian_kernel(sigma, dtype):
    radius = int(math.ceil(3 * sigma))
    coords = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(coords ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def _blur(x, transforms):
    if all(t.blur_sigma is None for t in transforms):
        return x
    rows = []
    for i, t in enumerate(transforms):
        xi = x[i:i + 1]
        if t.blur_sigma is None:
            rows.append(xi)
            continue
        k = _gaussian_kernel(t.blur_sigma, x.dtype).to(x.device)
        r = (k.numel() - 1) // 2
        ch = x.shape[1]
        kx = k.view(1, 1, 1, -1).expand(ch, 1, 1, -1)
        ky = k.view(1, 1, -1, 1).expand(ch, 1, -1, 1)
        # reflect padding: zero padding would darken the borders of [-1,1] data
        y = F.pad(xi, (r, r, 0, 0), mode="reflect")
        y = F.conv2d(y, kx, groups=ch)
        y = F.pad(y, (0, 0, r, r), mode="reflect")
        y = F.conv2d(y, ky, groups=ch)
        rows.append(y)
    return torch.cat(rows, dim=0)


def _translate(x, transforms):
    if all(t.translate == (0, 0) for t in transforms):
        return x
    rows = []
    for i, t in enumerate(transforms):
        xi = x[i:i + 1]
        dy, dx = t.translate
        if (dy, dx) != (0, 0):
            xi = _shift2d(xi, dy, dx)
        rows.append(xi)
    return torch.cat(rows, dim=0)


def _shift2d(x, dy, dx):
    """Zero-padded integer pixel shift (a linear map of the pixels)."""
    _, _, h, w = x.shape
    out = torch.zeros_like(x)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    if ys.start < ys.stop and xs.start < xs.stop:
        out[:, :, ys, xs] = x[:, :, ys_src, xs_src]
    return out


def _cutout(x, transforms):
    if all(t.cutout is None for t in transforms):
        return x
    n, _, h, w = x.shape
    mask = torch.ones((n, 1, h, w), dtype=x.dtype, device=x.device)
    for i, t in enumerate(transforms):
        if t.cutout is None:
            continue
        cy, cx, size = t.cutout
        half = size // 2
        y0, y1 = max(cy - half, 0), min(cy - half + size, h)
        x0, x1 = max(cx - half, 0), min(cx - half + size, w)
        mask[i, :, y0:y1, x0:x1] = 0.0
    return x * mask
