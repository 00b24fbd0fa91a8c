"""Stochastic augmentation policies.

Parameters for each view are drawn on the host from a keyed stream
(:func:`sample_params`), then applied to many views at once in torch
(:func:`augment_views`). Ops run in a fixed order: random resized crop,
colour jitter, grayscale, Gaussian blur, solarization, horizontal flip,
normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .rng import RngStream

_GRAY = (0.299, 0.587, 0.114)
MAX_CROP_TRIES = 10


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_area_range: tuple[float, float] = (0.2, 1.0)
    crop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 32
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    solarize_prob: float = 0.0
    solarize_threshold: float = 0.5
    hflip_prob: float = 0.5
    normalize_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    normalize_std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "solarize_prob", "hflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        lo, hi = self.crop_area_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"bad crop_area_range {self.crop_area_range}")
        alo, ahi = self.crop_aspect_range
        if not 0.0 < alo <= ahi:
            raise ValueError(f"bad crop_aspect_range {self.crop_aspect_range}")
        if self.out_size < 1:
            raise ValueError("out_size must be >= 1")
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std must be positive")

    def with_stats(self, mean, std) -> "AugmentationPolicy":
        return replace(self, normalize_mean=tuple(mean), normalize_std=tuple(std))


def _policy(area, blur_prob, solarize_prob, out_size):
    return AugmentationPolicy(crop_area_range=area, blur_prob=blur_prob,
                              solarize_prob=solarize_prob, out_size=out_size)


def t1_policy(out_size: int = 32) -> AugmentationPolicy:
    return _policy((0.2, 1.0), 0.1, 0.0, out_size)


def t2_policy(out_size: int = 32) -> AugmentationPolicy:
    return _policy((0.2, 1.0), 1.0, 0.2, out_size)


def t3_policy(out_size: int = 32) -> AugmentationPolicy:
    return _policy((0.1, 1.0), 0.1, 0.0, out_size)


def t4_policy(out_size: int = 32) -> AugmentationPolicy:
    return _policy((0.1, 1.0), 1.0, 0.2, out_size)


def identity_policy(out_size: int) -> AugmentationPolicy:
    """Deterministic resize only: every random op off, no normalization shift."""
    return AugmentationPolicy(crop_area_range=(1.0, 1.0), crop_aspect_range=(1.0, 1.0),
                              out_size=out_size, jitter_prob=0.0, grayscale_prob=0.0,
                              blur_prob=0.0, solarize_prob=0.0, hflip_prob=0.0)


@dataclass(frozen=True)
class AugParams:
    crop: tuple[int, int, int, int]  # top, left, height, width
    jitter: bool
    factors: tuple[float, float, float, float]  # brightness, contrast, saturation, hue shift
    gray: bool
    blur: bool
    sigma: float
    solarize: bool
    flip: bool


# uniforms consumed per view: crop tries (area, aspect) + crop position,
# then 5 coin flips, 4 jitter factors and the blur sigma
_CROP_DRAWS = 2 * MAX_CROP_TRIES + 2
_VIEW_DRAWS = _CROP_DRAWS + 10


def sample_crop(u: np.ndarray, height: int, width: int, policy: AugmentationPolicy):
    """Rejection-sample a crop box from ``_CROP_DRAWS`` uniforms; falls back to the full image."""
    area = height * width
    lo, hi = policy.crop_area_range
    log_lo, log_hi = math.log(policy.crop_aspect_range[0]), math.log(policy.crop_aspect_range[1])
    for k in range(MAX_CROP_TRIES):
        target = area * (lo + (hi - lo) * u[2 * k])
        ratio = math.exp(log_lo + (log_hi - log_lo) * u[2 * k + 1])
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = min(int(u[-2] * (height - h + 1)), height - h)
            left = min(int(u[-1] * (width - w + 1)), width - w)
            return top, left, h, w
    return 0, 0, height, width


def sample_params(gen: np.random.Generator, height: int, width: int,
                  policy: AugmentationPolicy) -> AugParams:
    # one fixed-size draw per view keeps the stream layout independent of outcomes
    u = gen.random(_VIEW_DRAWS)
    crop = sample_crop(u[:_CROP_DRAWS], height, width, policy)
    flags, rest = u[_CROP_DRAWS:_CROP_DRAWS + 5], u[_CROP_DRAWS + 5:]
    b, c, s, h = policy.brightness, policy.contrast, policy.saturation, policy.hue

    def span(x, lo, hi):
        return float(lo + (hi - lo) * x)

    factors = (span(rest[0], max(0.0, 1 - b), 1 + b), span(rest[1], max(0.0, 1 - c), 1 + c),
               span(rest[2], max(0.0, 1 - s), 1 + s), span(rest[3], -h, h))
    return AugParams(crop=crop, jitter=bool(flags[0] < policy.jitter_prob), factors=factors,
                     gray=bool(flags[1] < policy.grayscale_prob), blur=bool(flags[2] < policy.blur_prob),
                     sigma=span(rest[4], *policy.blur_sigma_range),
                     solarize=bool(flags[3] < policy.solarize_prob),
                     flip=bool(flags[4] < policy.hflip_prob))


# --- batched torch ops --------------------------------------------------------

def crop_resize(src: torch.Tensor, boxes: Sequence[tuple[int, int, int, int]], out_size: int) -> torch.Tensor:
    """Bilinear crop-and-resize of ``src[k]`` (B, C, H, W) to ``out_size`` squares.

    Output pixel centres are mapped into the crop box (half-pixel convention),
    the same sampling grid as a plain bilinear resize of the cropped region.
    """
    _, _, height, width = src.shape
    box = torch.tensor(boxes, dtype=src.dtype)
    top, left, h, w = box.unbind(1)
    theta = torch.zeros(len(boxes), 2, 3, dtype=src.dtype)
    theta[:, 0, 0] = w / width
    theta[:, 0, 2] = (2 * left + w) / width - 1
    theta[:, 1, 1] = h / height
    theta[:, 1, 2] = (2 * top + h) / height - 1
    grid = F.affine_grid(theta, [len(boxes), src.shape[1], out_size, out_size], align_corners=False)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _gray(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(_GRAY, dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


def rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(1)
    maxc, _ = x.max(1)
    minc, _ = x.min(1)
    delta = maxc - minc
    safe = torch.where(delta > 0, delta, torch.ones_like(delta))
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    s = torch.where(maxc > 0, delta / torch.where(maxc > 0, maxc, torch.ones_like(maxc)),
                    torch.zeros_like(maxc))
    return torch.stack([h, s, maxc], 1)


def hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x.unbind(1)
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.long() % 6
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = torch.stack([
        torch.stack([v, q, p, p, t, v], 1),
        torch.stack([t, v, v, q, p, p], 1),
        torch.stack([p, p, t, v, v, q], 1),
    ], 1)  # (B, 3, 6, H, W)
    idx = i.unsqueeze(1).unsqueeze(2).expand(-1, 3, 1, -1, -1)
    return table.gather(2, idx).squeeze(2)


def color_jitter(x: torch.Tensor, factors: torch.Tensor) -> torch.Tensor:
    """Brightness, contrast, saturation, hue in that fixed order. ``factors`` is (B, 4)."""
    view = lambda col: factors[:, col].view(-1, 1, 1, 1)
    x = (x * view(0)).clamp(0, 1)
    mean = _gray(x).mean(dim=(2, 3), keepdim=True)
    x = ((x - mean) * view(1) + mean).clamp(0, 1)
    g = _gray(x)
    x = ((x - g) * view(2) + g).clamp(0, 1)
    hsv = rgb_to_hsv(x)
    hsv = torch.cat([(hsv[:, :1] + view(3)) % 1.0, hsv[:, 1:]], 1)
    return hsv_to_rgb(hsv).clamp(0, 1)


def gaussian_blur(x: torch.Tensor, sigma: torch.Tensor, radius: int) -> torch.Tensor:
    """Separable blur with a per-image sigma, replicate padding.

    ``radius`` must not depend on the batch contents, or a view's result would
    change with whatever else shares its batch.
    """
    b, c, h, w = x.shape
    offs = torch.arange(-radius, radius + 1, dtype=x.dtype)
    kern = torch.exp(-0.5 * (offs.view(1, -1) / sigma.view(-1, 1)) ** 2)
    kern = kern / kern.sum(1, keepdim=True)
    kern = kern.repeat_interleave(c, 0)  # (b*c, k)
    flat = x.reshape(1, b * c, h, w)
    flat = F.pad(flat, (radius, radius, 0, 0), mode="replicate")
    flat = F.conv2d(flat, kern.view(b * c, 1, 1, -1), groups=b * c)
    flat = F.pad(flat, (0, 0, radius, radius), mode="replicate")
    flat = F.conv2d(flat, kern.view(b * c, 1, -1, 1), groups=b * c)
    return flat.view(b, c, h, w)


def augment_views(src: torch.Tensor, params: Sequence[AugParams], policy: AugmentationPolicy,
                  out_size: int | None = None) -> torch.Tensor:
    """Apply one parameter set per row of ``src`` (B, C, H, W); returns (B, C, S, S)."""
    size = policy.out_size if out_size is None else out_size
    x = crop_resize(src, [p.crop for p in params], size)

    def masked(flag: str) -> torch.Tensor:
        return torch.tensor([getattr(p, flag) for p in params]).view(-1, 1, 1, 1)

    if x.shape[1] == 3:
        jit = masked("jitter")
        if jit.any():
            factors = torch.tensor([p.factors for p in params], dtype=x.dtype)
            x = torch.where(jit, color_jitter(x, factors), x)
        gray = masked("gray")
        if gray.any():
            x = torch.where(gray, _gray(x).expand_as(x), x)
    blur = masked("blur")
    if blur.any():
        sig = torch.tensor([p.sigma for p in params], dtype=x.dtype)
        radius = max(1, math.ceil(3.0 * policy.blur_sigma_range[1]))
        x = torch.where(blur, gaussian_blur(x, sig, radius), x)
    sol = masked("solarize")
    if sol.any():
        x = torch.where(sol & (x >= policy.solarize_threshold), 1.0 - x, x)
    flip = masked("flip")
    if flip.any():
        x = torch.where(flip, x.flip(3), x)
    mean = torch.tensor(policy.normalize_mean, dtype=x.dtype).view(1, -1, 1, 1)
    std = torch.tensor(policy.normalize_std, dtype=x.dtype).view(1, -1, 1, 1)
    return (x - mean) / std


def to_chw(img) -> torch.Tensor:
    """(H, W, C) array or (N, H, W, C) batch -> channels-first float32 tensor."""
    t = torch.from_numpy(np.array(img, dtype=np.float32))
    return t.movedim(-1, -3).contiguous()


def apply_policy(img: np.ndarray, policy: AugmentationPolicy, rng: RngStream) -> np.ndarray:
    """Augment a single (H, W, C) image; returns (out_size, out_size, C)."""
    h, w = img.shape[:2]
    params = sample_params(rng.generator(), h, w, policy)
    out = augment_views(to_chw(img)[None], [params], policy)
    return out[0].movedim(0, -1).numpy()
