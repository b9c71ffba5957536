"""Synthetic corruption suite for desk-scale robustness checks.

Four corruptions, three severities each, all implemented as pure tensor
ops. Severity 0 is the identity for every corruption. Only gaussian_noise
consumes randomness, and it takes an explicit generator, so the whole
suite is deterministic given a seed. Numbers from this suite are
comparable across runs of this package, nothing more.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

SUITE_VERSION = 1

_NOISE_STD = {1: 0.04, 2: 0.10, 3: 0.20}
_BLUR_SIGMA = {1: 0.5, 2: 1.0, 3: 1.8}
_CONTRAST_FACTOR = {1: 0.6, 2: 0.4, 3: 0.25}
_PIXELATE_BLOCK = {1: 2, 2: 4, 3: 8}


def gaussian_noise(x: torch.Tensor, severity: int, generator: torch.Generator | None = None) -> torch.Tensor:
    if severity == 0:
        return x.clone()
    std = _NOISE_STD[severity]
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return (x + std * noise).clamp(0.0, 1.0)


def blur(x: torch.Tensor, severity: int, generator=None) -> torch.Tensor:
    if severity == 0:
        return x.clone()
    sigma = _BLUR_SIGMA[severity]
    half = int(math.ceil(2 * sigma))
    coords = torch.arange(-half, half + 1, dtype=x.dtype)
    k = torch.exp(-(coords**2) / (2 * sigma**2))
    k = k / k.sum()
    c = x.shape[1]
    kx = k.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = k.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    padded = F.pad(x, (half, half, half, half), mode="reflect")
    out = F.conv2d(padded, kx, groups=c)
    out = F.conv2d(out, ky, groups=c)
    return out.clamp(0.0, 1.0)


def contrast(x: torch.Tensor, severity: int, generator=None) -> torch.Tensor:
    if severity == 0:
        return x.clone()
    factor = _CONTRAST_FACTOR[severity]
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return ((x - mean) * factor + mean).clamp(0.0, 1.0)


def pixelate(x: torch.Tensor, severity: int, generator=None) -> torch.Tensor:
    if severity == 0:
        return x.clone()
    block = _PIXELATE_BLOCK[severity]
    h, w = x.shape[-2:]
    down = F.avg_pool2d(x, kernel_size=block, stride=block, ceil_mode=True)
    up = down.repeat_interleave(block, dim=-2)[..., :h, :]
    return up.repeat_interleave(block, dim=-1)[..., :w]


CORRUPTIONS = {
    "gaussian_noise": gaussian_noise,
    "blur": blur,
    "contrast": contrast,
    "pixelate": pixelate,
}


def apply_corruption(name: str, x: torch.Tensor, severity: int, generator=None) -> torch.Tensor:
    if name not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {name!r}, expected one of {sorted(CORRUPTIONS)}")
    if severity not in (0, 1, 2, 3):
        raise ValueError(f"severity must be in 0..3, got {severity}")
    return CORRUPTIONS[name](x, severity, generator)
