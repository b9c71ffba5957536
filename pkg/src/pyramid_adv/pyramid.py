"""Multi-scale tiled perturbations.

A pyramid perturbation is parameterized by one grid per scale ``s``: every
s x s pixel tile shares a single parameter. The full-resolution perturbation
is the sum over scales of the clipped, multiplier-weighted, tile-broadcast
grids. Tensors use channels-first layout; leading batch dimensions are
allowed so a whole batch of per-sample perturbations is one object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class PyramidSpec:
    """Shape of the adversary: scales, per-scale multipliers, radius, step size.

    ``scales`` are tile side lengths in pixels, strictly decreasing, ending
    at 1 (per-pixel). ``radius`` and ``step_size`` are in normalized pixel
    units ([0, 1] intensity range). With ``per_channel`` each color channel
    owns independent tile parameters; otherwise one grid is shared.
    """

    scales: tuple[int, ...] = (32, 16, 1)
    multipliers: tuple[float, ...] = (20.0, 10.0, 1.0)
    radius: float = 8 / 255
    step_size: float = 0.8 / 255
    per_channel: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        if len(self.scales) == 0:
            raise ValueError("at least one scale is required")
        if len(self.scales) != len(self.multipliers):
            raise ValueError(
                f"scales and multipliers must have equal length, "
                f"got {len(self.scales)} vs {len(self.multipliers)}"
            )
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if any(a <= b for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly decreasing, got {self.scales}")
        if self.scales[-1] != 1:
            raise ValueError(f"finest scale must be 1, got {self.scales[-1]}")
        if any(m <= 0 for m in self.multipliers):
            raise ValueError(f"multipliers must be positive, got {self.multipliers}")
        if not 0.0 <= self.radius <= 1.0:
            raise ValueError(f"radius must be in [0, 1], got {self.radius}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")

    def level_shape(self, target_shape: tuple[int, ...], scale: int) -> tuple[int, ...]:
        """Grid shape for one scale: ceil-divided spatial dims, truncated edge tiles."""
        *lead, c, h, w = target_shape
        ch = c if self.per_channel else 1
        return (*lead, ch, math.ceil(h / scale), math.ceil(w / scale))


@dataclass
class PyramidPerturbation:
    """Per-scale parameter grids plus the image shape they target.

    ``target_shape`` is the shape of the tensor being perturbed,
    ``(..., C, H, W)``; a leading batch dimension means per-sample grids.
    Mutating operations (update/project) assume a single writer.
    """

    spec: PyramidSpec
    levels: list[torch.Tensor] = field(repr=False)
    target_shape: tuple[int, ...]

    def __post_init__(self):
        self.target_shape = tuple(int(d) for d in self.target_shape)
        if len(self.target_shape) < 3:
            raise ValueError(f"target_shape needs (..., C, H, W), got {self.target_shape}")
        if len(self.levels) != len(self.spec.scales):
            raise ValueError(
                f"expected {len(self.spec.scales)} levels, got {len(self.levels)}"
            )
        for s, lvl in zip(self.spec.scales, self.levels):
            want = self.spec.level_shape(self.target_shape, s)
            if tuple(lvl.shape) != want:
                raise ValueError(
                    f"level for scale {s} has shape {tuple(lvl.shape)}, expected {want}"
                )

    @property
    def dtype(self) -> torch.dtype:
        return self.levels[0].dtype

    def requires_grad_(self, flag: bool = True) -> "PyramidPerturbation":
        for lvl in self.levels:
            lvl.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for lvl in self.levels:
            lvl.grad = None

    def detach_clone(self) -> "PyramidPerturbation":
        return PyramidPerturbation(
            spec=self.spec,
            levels=[lvl.detach().clone() for lvl in self.levels],
            target_shape=self.target_shape,
        )


def init_zeros(
    spec: PyramidSpec,
    target_shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
    device: torch.device | str | None = None,
) -> PyramidPerturbation:
    """All-zero perturbation state for images of ``target_shape``."""
    *lead, c, h, w = target_shape
    if h < 1 or w < 1:
        raise ValueError(f"spatial dims must be >= 1, got {h}x{w}")
    for s in spec.scales:
        if s > h and s > w:
            raise ValueError(f"scale {s} exceeds both spatial dimensions {h}x{w}")
    levels = [
        torch.zeros(spec.level_shape(tuple(target_shape), s), dtype=dtype, device=device)
        for s in spec.scales
    ]
    return PyramidPerturbation(spec=spec, levels=levels, target_shape=tuple(target_shape))


def materialize(p: PyramidPerturbation, radius: float) -> torch.Tensor:
    """Full-resolution perturbation: sum over scales of clip-then-broadcast grids.

    Each grid value is clamped into [-radius, +radius], broadcast over its
    s x s pixel tile (edge tiles truncated), and weighted by the scale's
    multiplier. Differentiable w.r.t. the level tensors with the clamp
    subgradient (zero outside the clip interval).
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    *lead, c, h, w = p.target_shape
    out = torch.zeros(p.target_shape, dtype=p.dtype, device=p.levels[0].device)
    for scale, mult, lvl in zip(p.spec.scales, p.spec.multipliers, p.levels):
        v = lvl.clamp(-radius, radius)
        if scale > 1:
            v = v.repeat_interleave(scale, dim=-2)[..., :h, :]
            v = v.repeat_interleave(scale, dim=-1)[..., :w]
        if not p.spec.per_channel and c > 1:
            v = v.expand(p.target_shape)
        out = out + mult * v
    return out


def project(p: PyramidPerturbation, radius: float) -> PyramidPerturbation:
    """Clamp every stored level value into [-radius, +radius], in place."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    with torch.no_grad():
        for lvl in p.levels:
            lvl.clamp_(-radius, radius)
    return p


def sign_ascent_update(
    p: PyramidPerturbation,
    grads: list[torch.Tensor],
    step_size: float,
    radius: float,
) -> PyramidPerturbation:
    """One sign-gradient ascent step per level, then projection, in place.

    sign(0) = 0: coordinates with exactly zero gradient do not move. The
    update is invariant to positive rescaling of the gradients.
    """
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    if len(grads) != len(p.levels):
        raise ValueError(f"expected {len(p.levels)} gradients, got {len(grads)}")
    for scale, lvl, g in zip(p.spec.scales, p.levels, grads):
        if tuple(g.shape) != tuple(lvl.shape):
            raise ValueError(
                f"gradient for scale {scale} has shape {tuple(g.shape)}, "
                f"expected {tuple(lvl.shape)}"
            )
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for scale-{scale} level")
    with torch.no_grad():
        for lvl, g in zip(p.levels, grads):
            lvl.add_(step_size * torch.sign(g)).clamp_(-radius, radius)
    return p
