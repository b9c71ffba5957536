"""Inner maximizers and the radius schedule.

Two adversaries share the pyramid parameterization: a multi-step sample-wise
sign-ascent attack (one forward/backward per step) and a universal update
that reuses gradients already produced by the training backward pass, adding
no passes of its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .costs import GENERATION, CostLedger
from .models import forward_loss
from .pyramid import PyramidPerturbation, PyramidSpec, init_zeros, materialize, project, sign_ascent_update

STEP_RULE_RATIO = "radius/steps"
STEP_RULE_EXPLICIT = "explicit"


@dataclass(frozen=True)
class AttackConfig:
    """Sample-wise attack settings: step count, init, and step-size rule."""

    spec: PyramidSpec = field(default_factory=PyramidSpec)
    num_steps: int = 5
    random_init: bool = False
    step_size_rule: str = STEP_RULE_RATIO

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.step_size_rule not in (STEP_RULE_RATIO, STEP_RULE_EXPLICIT):
            raise ValueError(f"unknown step_size_rule {self.step_size_rule!r}")

    def step_size(self, radius: float) -> float:
        if self.step_size_rule == STEP_RULE_RATIO:
            return radius / self.num_steps
        return self.spec.step_size


@dataclass(frozen=True)
class RadiusSchedule:
    """Linear radius decay from r_start to r_end between two epochs."""

    r_start: float = 8 / 255
    r_end: float = 0.8 / 255
    e_start: int = 3
    e_end: int = 30
    enabled: bool = True

    def __post_init__(self):
        if not (self.r_start >= self.r_end >= 0):
            raise ValueError(f"need r_start >= r_end >= 0, got {self.r_start}, {self.r_end}")
        if not (self.e_end > self.e_start >= 0):
            raise ValueError(f"need e_end > e_start >= 0, got {self.e_start}, {self.e_end}")


def radius_at_epoch(schedule: RadiusSchedule, epoch: int) -> float:
    """Scheduled radius: linear interpolation, flat before e_start and after e_end."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if not schedule.enabled:
        return schedule.r_start
    if epoch <= schedule.e_start:
        return schedule.r_start
    if epoch >= schedule.e_end:
        return schedule.r_end
    frac = (epoch - schedule.e_start) / (schedule.e_end - schedule.e_start)
    return schedule.r_start + (schedule.r_end - schedule.r_start) * frac


def pgd_pyramid_attack(
    model,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: AttackConfig,
    radius: float,
    ledger: CostLedger | None = None,
    generator: torch.Generator | None = None,
) -> tuple[PyramidPerturbation, torch.Tensor]:
    """Multi-step sign ascent on per-sample pyramid levels.

    Each step costs one forward and one backward over the batch, charged to
    the ledger's generation category. Model parameters are untouched.
    Returns the final per-sample perturbation batch and the perturbed
    images, pixel-clamped to [0, 1].
    """
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {tuple(images.shape)}")
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    n = images.shape[0]
    p = init_zeros(cfg.spec, tuple(images.shape), dtype=images.dtype, device=images.device)
    if cfg.random_init and radius > 0:
        with torch.no_grad():
            for lvl in p.levels:
                lvl.uniform_(-radius, radius, generator=generator)
    tau = cfg.step_size(radius)
    for _ in range(cfg.num_steps):
        p.requires_grad_(True)
        delta = materialize(p, radius)
        x_adv = (images + delta).clamp(0.0, 1.0)
        loss, _ = forward_loss(model, x_adv, labels)
        grads = torch.autograd.grad(loss, p.levels, allow_unused=True)
        grads = [
            g if g is not None else torch.zeros_like(lvl)
            for g, lvl in zip(grads, p.levels)
        ]
        if ledger is not None:
            ledger.record_forward(n, GENERATION)
            ledger.record_backward(n, GENERATION)
        p.requires_grad_(False)
        if tau > 0:
            sign_ascent_update(p, grads, tau, radius)
    with torch.no_grad():
        x_adv = (images + materialize(p, radius)).clamp(0.0, 1.0)
    return p, x_adv


def universal_update(
    p: PyramidPerturbation,
    level_grads: list[torch.Tensor],
    schedule: RadiusSchedule,
    epoch: int,
    step_size: float,
) -> PyramidPerturbation:
    """Ascent step from harvested gradients, projected to the scheduled radius.

    The gradients must come from an already-computed backward pass; this
    never touches the model, so it consumes zero additional passes.
    """
    radius = radius_at_epoch(schedule, epoch)
    if step_size > 0:
        return sign_ascent_update(p, level_grads, step_size, radius)
    return project(p, radius)
