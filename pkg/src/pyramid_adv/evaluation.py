"""Measurement instruments: accuracy, attack strength, corruption
robustness, filter-normalized loss landscapes, and perturbation image export.

Every operation here treats the model and any perturbation state as
read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from PIL import Image

from .adversary import AttackConfig, pgd_pyramid_attack
from .corruptions import CORRUPTIONS, apply_corruption
from .models import forward_loss
from .pyramid import PyramidPerturbation, materialize


@dataclass
class EvalReport:
    clean_acc: float
    adv_error_increase_train: float | None = None
    adv_error_increase_val: float | None = None
    corruption_accs: dict | None = None
    landscape: list | None = None
    landscape_alphas: list | None = None

    def __post_init__(self):
        if not 0.0 <= self.clean_acc <= 1.0:
            raise ValueError(f"clean_acc out of [0, 1]: {self.clean_acc}")
        for v in (self.adv_error_increase_train, self.adv_error_increase_val):
            if v is not None and not -1.0 <= v <= 1.0:
                raise ValueError(f"error increase out of [-1, 1]: {v}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def accuracy(model, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 256) -> float:
    if images.shape[0] == 0:
        raise ValueError("empty split")
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            logits = model(images[i : i + batch_size])
            correct += int((logits.argmax(dim=1) == labels[i : i + batch_size]).sum())
    model.train(was_training)
    return correct / images.shape[0]


def error_rate(model, images, labels, batch_size: int = 256) -> float:
    return 1.0 - accuracy(model, images, labels, batch_size)


def attack_strength(
    model,
    images: torch.Tensor,
    labels: torch.Tensor,
    universal_state: PyramidPerturbation | None = None,
    attack_cfg: AttackConfig | None = None,
    radius: float | None = None,
    batch_size: int = 256,
) -> float:
    """Error-rate increase after attack: err(x + delta) - err(x).

    Universal mode replays the trained shared perturbation; sample-wise mode
    runs a fresh multi-step attack per batch on the frozen model.
    """
    if (universal_state is None) == (attack_cfg is None):
        raise ValueError("pass exactly one of universal_state or attack_cfg")
    if images.shape[0] == 0:
        raise ValueError("empty split")
    was_training = model.training
    model.eval()
    delta = None
    if universal_state is not None:
        r = radius if radius is not None else universal_state.spec.radius
        with torch.no_grad():
            delta = materialize(universal_state, r)
    wrong_clean = 0
    wrong_adv = 0
    for i in range(0, images.shape[0], batch_size):
        x = images[i : i + batch_size]
        y = labels[i : i + batch_size]
        if delta is not None:
            with torch.no_grad():
                x_adv = (x + delta).clamp(0.0, 1.0)
        else:
            r = radius if radius is not None else attack_cfg.spec.radius
            _, x_adv = pgd_pyramid_attack(model, x, y, attack_cfg, r)
        with torch.no_grad():
            wrong_clean += int((model(x).argmax(dim=1) != y).sum())
            wrong_adv += int((model(x_adv).argmax(dim=1) != y).sum())
    model.train(was_training)
    # integer counts keep the zero-perturbation case exactly zero
    return (wrong_adv - wrong_clean) / images.shape[0]


def corruption_eval(
    model,
    images: torch.Tensor,
    labels: torch.Tensor,
    corruptions: list[str] | None = None,
    severities: tuple[int, ...] = (1, 2, 3),
    seed: int = 0,
    batch_size: int = 256,
) -> dict[str, dict[int, float]]:
    """Accuracy per (corruption, severity), deterministic given the seed."""
    names = list(CORRUPTIONS) if corruptions is None else list(corruptions)
    out: dict[str, dict[int, float]] = {}
    for ci, name in enumerate(names):
        out[name] = {}
        for severity in severities:
            gen = torch.Generator().manual_seed(seed * 1000 + ci * 10 + severity)
            corrupted = apply_corruption(name, images, severity, gen)
            out[name][severity] = accuracy(model, corrupted, labels, batch_size)
    return out


def _filter_normalized_direction(model, generator: torch.Generator) -> list[torch.Tensor]:
    """Random Gaussian direction rescaled per filter to the weight norms.

    Rows along a weight tensor's leading dimension count as filters; biases
    and norm scales get a zero direction; zero-norm filters are skipped
    with direction zero.
    """
    direction = []
    for p in model.parameters():
        if p.ndim <= 1:
            direction.append(torch.zeros_like(p))
            continue
        d = torch.randn(p.shape, generator=generator, dtype=p.dtype)
        flat_p = p.detach().reshape(p.shape[0], -1)
        flat_d = d.reshape(p.shape[0], -1)
        p_norm = flat_p.norm(dim=1, keepdim=True)
        d_norm = flat_d.norm(dim=1, keepdim=True).clamp_min(1e-12)
        scale = torch.where(p_norm > 0, p_norm / d_norm, torch.zeros_like(p_norm))
        direction.append((flat_d * scale).reshape(p.shape))
    return direction


def loss_landscape(
    model,
    images: torch.Tensor,
    labels: torch.Tensor,
    grid_n: int = 21,
    span: float = 1.0,
    seed: int = 0,
    batch_size: int = 256,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Loss over a 2D slice theta + a1*d1 + a2*d2 with filter-normalized
    random directions; the center cell is the unperturbed loss.

    Parameters are restored bit-exactly afterwards.
    """
    if grid_n % 2 != 1:
        raise ValueError(f"grid_n must be odd, got {grid_n}")
    if images.shape[0] == 0:
        raise ValueError("empty sample")
    gen = torch.Generator().manual_seed(seed)
    d1 = _filter_normalized_direction(model, gen)
    d2 = _filter_normalized_direction(model, gen)
    params = list(model.parameters())
    base = [p.detach().clone() for p in params]
    alphas = torch.linspace(-span, span, grid_n)
    alphas[grid_n // 2] = 0.0
    grid = torch.zeros(grid_n, grid_n)
    was_training = model.training
    model.eval()
    n_total = images.shape[0]
    with torch.no_grad():
        for i, a1 in enumerate(alphas):
            for j, a2 in enumerate(alphas):
                for p, b, u, v in zip(params, base, d1, d2):
                    p.copy_(b + a1 * u + a2 * v)
                total = 0.0
                for k in range(0, n_total, batch_size):
                    x = images[k : k + batch_size]
                    y = labels[k : k + batch_size]
                    total += float(
                        torch.nn.functional.cross_entropy(model(x), y, reduction="sum")
                    )
                grid[i, j] = total / n_total
        for p, b in zip(params, base):
            p.copy_(b)
    model.train(was_training)
    return grid, alphas


def _minmax_normalize(t: torch.Tensor) -> torch.Tensor:
    lo, hi = t.min(), t.max()
    if (hi - lo).abs() < 1e-12:
        return torch.full_like(t, 0.5)
    return (t - lo) / (hi - lo)


def _to_pil(t: torch.Tensor) -> Image.Image:
    arr = (t.clamp(0.0, 1.0) * 255).round().to(torch.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0].numpy(), mode="L")
    return Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB")


def export_pyramid_images(
    state: PyramidPerturbation, out_dir: str | Path, radius: float | None = None
) -> dict[str, Path]:
    """One image per scale (independently min-max normalized, nearest
    upscaled) plus the normalized materialized composite."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    *_, h, w = state.target_shape
    r = radius if radius is not None else state.spec.radius
    paths: dict[str, Path] = {}
    for s, lvl in zip(state.spec.scales, state.levels):
        img = _minmax_normalize(lvl.detach())
        if s > 1:
            img = img.repeat_interleave(s, dim=-2)[..., :h, :]
            img = img.repeat_interleave(s, dim=-1)[..., :w]
        path = out / f"scale_{s}.png"
        _to_pil(img).save(path)
        paths[f"scale_{s}"] = path
    with torch.no_grad():
        composite = _minmax_normalize(materialize(state, r))
    path = out / "composite.png"
    _to_pil(composite).save(path)
    paths["composite"] = path
    return paths
