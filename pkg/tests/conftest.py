import random

import pytest
import torch

from pyramid_adv.pyramid import PyramidSpec, PyramidPerturbation


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def random_pyramid_case(rng: random.Random, max_hw: int = 8, dtype=torch.float64):
    """Random (spec, perturbation, radius) with small spatial dims.

    Level values are drawn wider than the radius so clipping is exercised.
    """
    h = rng.randint(1, max_hw)
    w = rng.randint(1, max_hw)
    c = rng.choice([1, 3])
    per_channel = rng.random() < 0.5
    top = max(h, w)
    n_extra = rng.randint(0, 2) if top >= 2 else 0
    extra = sorted(rng.sample(range(2, top + 1), min(n_extra, top - 1)), reverse=True)
    scales = tuple(extra) + (1,)
    multipliers = tuple(rng.uniform(0.2, 20.0) for _ in scales)
    radius = rng.uniform(0.0, 0.2)
    spec = PyramidSpec(
        scales=scales,
        multipliers=multipliers,
        radius=max(radius, 1e-6),
        step_size=1e-3,
        per_channel=per_channel,
    )
    target_shape = (c, h, w)
    gen = torch.Generator().manual_seed(rng.randrange(2**31))
    levels = [
        (torch.rand(spec.level_shape(target_shape, s), generator=gen, dtype=dtype) - 0.5)
        * 4.0
        * max(radius, 0.05)
        for s in spec.scales
    ]
    p = PyramidPerturbation(spec=spec, levels=levels, target_shape=target_shape)
    return p, radius
