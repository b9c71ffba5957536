"""Pyramid adversarial training toolkit.

Universal and sample-wise pyramid adversarial training for small image
classifiers, with exact forward/backward pass accounting and analysis
instruments (attack-strength curves, filter-normalized loss landscapes,
per-scale perturbation visualization).
"""

from .pyramid import PyramidSpec, PyramidPerturbation, init_zeros, materialize, project, sign_ascent_update
from .adversary import AttackConfig, RadiusSchedule, radius_at_epoch, pgd_pyramid_attack, universal_update
from .costs import CostLedger, PassCostReport, expected_cost, cost_table

__version__ = "0.1.0"
