"""Forward/backward pass accounting.

The accounting currency is the pass unit: one forward plus one backward
over one batch at the base batch size. A forward at the base batch size is
half a unit; doubling the batch doubles the charge. The ledger counts raw
sample-passes as integers so per-step totals are exact halves, never
approximations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

GENERATION = "generation"
TRAIN = "train"


@dataclass
class PassCostReport:
    """Idealized per-step cost of one training method, in pass units."""

    method: str
    gen_passes_per_step: float
    train_forward_units: float
    train_backward_units: float
    total_units_per_step: float
    relative_cost: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def expected_cost(method: str, num_steps: int = 5) -> PassCostReport:
    """Analytic cost table entry; asserted against the ledger in tests."""
    if method == "baseline":
        gen, fwd, bwd = 0.0, 0.5, 0.5
    elif method == "pat":
        if num_steps < 1:
            raise ValueError("pat needs num_steps >= 1")
        # k generation passes at base batch, then one pass on the doubled batch
        gen, fwd, bwd = float(num_steps), 1.0, 1.0
    elif method in ("upat", "upat_flat"):
        # noise gradients ride the training backward: zero generation passes
        gen, fwd, bwd = 0.0, 1.0, 1.0
    elif method == "upat_no_clean":
        gen, fwd, bwd = 0.0, 0.5, 0.5
    else:
        raise ValueError(f"unknown method {method!r}")
    total = gen + fwd + bwd
    return PassCostReport(
        method=method if method != "pat" else f"pat(k={num_steps})",
        gen_passes_per_step=gen,
        train_forward_units=fwd,
        train_backward_units=bwd,
        total_units_per_step=total,
        relative_cost=total / 1.0,
    )


def cost_table(max_pat_steps: int = 5) -> list[PassCostReport]:
    rows = [expected_cost("baseline")]
    rows += [expected_cost("pat", k) for k in range(1, max_pat_steps + 1)]
    rows += [expected_cost("upat"), expected_cost("upat_flat"), expected_cost("upat_no_clean")]
    return rows


def format_cost_table(rows: list[PassCostReport]) -> str:
    header = f"{'method':<14}{'gen':>6}{'fwd':>6}{'bwd':>6}{'total':>8}{'relative':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.method:<14}{r.gen_passes_per_step:>6.1f}{r.train_forward_units:>6.1f}"
            f"{r.train_backward_units:>6.1f}{r.total_units_per_step:>8.1f}{r.relative_cost:>9.1f}x"
        )
    return "\n".join(lines)


@dataclass
class CostLedger:
    """Integer sample-pass counters, split by purpose.

    ``record_forward(n)`` charges a forward over ``n`` samples. Units are
    derived on demand: (forward samples + backward samples) / (2 * base).
    """

    base_batch_size: int
    forward_samples: dict[str, int] = field(default_factory=dict)
    backward_samples: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_batch_size < 1:
            raise ValueError("base_batch_size must be >= 1")

    def record_forward(self, n_samples: int, category: str = TRAIN) -> None:
        self.forward_samples[category] = self.forward_samples.get(category, 0) + int(n_samples)

    def record_backward(self, n_samples: int, category: str = TRAIN) -> None:
        self.backward_samples[category] = self.backward_samples.get(category, 0) + int(n_samples)

    def units(self, category: str | None = None) -> float:
        if category is None:
            fwd = sum(self.forward_samples.values())
            bwd = sum(self.backward_samples.values())
        else:
            fwd = self.forward_samples.get(category, 0)
            bwd = self.backward_samples.get(category, 0)
        return (fwd + bwd) / (2 * self.base_batch_size)

    def snapshot(self) -> tuple[dict[str, int], dict[str, int]]:
        return dict(self.forward_samples), dict(self.backward_samples)

    def restore(self, snap: tuple[dict[str, int], dict[str, int]]) -> None:
        self.forward_samples, self.backward_samples = dict(snap[0]), dict(snap[1])
