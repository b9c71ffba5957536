"""Training loops: clean baseline, sample-wise pyramid adversarial training,
and universal pyramid adversarial training.

The sample-wise variant pays k generation passes per step plus one pass on
the doubled batch. The universal variant rides a single shared perturbation
on the training backward pass: the level gradients come out of the same
backward that updates the model, so a step costs exactly two units and zero
generation passes.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .adversary import (
    STEP_RULE_EXPLICIT,
    AttackConfig,
    RadiusSchedule,
    pgd_pyramid_attack,
    radius_at_epoch,
    universal_update,
)
from .checkpoint import load_archive, save_archive
from .costs import TRAIN, CostLedger, PassCostReport, expected_cost
from .data import DatasetSplits, augment_batch
from .evaluation import accuracy, attack_strength
from .models import MLP, TinyViT, build_model, forward_loss
from .pyramid import PyramidPerturbation, PyramidSpec, init_zeros, materialize, project

METHODS = ("baseline", "pat", "upat", "upat_flat", "upat_no_clean")
METRICS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    method: str = "upat"
    adv_weight: float = 1.0
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 3
    seed: int = 0
    augment: bool = True
    model: str = "tiny_vit"
    upat_step_fraction: float = 0.1
    attack: AttackConfig = field(default_factory=AttackConfig)
    schedule: RadiusSchedule = field(default_factory=RadiusSchedule)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.adv_weight < 0:
            raise ValueError(f"adv_weight must be >= 0, got {self.adv_weight}")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class StepResult:
    loss: float
    clean_loss: float | None
    adv_loss: float | None
    n_correct_clean: int | None
    batch_size: int
    level_grads: list[torch.Tensor] | None = None


@dataclass
class TrainResult:
    model: torch.nn.Module
    universal_state: PyramidPerturbation | None
    history: list[dict]
    ledger: CostLedger
    cost_report: PassCostReport


def make_model(cfg: TrainConfig, image_size: int, num_classes: int) -> torch.nn.Module:
    if cfg.model == "tiny_vit":
        return TinyViT(image_size=image_size, num_classes=num_classes)
    if cfg.model == "mlp":
        return MLP(image_size=image_size, num_classes=num_classes)
    raise ValueError(f"unknown model {cfg.model!r}")


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with decoupled weight decay; norms and biases are not decayed."""
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
    )


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at the final epoch."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = max(cfg.epochs - cfg.warmup_epochs, 1)
    t = (epoch - cfg.warmup_epochs) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


def operative_radius(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule.enabled:
        return radius_at_epoch(cfg.schedule, epoch)
    return cfg.attack.spec.radius


def upat_step_size(cfg: TrainConfig, radius: float) -> float:
    if cfg.attack.step_size_rule == STEP_RULE_EXPLICIT:
        return cfg.attack.spec.step_size
    return cfg.upat_step_fraction * radius


def train_step_baseline(model, batch, optimizer, ledger: CostLedger) -> StepResult:
    images, labels = batch
    optimizer.zero_grad(set_to_none=True)
    loss, logits = forward_loss(model, images, labels)
    loss.backward()
    optimizer.step()
    n = images.shape[0]
    ledger.record_forward(n, TRAIN)
    ledger.record_backward(n, TRAIN)
    correct = int((logits.argmax(dim=1) == labels).sum())
    return StepResult(loss.item(), loss.item(), None, correct, n)


def train_step_pat(model, batch, optimizer, cfg: TrainConfig, radius: float, ledger: CostLedger) -> StepResult:
    """k-step attack, then one combined pass over the clean + adversarial batch."""
    images, labels = batch
    n = images.shape[0]
    _, x_adv = pgd_pyramid_attack(model, images, labels, cfg.attack, radius, ledger=ledger)
    optimizer.zero_grad(set_to_none=True)
    logits = model(torch.cat([images, x_adv]))
    clean_loss = torch.nn.functional.cross_entropy(logits[:n], labels)
    adv_loss = torch.nn.functional.cross_entropy(logits[n:], labels)
    loss = clean_loss + cfg.adv_weight * adv_loss
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite combined loss")
    loss.backward()
    optimizer.step()
    ledger.record_forward(2 * n, TRAIN)
    ledger.record_backward(2 * n, TRAIN)
    correct = int((logits[:n].argmax(dim=1) == labels).sum())
    return StepResult(loss.item(), clean_loss.item(), adv_loss.item(), correct, n)


def train_step_upat(
    model,
    batch,
    universal_state: PyramidPerturbation,
    optimizer,
    cfg: TrainConfig,
    epoch: int,
    ledger: CostLedger,
    include_clean: bool = True,
) -> StepResult:
    """One combined pass yields gradients for the model (descent) and for
    every perturbation level (ascent) at once.

    The level update uses gradients taken before the optimizer step, and
    adds no forward or backward passes of its own.
    """
    images, labels = batch
    n = images.shape[0]
    radius = operative_radius(cfg, epoch)
    universal_state.requires_grad_(True)
    delta = materialize(universal_state, radius)
    x_adv = (images + delta).clamp(0.0, 1.0)
    optimizer.zero_grad(set_to_none=True)
    if include_clean:
        logits = model(torch.cat([images, x_adv]))
        clean_loss = torch.nn.functional.cross_entropy(logits[:n], labels)
        adv_loss = torch.nn.functional.cross_entropy(logits[n:], labels)
        loss = clean_loss + cfg.adv_weight * adv_loss
        clean_out, correct = clean_loss.item(), int((logits[:n].argmax(dim=1) == labels).sum())
        ledger.record_forward(2 * n, TRAIN)
        ledger.record_backward(2 * n, TRAIN)
    else:
        logits = model(x_adv)
        adv_loss = torch.nn.functional.cross_entropy(logits, labels)
        loss = cfg.adv_weight * adv_loss
        clean_out, correct = None, None
        ledger.record_forward(n, TRAIN)
        ledger.record_backward(n, TRAIN)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite combined loss")
    loss.backward()
    level_grads = [
        lvl.grad.detach().clone() if lvl.grad is not None else torch.zeros_like(lvl)
        for lvl in universal_state.levels
    ]
    optimizer.step()
    universal_state.zero_grad()
    universal_state.requires_grad_(False)
    universal_update(universal_state, level_grads, cfg.schedule, epoch, upat_step_size(cfg, radius))
    return StepResult(loss.item(), clean_out, adv_loss.item(), correct, n, level_grads=level_grads)


def universal_spec_for(cfg: TrainConfig) -> PyramidSpec:
    base = cfg.attack.spec
    if cfg.method == "upat_flat":
        return PyramidSpec(
            scales=(1,),
            multipliers=(1.0,),
            radius=base.radius,
            step_size=base.step_size,
            per_channel=base.per_channel,
        )
    return base


def _epoch_record(cfg, epoch, radius, agg, val_acc, ledger, strength=None) -> dict:
    rec = {
        "schema": METRICS_SCHEMA_VERSION,
        "epoch": epoch,
        "method": cfg.method,
        "radius": radius,
        "train_clean_acc": agg.get("train_clean_acc"),
        "val_clean_acc": val_acc,
        "clean_loss": agg.get("clean_loss"),
        "adv_loss": agg.get("adv_loss"),
        "adv_err_increase_train": None,
        "adv_err_increase_val": None,
        "cum_pass_units": ledger.units(),
    }
    if strength is not None:
        rec["adv_err_increase_train"], rec["adv_err_increase_val"] = strength
    return rec


def save_training_checkpoint(
    path: str | Path,
    model,
    optimizer,
    universal_state: PyramidPerturbation | None,
    epoch: int,
    ledger: CostLedger,
    cfg: TrainConfig,
    experiment_meta: dict | None = None,
) -> None:
    arrays: dict[str, torch.Tensor] = {}
    for name, p in model.named_parameters():
        arrays[f"model.{name}"] = p.detach().clone()
    opt_steps = {}
    for pid, st in optimizer.state_dict()["state"].items():
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                arrays[f"opt.{pid}.{key}"] = st[key].detach().clone()
        step = st.get("step")
        opt_steps[str(pid)] = float(step.item() if torch.is_tensor(step) else step)
    if universal_state is not None:
        for s, lvl in zip(universal_state.spec.scales, universal_state.levels):
            arrays[f"delta_scale_{s}"] = lvl.detach().clone()
    arrays["rng.torch"] = torch.get_rng_state()
    meta = {
        "epoch": epoch,
        "arch": model.arch,
        "train_config": dataclasses.asdict(cfg),
        "experiment": experiment_meta,
        "pyramid_spec": dataclasses.asdict(universal_state.spec) if universal_state else None,
        "universal_target_shape": list(universal_state.target_shape) if universal_state else None,
        "opt_steps": opt_steps,
        "ledger": {
            "base_batch_size": ledger.base_batch_size,
            "forward_samples": ledger.forward_samples,
            "backward_samples": ledger.backward_samples,
        },
        "cum_pass_units": ledger.units(),
    }
    save_archive(path, arrays, meta)


@dataclass
class RestoredTraining:
    model: torch.nn.Module
    universal_state: PyramidPerturbation | None
    epoch: int
    meta: dict
    arrays: dict[str, torch.Tensor]


def load_training_checkpoint(path: str | Path) -> RestoredTraining:
    arrays, meta = load_archive(path)
    model = build_model(meta["arch"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(arrays[f"model.{name}"])
    state = None
    if meta.get("pyramid_spec") is not None:
        sd = dict(meta["pyramid_spec"])
        spec = PyramidSpec(
            scales=tuple(sd["scales"]),
            multipliers=tuple(sd["multipliers"]),
            radius=sd["radius"],
            step_size=sd["step_size"],
            per_channel=sd["per_channel"],
        )
        levels = [arrays[f"delta_scale_{s}"].clone() for s in spec.scales]
        state = PyramidPerturbation(
            spec=spec, levels=levels, target_shape=tuple(meta["universal_target_shape"])
        )
    return RestoredTraining(model=model, universal_state=state, epoch=meta["epoch"], meta=meta, arrays=arrays)


def _restore_optimizer(optimizer, restored: RestoredTraining) -> None:
    sd = optimizer.state_dict()
    state = {}
    for pid_str, step in restored.meta["opt_steps"].items():
        pid = int(pid_str)
        state[pid] = {
            "step": torch.tensor(step),
            "exp_avg": restored.arrays[f"opt.{pid}.exp_avg"].clone(),
            "exp_avg_sq": restored.arrays[f"opt.{pid}.exp_avg_sq"].clone(),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)


def run_training(
    cfg: TrainConfig,
    dataset: DatasetSplits,
    run_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    resume_from: str | Path | None = None,
    strength_eval_every: int = 0,
    experiment_meta: dict | None = None,
) -> TrainResult:
    """Run the configured method end to end; deterministic under cfg.seed.

    Emits one metrics record per epoch (written as JSON lines when
    ``run_dir`` is given) and checkpoints at the configured cadence plus
    at the end. Resuming from a checkpoint restores parameters, optimizer
    moments, universal state, pass counters, and the torch RNG stream, so
    the continuation is step-for-step identical to an uninterrupted run.
    """
    image_size = dataset.train_images.shape[-1]
    history: list[dict] = []
    start_epoch = 0

    if resume_from is not None:
        restored = load_training_checkpoint(resume_from)
        model = restored.model
        optimizer = make_optimizer(model, cfg)
        _restore_optimizer(optimizer, restored)
        universal_state = restored.universal_state
        ledger = CostLedger(cfg.batch_size)
        ledger.forward_samples = {k: int(v) for k, v in restored.meta["ledger"]["forward_samples"].items()}
        ledger.backward_samples = {k: int(v) for k, v in restored.meta["ledger"]["backward_samples"].items()}
        torch.set_rng_state(restored.arrays["rng.torch"].to(torch.uint8))
        start_epoch = restored.epoch + 1
    else:
        torch.manual_seed(cfg.seed)
        model = make_model(cfg, image_size, dataset.num_classes)
        optimizer = make_optimizer(model, cfg)
        ledger = CostLedger(cfg.batch_size)
        universal_state = None
        if cfg.method in ("upat", "upat_flat", "upat_no_clean"):
            spec = universal_spec_for(cfg)
            universal_state = init_zeros(spec, (3, image_size, image_size))

    model.train()
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)

    n_train = dataset.n_train
    n_batches = max(n_train // cfg.batch_size, 1)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        radius = operative_radius(cfg, epoch)
        if universal_state is not None:
            project(universal_state, radius)

        perm = torch.randperm(n_train)
        sums = {"loss": 0.0, "clean": 0.0, "adv": 0.0}
        counts = {"clean": 0, "adv": 0, "correct": 0, "seen": 0}
        for bi in range(n_batches):
            idx = perm[bi * cfg.batch_size : min((bi + 1) * cfg.batch_size, n_train)]
            x = dataset.train_images[idx]
            y = dataset.train_labels[idx]
            if cfg.augment:
                x = augment_batch(x)
            try:
                if cfg.method == "baseline":
                    res = train_step_baseline(model, (x, y), optimizer, ledger)
                elif cfg.method == "pat":
                    res = train_step_pat(model, (x, y), optimizer, cfg, radius, ledger)
                else:
                    res = train_step_upat(
                        model, (x, y), universal_state, optimizer, cfg, epoch, ledger,
                        include_clean=cfg.method != "upat_no_clean",
                    )
            except FloatingPointError as err:
                raise FloatingPointError(f"epoch {epoch} step {bi}: {err}") from err
            sums["loss"] += res.loss
            if res.clean_loss is not None:
                sums["clean"] += res.clean_loss
                counts["clean"] += 1
            if res.adv_loss is not None:
                sums["adv"] += res.adv_loss
                counts["adv"] += 1
            if res.n_correct_clean is not None:
                counts["correct"] += res.n_correct_clean
                counts["seen"] += res.batch_size

        agg = {
            "clean_loss": sums["clean"] / counts["clean"] if counts["clean"] else None,
            "adv_loss": sums["adv"] / counts["adv"] if counts["adv"] else None,
            "train_clean_acc": counts["correct"] / counts["seen"] if counts["seen"] else None,
        }
        val_acc = accuracy(model, dataset.val_images, dataset.val_labels)
        strength = None
        if strength_eval_every > 0 and (epoch + 1) % strength_eval_every == 0:
            strength = _strength_pair(model, dataset, cfg, universal_state, epoch)
        record = _epoch_record(cfg, epoch, radius, agg, val_acc, ledger, strength)
        history.append(record)
        if run_path is not None:
            with open(run_path / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            last = epoch == cfg.epochs - 1
            if last or (checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0):
                save_training_checkpoint(
                    run_path / "checkpoints" / f"epoch_{epoch:04d}.ckpt",
                    model, optimizer, universal_state, epoch, ledger, cfg, experiment_meta,
                )

    report = expected_cost(
        cfg.method, cfg.attack.num_steps if cfg.method == "pat" else 0
    )
    return TrainResult(model, universal_state, history, ledger, report)


def _strength_pair(model, dataset, cfg, universal_state, epoch):
    radius = operative_radius(cfg, epoch)
    out = []
    for images, labels in (
        (dataset.train_images, dataset.train_labels),
        (dataset.val_images, dataset.val_labels),
    ):
        if universal_state is not None:
            out.append(attack_strength(model, images, labels, universal_state=universal_state, radius=radius))
        else:
            out.append(attack_strength(model, images, labels, attack_cfg=cfg.attack, radius=radius))
    return tuple(out)


def benchmark_step_time(
    cfg: TrainConfig, dataset: DatasetSplits, n_steps: int = 20, warmup: int = 3
) -> float:
    """Mean wall-clock seconds per training step, fixed batch size."""
    torch.manual_seed(cfg.seed)
    image_size = dataset.train_images.shape[-1]
    model = make_model(cfg, image_size, dataset.num_classes)
    model.train()
    optimizer = make_optimizer(model, cfg)
    ledger = CostLedger(cfg.batch_size)
    state = None
    if cfg.method in ("upat", "upat_flat", "upat_no_clean"):
        state = init_zeros(universal_spec_for(cfg), (3, image_size, image_size))
    x = dataset.train_images[: cfg.batch_size]
    y = dataset.train_labels[: cfg.batch_size]

    def one_step():
        if cfg.method == "baseline":
            train_step_baseline(model, (x, y), optimizer, ledger)
        elif cfg.method == "pat":
            train_step_pat(model, (x, y), optimizer, cfg, cfg.attack.spec.radius, ledger)
        else:
            train_step_upat(model, (x, y), state, optimizer, cfg, 0, ledger,
                            include_clean=cfg.method != "upat_no_clean")

    for _ in range(warmup):
        one_step()
    t0 = time.perf_counter()
    for _ in range(n_steps):
        one_step()
    return (time.perf_counter() - t0) / n_steps
