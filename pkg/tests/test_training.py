import dataclasses
import math

import pytest
import torch

from pyramid_adv.adversary import AttackConfig, RadiusSchedule
from pyramid_adv.costs import GENERATION, CostLedger, TRAIN
from pyramid_adv.data import DatasetConfig, DatasetSplits, ingest_dataset
from pyramid_adv.models import MLP, forward_loss
from pyramid_adv.pyramid import PyramidSpec, init_zeros, materialize
from pyramid_adv.training import (
    TrainConfig,
    lr_at_epoch,
    make_model,
    make_optimizer,
    operative_radius,
    run_training,
    train_step_baseline,
    train_step_pat,
    train_step_upat,
    universal_spec_for,
)


def tiny_cfg(**kwargs) -> TrainConfig:
    spec = PyramidSpec(scales=(2, 1), multipliers=(2.0, 1.0), radius=8 / 255, step_size=1e-3)
    defaults = dict(
        method="upat",
        epochs=2,
        batch_size=32,
        model="mlp",
        warmup_epochs=1,
        augment=False,
        attack=AttackConfig(spec=spec, num_steps=2),
        schedule=RadiusSchedule(r_start=8 / 255, r_end=0.8 / 255, e_start=0, e_end=2),
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def tiny_dataset(n=128, image_size=8, seed=0) -> DatasetSplits:
    return ingest_dataset(
        DatasetConfig(name="synthetic", n_samples=n, image_size=image_size, seed=seed)
    )


def batch_from(dataset, n=32):
    return dataset.train_images[:n], dataset.train_labels[:n]


class TestBaselineStep:
    def test_one_unit_per_step(self):
        torch.manual_seed(0)
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="baseline")
        model = make_model(cfg, 8, 10)
        opt = make_optimizer(model, cfg)
        ledger = CostLedger(cfg.batch_size)
        train_step_baseline(model, batch_from(dataset), opt, ledger)
        assert ledger.units() == 1.0

    def test_loss_decreases_on_separable_data(self):
        # two well-separated blobs: mean-shifted constant images
        torch.manual_seed(1)
        n = 64
        x = torch.cat([torch.full((n, 3, 8, 8), 0.25), torch.full((n, 3, 8, 8), 0.75)])
        x = (x + 0.02 * torch.randn_like(x)).clamp(0, 1)
        y = torch.cat([torch.zeros(n, dtype=torch.int64), torch.ones(n, dtype=torch.int64)])
        model = MLP(image_size=8, hidden_dims=(32,), num_classes=2)
        cfg = tiny_cfg(method="baseline")
        opt = make_optimizer(model, cfg)
        ledger = CostLedger(2 * n)
        first = train_step_baseline(model, (x, y), opt, ledger).loss
        last = None
        for _ in range(50):
            last = train_step_baseline(model, (x, y), opt, ledger).loss
        assert last < first

    def test_zero_learning_rate_keeps_parameters(self):
        torch.manual_seed(2)
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="baseline", lr=0.0)
        model = make_model(cfg, 8, 10)
        opt = make_optimizer(model, cfg)
        before = [p.detach().clone() for p in model.parameters()]
        train_step_baseline(model, batch_from(dataset), opt, CostLedger(cfg.batch_size))
        assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


class TestPatStep:
    @pytest.mark.parametrize("k,total", [(5, 7.0), (1, 3.0), (2, 4.0)])
    def test_units_are_k_plus_two(self, k, total):
        torch.manual_seed(3)
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="pat")
        cfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, num_steps=k))
        model = make_model(cfg, 8, 10)
        opt = make_optimizer(model, cfg)
        ledger = CostLedger(cfg.batch_size)
        train_step_pat(model, batch_from(dataset), opt, cfg, 8 / 255, ledger)
        assert ledger.units() == total
        assert ledger.units(GENERATION) == float(k)
        assert ledger.units(TRAIN) == 2.0

    def test_degenerate_adversary_matches_baseline_update(self):
        torch.manual_seed(4)
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="pat", adv_weight=0.0)
        model_a = make_model(cfg, 8, 10)
        model_b = make_model(cfg, 8, 10)
        model_b.load_state_dict(model_a.state_dict())
        opt_a = make_optimizer(model_a, cfg)
        opt_b = make_optimizer(model_b, cfg)
        batch = batch_from(dataset)
        train_step_pat(model_a, batch, opt_a, cfg, radius=0.0, ledger=CostLedger(cfg.batch_size))
        train_step_baseline(model_b, batch, opt_b, CostLedger(cfg.batch_size))
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert torch.allclose(pa, pb, atol=1e-6)


class TestUpatStep:
    def _setup(self, **cfg_kwargs):
        torch.manual_seed(5)
        dataset = tiny_dataset()
        cfg = tiny_cfg(**cfg_kwargs)
        model = make_model(cfg, 8, 10)
        opt = make_optimizer(model, cfg)
        state = init_zeros(universal_spec_for(cfg), (3, 8, 8))
        return dataset, cfg, model, opt, state

    def test_two_units_and_zero_generation(self):
        dataset, cfg, model, opt, state = self._setup()
        ledger = CostLedger(cfg.batch_size)
        train_step_upat(model, batch_from(dataset), state, opt, cfg, 0, ledger)
        assert ledger.units() == 2.0
        assert ledger.units(GENERATION) == 0.0
        # savings vs the sample-wise ladder
        assert (7.0 - ledger.units()) / 7.0 == 5 / 7
        assert (3.0 - ledger.units()) / 3.0 == pytest.approx(1 / 3, abs=0)

    def test_zero_adv_weight_freezes_state_and_matches_clean_gradient(self):
        dataset, cfg, model, opt, state = self._setup(adv_weight=0.0)
        x, y = batch_from(dataset)
        before = [l.clone() for l in state.levels]

        ref = make_model(cfg, 8, 10)
        ref.load_state_dict(model.state_dict())
        loss_ref, _ = forward_loss(ref, x, y)
        grads_ref = torch.autograd.grad(loss_ref, list(ref.parameters()))

        res = train_step_upat(model, (x, y), state, opt, cfg, 0, CostLedger(cfg.batch_size))
        assert all(torch.equal(a, b) for a, b in zip(before, state.levels))
        assert all((g == 0).all() for g in res.level_grads)
        # .grad still holds the pre-step combined gradient, which with
        # adv_weight=0 must be the clean-only gradient
        for p, g_ref in zip(model.parameters(), grads_ref):
            assert torch.allclose(p.grad, g_ref, atol=1e-6)

    def test_harvested_gradients_match_dedicated_backward(self):
        torch.manual_seed(6)
        dataset = tiny_dataset()
        cfg = tiny_cfg()
        for trial in range(3):
            model = make_model(cfg, 8, 10).double()
            opt = make_optimizer(model, cfg)
            state = init_zeros(universal_spec_for(cfg), (3, 8, 8), dtype=torch.float64)
            with torch.no_grad():
                for lvl in state.levels:
                    lvl.uniform_(-8 / 255, 8 / 255)
            x, y = batch_from(dataset)
            x = x.double()
            radius = operative_radius(cfg, 0)

            ref_state = state.detach_clone()
            ref_state.requires_grad_(True)
            x_adv = (x + materialize(ref_state, radius)).clamp(0, 1)
            n = x.shape[0]
            logits = model(torch.cat([x, x_adv]))
            loss = (
                torch.nn.functional.cross_entropy(logits[:n], y)
                + cfg.adv_weight * torch.nn.functional.cross_entropy(logits[n:], y)
            )
            dedicated = torch.autograd.grad(loss, ref_state.levels)

            res = train_step_upat(model, (x, y), state, opt, cfg, 0, CostLedger(cfg.batch_size))
            for got, want in zip(res.level_grads, dedicated):
                rel = (got - want).norm() / max(want.norm().item(), 1e-12)
                assert rel <= 1e-6

    def test_no_clean_variant_costs_one_unit(self):
        dataset, cfg, model, opt, state = self._setup(method="upat_no_clean")
        ledger = CostLedger(cfg.batch_size)
        res = train_step_upat(
            model, batch_from(dataset), state, opt, cfg, 0, ledger, include_clean=False
        )
        assert ledger.units() == 1.0
        assert res.clean_loss is None and res.adv_loss is not None


class TestJensenBound:
    def test_universal_optimum_bounded_by_samplewise_optimum(self):
        # single shared scalar offset, exhaustively enumerated
        torch.manual_seed(7)
        model = MLP(image_size=8, hidden_dims=(16,), num_classes=4).double()
        x = torch.rand(4, 3, 8, 8, dtype=torch.float64) * 0.5 + 0.25
        y = torch.randint(0, 4, (4,))
        r = 8 / 255
        values = [-r, -r / 2, 0.0, r / 2, r]
        spec = PyramidSpec(scales=(1,), multipliers=(1.0,), radius=r, step_size=1e-3)
        losses = torch.zeros(len(values), 4, dtype=torch.float64)
        for vi, v in enumerate(values):
            p = init_zeros(spec, (3, 8, 8), dtype=torch.float64)
            with torch.no_grad():
                p.levels[0].fill_(v)
            x_adv = (x + materialize(p, r)).clamp(0, 1)
            for i in range(4):
                loss, _ = forward_loss(model, x_adv[i : i + 1], y[i : i + 1])
                losses[vi, i] = loss
        universal_opt = losses.mean(dim=1).max().item()
        samplewise_opt = losses.max(dim=0).values.mean().item()
        assert universal_opt <= samplewise_opt + 1e-12
        argmaxes = losses.argmax(dim=0)
        if len(set(argmaxes.tolist())) > 1:
            assert universal_opt < samplewise_opt


class TestRunTraining:
    def test_smoke_run_emits_one_record_per_epoch(self):
        dataset = tiny_dataset(n=512)
        cfg = tiny_cfg(epochs=2)
        result = run_training(cfg, dataset)
        assert len(result.history) == 2
        rec = result.history[0]
        for key in ("epoch", "method", "radius", "val_clean_acc", "clean_loss",
                    "adv_loss", "cum_pass_units"):
            assert key in rec
        assert result.universal_state is not None

    def test_flat_variant_uses_single_scale(self):
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="upat_flat", epochs=1)
        result = run_training(cfg, dataset)
        assert result.universal_state.spec.scales == (1,)
        assert result.universal_state.spec.multipliers == (1.0,)

    def test_no_clean_variant_has_no_clean_metrics(self):
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="upat_no_clean", epochs=1)
        result = run_training(cfg, dataset)
        assert result.history[0]["clean_loss"] is None
        assert result.history[0]["train_clean_acc"] is None

    def test_reproducible_under_fixed_seed(self):
        dataset = tiny_dataset()
        cfg = tiny_cfg(epochs=2, augment=True, seed=9)
        h1 = run_training(cfg, dataset).history
        h2 = run_training(cfg, dataset).history
        assert h1 == h2

    def test_methods_differ_in_cumulative_units(self):
        dataset = tiny_dataset(n=128)
        for method, per_step in (("baseline", 1.0), ("upat", 2.0)):
            cfg = tiny_cfg(method=method, epochs=1)
            result = run_training(cfg, dataset)
            n_steps = (128 - 12) // cfg.batch_size  # 116 train -> 3 full batches
            assert result.ledger.units() == per_step * n_steps

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        dataset = tiny_dataset(n=256)
        cfg = tiny_cfg(epochs=4, augment=True)

        full = run_training(cfg, dataset, run_dir=tmp_path / "full", checkpoint_every=0)

        part_dir = tmp_path / "part"
        short = dataclasses.replace(cfg, epochs=2)
        run_training(short, dataset, run_dir=part_dir, checkpoint_every=0)
        resumed = run_training(
            cfg, dataset, run_dir=part_dir,
            resume_from=part_dir / "checkpoints" / "epoch_0001.ckpt",
        )
        assert resumed.history == full.history[2:]

    def test_surfaces_numeric_error_with_step_context(self):
        dataset = tiny_dataset()
        cfg = tiny_cfg(method="baseline", lr=1e14, epochs=1, warmup_epochs=0)
        with pytest.raises(FloatingPointError, match="epoch 0 step"):
            run_training(cfg, dataset)


class TestSchedulingHelpers:
    def test_lr_warmup_then_cosine(self):
        cfg = tiny_cfg(epochs=10, warmup_epochs=2, lr=1e-3)
        assert lr_at_epoch(cfg, 0) == pytest.approx(5e-4)
        assert lr_at_epoch(cfg, 1) == pytest.approx(1e-3)
        post = [lr_at_epoch(cfg, e) for e in range(2, 10)]
        assert all(a >= b for a, b in zip(post, post[1:]))
        assert post[-1] < 1e-4

    def test_operative_radius_uses_spec_when_schedule_off(self):
        cfg = tiny_cfg(schedule=RadiusSchedule(r_start=0.9, r_end=0.1, e_start=0, e_end=5, enabled=False))
        assert operative_radius(cfg, 3) == cfg.attack.spec.radius

    def test_config_validation(self):
        with pytest.raises(ValueError):
            tiny_cfg(method="fgsm")
        with pytest.raises(ValueError):
            tiny_cfg(adv_weight=-1.0)
        with pytest.raises(ValueError):
            tiny_cfg(warmup_epochs=5, epochs=2)
