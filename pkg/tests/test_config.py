import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from pyramid_adv.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    config_from_dict,
    config_hash,
    config_to_dict,
    default_run_id,
    load_experiment_config,
    parse_config,
    parse_real,
    replace_training,
    serialize_config,
    with_radius,
)


class TestParseReal:
    def test_fraction_strings(self):
        assert parse_real("8/255") == 8 / 255
        assert parse_real("0.8/255") == 0.8 / 255
        assert parse_real("-2/255") == -2 / 255

    def test_plain_numbers(self):
        assert parse_real(3) == 3.0
        assert parse_real(0.25) == 0.25
        assert parse_real("1e-3") == 1e-3

    def test_rejects_garbage(self):
        with pytest.raises(ConfigError):
            parse_real("eight")
        with pytest.raises(ConfigError):
            parse_real(True)


class TestRoundTrip:
    def test_default_round_trip(self):
        cfg = ExperimentConfig()
        assert parse_config(serialize_config(cfg)) == cfg

    @settings(max_examples=30, deadline=None)
    @given(
        method=st.sampled_from(["baseline", "pat", "upat", "upat_flat", "upat_no_clean"]),
        adv_weight=st.floats(0.0, 4.0),
        epochs=st.integers(1, 50),
        batch=st.integers(1, 256),
        radius_n=st.integers(0, 16),
        steps=st.integers(1, 7),
        seed=st.integers(0, 10_000),
        enabled=st.booleans(),
    )
    def test_random_configs_round_trip(self, method, adv_weight, epochs, batch, radius_n, steps, seed, enabled):
        cfg = ExperimentConfig()
        cfg = with_radius(cfg, radius_n / 255 if radius_n else 1e-4)
        attack = dataclasses.replace(cfg.training.attack, num_steps=steps)
        schedule = dataclasses.replace(cfg.training.schedule, enabled=enabled)
        cfg = replace_training(
            cfg, method=method, adv_weight=adv_weight, epochs=epochs,
            batch_size=batch, warmup_epochs=min(1, epochs), seed=seed,
            attack=attack, schedule=schedule,
        )
        assert parse_config(serialize_config(cfg)) == cfg
        assert config_from_dict(config_to_dict(cfg)) == cfg


class TestStrictParsing:
    def test_unknown_keys_listed_exhaustively(self):
        data = {
            "training": {"lr": 0.001, "turbo": True},
            "dataset": {"n_samples": 64, "flavour": "mild"},
        }
        with pytest.raises(ConfigError) as err:
            config_from_dict(data)
        msg = str(err.value)
        assert "training.turbo" in msg and "dataset.flavour" in msg

    def test_top_level_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config key: extras"):
            config_from_dict({"extras": {}})

    def test_type_errors_reported_with_path(self):
        with pytest.raises(ConfigError, match="training.epochs"):
            config_from_dict({"training": {"epochs": "many"}})

    def test_domain_validation_bubbles_up(self):
        with pytest.raises(ConfigError):
            config_from_dict({"training": {"adv_weight": -1}})

    def test_fraction_strings_in_nested_fields(self):
        cfg = config_from_dict(
            {"training": {"attack": {"spec": {"radius": "4/255"}},
                          "schedule": {"r_start": "4/255", "r_end": "0.4/255"}}}
        )
        assert cfg.training.attack.spec.radius == 4 / 255
        assert cfg.training.schedule.r_start == 4 / 255


class TestOverrides:
    def test_dotted_paths(self):
        data = apply_overrides({}, ["training.lr=0.003", "training.attack.spec.radius=4/255"])
        cfg = config_from_dict(data)
        assert cfg.training.lr == 0.003
        assert cfg.training.attack.spec.radius == 4 / 255

    def test_bad_override_shapes(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["no_equals_sign"])
        with pytest.raises(ConfigError):
            apply_overrides({}, ["a..b=1"])
        with pytest.raises(ConfigError):
            apply_overrides({"training": {"lr": 1}}, ["training.lr.deeper=1"])

    def test_unknown_override_key_fails_fast(self):
        data = apply_overrides({}, ["training.turbo=on"])
        with pytest.raises(ConfigError, match="training.turbo"):
            config_from_dict(data)

    def test_load_from_file_with_overrides(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("training:\n  method: pat\n  epochs: 3\n")
        cfg = load_experiment_config(path, ["training.epochs=5"])
        assert cfg.training.method == "pat"
        assert cfg.training.epochs == 5


class TestRunIds:
    def test_hash_stable_and_seed_aware(self):
        a = ExperimentConfig()
        b = replace_training(a, seed=1)
        assert config_hash(a) != config_hash(b)
        assert default_run_id(a).startswith("upat-")
        assert default_run_id(a).endswith("-s0")
        assert default_run_id(b).endswith("-s1")

    def test_run_section_does_not_change_hash(self):
        a = ExperimentConfig()
        b = dataclasses.replace(a, run=dataclasses.replace(a.run, output_dir="elsewhere"))
        assert config_hash(a) == config_hash(b)


class TestWithRadius:
    def test_sets_spec_and_schedule_consistently(self):
        cfg = with_radius(ExperimentConfig(), 6 / 255)
        assert cfg.training.attack.spec.radius == 6 / 255
        assert cfg.training.schedule.r_start == 6 / 255
        assert cfg.training.schedule.r_end == pytest.approx(0.6 / 255)
