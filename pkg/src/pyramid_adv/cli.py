"""Command-line entry points: train, ablate, analyze, ingest.

Exit codes: 0 success, 2 configuration error, 3 runtime numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .adversary import pgd_pyramid_attack
from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    default_run_id,
    load_experiment_config,
    parse_real,
    replace_training,
    serialize_config,
    with_radius,
)
from .costs import cost_table, expected_cost, format_cost_table
from .data import ingest_dataset
from .evaluation import (
    accuracy,
    attack_strength,
    corruption_eval,
    export_pyramid_images,
    loss_landscape,
)
from .pyramid import PyramidPerturbation
from .training import (
    benchmark_step_time,
    load_training_checkpoint,
    run_training,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyramid-adv",
        description="Universal and sample-wise pyramid adversarial training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training configuration")
    train.add_argument("--config", type=Path, default=None, help="YAML config file")
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="PATH=VALUE", help="dotted-path config override")
    train.add_argument("--method", choices=["baseline", "pat", "upat", "upat_flat", "upat_no_clean"])
    train.add_argument("--radius", help="attack radius, e.g. 8/255 (also retargets the schedule)")
    train.add_argument("--schedule", choices=["on", "off"], help="toggle the radius schedule")
    train.add_argument("--steps", type=int, help="sample-wise attack steps")
    train.add_argument("--seed", type=int, help="training seed")
    train.add_argument("--resume", type=Path, default=None, metavar="RUN_DIR",
                       help="continue a run from its latest checkpoint")

    ablate = sub.add_parser("ablate", help="run the method/radius comparison grid")
    ablate.add_argument("--config", type=Path, default=None)
    ablate.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    ablate.add_argument("--seeds", default="0", help="comma-separated seeds shared by all arms")
    ablate.add_argument("--out", type=Path, default=None, help="ablation output directory")

    analyze = sub.add_parser("analyze", help="produce analysis artifacts from a checkpoint")
    analyze.add_argument("--checkpoint", type=Path, required=True,
                         help="checkpoint file, or a run directory (uses its checkpoints)")
    analyze.add_argument("--mode", required=True,
                         choices=["strength", "landscape", "viz", "corruption", "cost"])
    analyze.add_argument("--config", type=Path, default=None,
                         help="config file (only needed if the checkpoint lacks one)")
    analyze.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    analyze.add_argument("--grid", type=int, default=None, help="landscape grid size (odd)")
    analyze.add_argument("--span", type=float, default=None, help="landscape direction span")
    analyze.add_argument("--adversary", choices=["universal", "samplewise", "both"], default="both")
    analyze.add_argument("--measure", action="store_true",
                         help="with --mode cost, also time real steps")
    analyze.add_argument("--out", type=Path, default=None)

    ingest = sub.add_parser("ingest", help="materialize a dataset and report split stats")
    ingest.add_argument("--config", type=Path, default=None)
    ingest.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    return parser


def _config_with_flags(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config, args.overrides)
    if getattr(args, "method", None):
        cfg = replace_training(cfg, method=args.method)
    if getattr(args, "steps", None):
        attack = dataclasses.replace(cfg.training.attack, num_steps=args.steps)
        cfg = replace_training(cfg, attack=attack)
    if getattr(args, "radius", None):
        cfg = with_radius(cfg, parse_real(args.radius, "--radius"))
    if getattr(args, "schedule", None):
        schedule = dataclasses.replace(cfg.training.schedule, enabled=args.schedule == "on")
        cfg = replace_training(cfg, schedule=schedule)
    if getattr(args, "seed", None) is not None:
        cfg = replace_training(cfg, seed=args.seed)
    return cfg


def _run_one(cfg: ExperimentConfig, run_dir: Path, resume_from: Path | None = None) -> dict:
    """Train under ``cfg`` into ``run_dir`` and write a summary; returns it."""
    dataset = ingest_dataset(cfg.dataset)  # validated before any run dir exists
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(serialize_config(cfg))
    result = run_training(
        cfg.training,
        dataset,
        run_dir=run_dir,
        checkpoint_every=cfg.run.checkpoint_every,
        resume_from=resume_from,
        strength_eval_every=cfg.run.strength_eval_every,
        experiment_meta=config_to_dict(cfg),
    )
    val_accs = [rec["val_clean_acc"] for rec in result.history]
    summary = {
        "run_id": run_dir.name,
        "method": cfg.training.method,
        "epochs": cfg.training.epochs,
        "seed": cfg.training.seed,
        "radius": cfg.training.attack.spec.radius,
        "schedule": cfg.training.schedule.enabled,
        "num_steps": cfg.training.attack.num_steps,
        "final_val_acc": val_accs[-1] if val_accs else None,
        "best_val_acc": max(val_accs) if val_accs else None,
        "total_pass_units": result.ledger.units(),
        "cost_per_step": result.cost_report.to_dict(),
        "relative_cost": result.cost_report.relative_cost,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_train(args) -> int:
    if args.resume is not None:
        run_dir = args.resume
        cfg_path = run_dir / "config.yaml"
        if not cfg_path.exists():
            raise ConfigError(f"{run_dir} has no config.yaml to resume from")
        cfg = load_experiment_config(cfg_path, [])
        ckpts = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"))
        if not ckpts:
            raise ConfigError(f"{run_dir} has no checkpoints to resume from")
        summary = _run_one(cfg, run_dir, resume_from=ckpts[-1])
    else:
        cfg = _config_with_flags(args)
        run_id = cfg.run.run_id or default_run_id(cfg)
        run_dir = Path(cfg.run.output_dir) / run_id
        if (run_dir / "summary.json").exists():
            raise ConfigError(
                f"{run_dir} already holds a completed run; change the config/seed "
                f"or remove the directory"
            )
        summary = _run_one(cfg, run_dir)
    print(f"run dir: {run_dir}")
    print(f"final val accuracy: {summary['final_val_acc']:.4f}")
    print(f"relative cost: {summary['relative_cost']:.1f}x "
          f"({summary['total_pass_units']:.1f} units total)")
    return 0


def ablation_arms(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Comparison grid: baseline, the k-step sample-wise ladder, the
    universal variants, and a universal radius sweep."""
    arms: list[tuple[str, ExperimentConfig]] = []
    arms.append(("baseline", replace_training(base, method="baseline")))
    for k in range(1, 6):
        c = with_radius(base, 6 / 255)
        schedule = dataclasses.replace(c.training.schedule, enabled=False)
        attack = dataclasses.replace(c.training.attack, num_steps=k)
        arms.append((f"pat_k{k}", replace_training(c, method="pat", attack=attack, schedule=schedule)))
    up = with_radius(base, 8 / 255)
    arms.append(("upat", replace_training(up, method="upat")))
    arms.append(("upat_flat", replace_training(up, method="upat_flat")))
    arms.append(("upat_no_clean", replace_training(up, method="upat_no_clean")))
    for n in (2, 4, 6, 8, 10, 12):
        arms.append((f"upat_r{n}", replace_training(with_radius(base, n / 255), method="upat")))
    return arms


def cmd_ablate(args) -> int:
    base = load_experiment_config(args.config, args.overrides)
    seeds = [int(s) for s in str(args.seeds).split(",") if s != ""]
    out = args.out or Path(base.run.output_dir) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for arm, cfg in ablation_arms(base):
        for seed in seeds:
            cfg_s = replace_training(cfg, seed=seed)
            run_dir = out / f"{arm}-s{seed}"
            summary_path = run_dir / "summary.json"
            if summary_path.exists():
                summary = json.loads(summary_path.read_text())
            else:
                summary = _run_one(cfg_s, run_dir)
            rows.append({"arm": arm, **summary})
            print(f"{arm} seed={seed}: val_acc={summary['final_val_acc']:.4f}")
    _write_ablation_outputs(out, rows)
    print(f"ablation outputs in {out}")
    return 0


def _write_ablation_outputs(out: Path, rows: list[dict]) -> None:
    columns = ["arm", "method", "radius", "num_steps", "schedule", "seed",
               "final_val_acc", "best_val_acc", "total_pass_units", "relative_cost"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    by_arm: dict[str, list[dict]] = {}
    for r in rows:
        by_arm.setdefault(r["arm"], []).append(r)
    base_mean = None
    if "baseline" in by_arm:
        vals = [r["final_val_acc"] for r in by_arm["baseline"]]
        base_mean = sum(vals) / len(vals)
    lines = [f"{'arm':<16}{'radius':>9}{'steps':>7}{'seeds':>7}{'mean_val_acc':>14}{'gain':>9}{'cost':>7}"]
    lines.append("-" * len(lines[0]))
    for arm, group in by_arm.items():
        vals = [r["final_val_acc"] for r in group]
        mean = sum(vals) / len(vals)
        gain = "" if base_mean is None else f"{mean - base_mean:+.4f}"
        steps = group[0]["num_steps"] if group[0]["method"] == "pat" else "-"
        lines.append(
            f"{arm:<16}{group[0]['radius']:>9.4f}{steps:>7}{len(group):>7}"
            f"{mean:>14.4f}{gain:>9}{group[0]['relative_cost']:>6.1f}x"
        )
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")


def _resolve_checkpoints(path: Path) -> list[Path]:
    if path.is_dir():
        ckpts = sorted((path / "checkpoints").glob("epoch_*.ckpt"))
        if not ckpts:
            raise ConfigError(f"{path} contains no checkpoints")
        return ckpts
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return [path]


def _experiment_from_checkpoint(meta: dict, args) -> ExperimentConfig:
    if args.config is not None or not meta.get("experiment"):
        if args.config is None:
            raise ConfigError("checkpoint carries no experiment config; pass --config")
        return load_experiment_config(args.config, args.overrides)
    return config_from_dict(meta["experiment"])


def cmd_analyze(args) -> int:
    ckpts = _resolve_checkpoints(args.checkpoint)
    out = args.out or (args.checkpoint if args.checkpoint.is_dir() else args.checkpoint.parent) / "analysis"
    out = Path(out)

    if args.mode == "cost":
        restored = load_training_checkpoint(ckpts[-1])
        print(format_cost_table(cost_table()))
        five = expected_cost("pat", 5).total_units_per_step
        one = expected_cost("pat", 1).total_units_per_step
        upat = expected_cost("upat").total_units_per_step
        print(f"\nuniversal vs 5-step sample-wise: {(five - upat) / five:.1%} cheaper")
        print(f"universal vs 1-step sample-wise: {(one - upat) / one:.1%} cheaper")
        print(f"this run: {restored.meta['cum_pass_units']:.1f} cumulative units "
              f"(base batch {restored.meta['ledger']['base_batch_size']})")
        if args.measure:
            cfg = _experiment_from_checkpoint(restored.meta, args)
            dataset = ingest_dataset(cfg.dataset)
            for method, steps in (("upat", 0), ("pat", 1), ("pat", 5), ("baseline", 0)):
                attack = dataclasses.replace(cfg.training.attack, num_steps=max(steps, 1))
                tc = dataclasses.replace(cfg.training, method=method, attack=attack)
                secs = benchmark_step_time(tc, dataset)
                label = f"{method}(k={steps})" if method == "pat" else method
                print(f"measured {label}: {secs * 1000:.1f} ms/step")
        return 0

    restored = load_training_checkpoint(ckpts[-1])
    cfg = _experiment_from_checkpoint(restored.meta, args)
    dataset = ingest_dataset(cfg.dataset)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "strength":
        if args.adversary in ("universal", "both") and restored.universal_state is None:
            raise ConfigError(
                "checkpoint has no universal perturbation state; "
                "use --adversary samplewise"
            )
        rows = []
        for ckpt in ckpts:
            r = load_training_checkpoint(ckpt)
            row = {"epoch": r.epoch}
            splits = {
                "train": (dataset.train_images, dataset.train_labels),
                "val": (dataset.val_images, dataset.val_labels),
            }
            for split, (x, y) in splits.items():
                if args.adversary in ("universal", "both"):
                    row[f"universal_{split}"] = attack_strength(
                        r.model, x, y, universal_state=r.universal_state,
                        batch_size=cfg.eval.batch_size,
                    )
                if args.adversary in ("samplewise", "both"):
                    row[f"samplewise_{split}"] = attack_strength(
                        r.model, x, y, attack_cfg=cfg.training.attack,
                        batch_size=cfg.eval.batch_size,
                    )
            rows.append(row)
            print(json.dumps(row))
        with open(out / "strength.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {out / 'strength.csv'}")
        return 0

    if args.mode == "landscape":
        grid_n = args.grid or cfg.eval.landscape_grid
        span = args.span or cfg.eval.landscape_span
        n = min(cfg.eval.landscape_samples, dataset.n_val)
        grid, alphas = loss_landscape(
            restored.model, dataset.val_images[:n], dataset.val_labels[:n],
            grid_n=grid_n, span=span, seed=cfg.training.seed,
            batch_size=cfg.eval.batch_size,
        )
        with open(out / "landscape.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "alpha1", "alpha2", "loss"])
            for i in range(grid_n):
                for j in range(grid_n):
                    writer.writerow([i, j, float(alphas[i]), float(alphas[j]), float(grid[i, j])])
        _save_heatmap(grid, alphas, out / "landscape.png")
        print(f"wrote {out / 'landscape.csv'} and landscape.png")
        return 0

    if args.mode == "viz":
        state = restored.universal_state
        if state is None:
            # sample-wise pattern: attack one validation batch, export sample 0
            x = dataset.val_images[: cfg.training.batch_size]
            y = dataset.val_labels[: cfg.training.batch_size]
            batch_p, _ = pgd_pyramid_attack(
                restored.model, x, y, cfg.training.attack, cfg.training.attack.spec.radius
            )
            state = PyramidPerturbation(
                spec=batch_p.spec,
                levels=[lvl[0].clone() for lvl in batch_p.levels],
                target_shape=tuple(x.shape[1:]),
            )
        paths = export_pyramid_images(state, out)
        for name, p in paths.items():
            print(f"wrote {p}")
        return 0

    if args.mode == "corruption":
        accs = corruption_eval(
            restored.model, dataset.val_images, dataset.val_labels,
            severities=tuple(cfg.eval.corruption_severities),
            seed=cfg.training.seed, batch_size=cfg.eval.batch_size,
        )
        clean = accuracy(restored.model, dataset.val_images, dataset.val_labels,
                         cfg.eval.batch_size)
        report = {"clean_acc": clean, "corruptions": accs}
        (out / "corruption.json").write_text(json.dumps(report, indent=2))
        with open(out / "corruption.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["corruption", "severity", "accuracy"])
            for name, sevs in accs.items():
                for sev, acc in sevs.items():
                    writer.writerow([name, sev, acc])
        print(json.dumps(report, indent=2))
        return 0

    raise ConfigError(f"unhandled mode {args.mode!r}")


def _save_heatmap(grid, alphas, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    extent = [float(alphas[0]), float(alphas[-1]), float(alphas[0]), float(alphas[-1])]
    im = ax.imshow(grid.numpy(), origin="lower", extent=extent, cmap="viridis")
    fig.colorbar(im, ax=ax, label="loss")
    ax.set_xlabel("alpha2")
    ax.set_ylabel("alpha1")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_ingest(args) -> int:
    cfg = load_experiment_config(args.config, args.overrides)
    dataset = ingest_dataset(cfg.dataset)
    print(f"dataset: {cfg.dataset.name}")
    print(f"train: {dataset.n_train} images {tuple(dataset.train_images.shape[1:])}")
    print(f"val:   {dataset.n_val} images")
    print(f"classes: {dataset.num_classes}")
    print(f"pixel range: [{dataset.train_images.min():.3f}, {dataset.train_images.max():.3f}]")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    commands = {"train": cmd_train, "ablate": cmd_ablate, "analyze": cmd_analyze, "ingest": cmd_ingest}
    try:
        return commands[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FloatingPointError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
