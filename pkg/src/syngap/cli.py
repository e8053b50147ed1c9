"""Command-line front end: dataset generation, experiment presets, summaries.

Configs are flat key=value text files (`#` starts a comment); unknown keys
are rejected and every value is type-checked. All CSV artifacts are written
via a temp file plus rename so an interrupted run never leaves a partial
file behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import GapKnobs, default_spec, make_synthetic_clone, sample_mixture, save_dataset
from .diagnostics import write_coverage_csv, write_crosseval_csv
from .guidance import PgConfig, RgConfig
from .trainer import (
    TrainConfig,
    _derive_seeds,
    run_loss_split_augmentation,
    run_low_shot,
    run_observation_battery,
    run_zero_shot,
    write_final_csv,
    write_report_csv,
)

PRESETS = ("zero-shot", "low-shot", "loss-split", "observe")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "on", "yes"):
        return True
    if lowered in ("false", "0", "off", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


# key -> (parser, default); the parsed config is a plain dict
CONFIG_SCHEMA: dict[str, tuple] = {
    # mixture construction
    "feature_dim": (int, 16),
    "num_classes": (int, 4),
    "rare_weight": (float, 0.2),
    "mode_stdev": (float, 1.0),
    "anchor_radius": (float, 6.0),
    # gap knobs
    "content_drop": (float, 0.0),
    "appearance_offset": (float, 0.0),
    "appearance_scale": (float, 1.0),
    "quality_rate": (float, 0.0),
    # dataset sizes and filtering
    "train_per_class": (int, 500),
    "val_per_class": (int, 100),
    "test_per_class": (int, 250),
    "prior_per_class": (int, 500),
    "syn_per_class": (int, 500),
    "rejection_threshold": (float, 0.8),
    "prior_epochs": (int, 40),
    # training
    "epochs": (int, 60),
    "batch_size": (int, 32),
    "lr": (float, 0.05),
    "init": (str, "random"),
    "eval_every": (int, 1),
    # pretrained guidance
    "pg": (_parse_bool, False),
    "pg_metric": (str, "cosine"),
    "pg_similarity": (str, "KL"),
    "pg_temperature": (float, 0.1),
    "pg_lambda3": (float, 0.3),
    # real guidance
    "rg": (_parse_bool, False),
    "rg_lambda1": (float, 0.0),
    "rg_lambda2": (float, 1.0),
    "rg_project": (_parse_bool, True),
    # low-shot
    "real_shots_per_class": (int, 5),
    # run control
    "seeds": (_parse_seeds, (0, 1, 2, 3, 4)),
    "out_dir": (str, ""),
    "coverage_radius": (float, 3.0),
}


def parse_config(path) -> dict:
    """Read a flat key=value config; unknown keys and bad values are errors."""
    config = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {ln}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise ValueError(f"{path}: line {ln}: unknown key {key!r}")
            parser, _ = CONFIG_SCHEMA[key]
            try:
                config[key] = parser(value)
            except ValueError as exc:
                raise ValueError(f"{path}: line {ln}: bad value for {key!r}: {exc}") from exc
    return config


def _spec_for_seed(config: dict, seed: int):
    return default_spec(
        seed,
        feature_dim=config["feature_dim"],
        num_classes=config["num_classes"],
        rare_weight=config["rare_weight"],
        mode_stdev=config["mode_stdev"],
        anchor_radius=config["anchor_radius"],
    )


def _knobs(config: dict) -> GapKnobs:
    return GapKnobs(
        content_drop=config["content_drop"],
        appearance_offset=config["appearance_offset"],
        appearance_scale=config["appearance_scale"],
        quality_rate=config["quality_rate"],
    )


def _train_config(config: dict, seed: int) -> TrainConfig:
    pg = None
    if config["pg"]:
        pg = PgConfig(
            metric=config["pg_metric"],
            similarity=config["pg_similarity"],
            temperature=config["pg_temperature"],
            lambda3=config["pg_lambda3"],
        )
    rg = None
    if config["rg"]:
        rg = RgConfig(
            lambda1=config["rg_lambda1"],
            lambda2=config["rg_lambda2"],
            project=config["rg_project"],
        )
    return TrainConfig(
        epochs=config["epochs"],
        batch_size=config["batch_size"],
        lr=config["lr"],
        seed=seed,
        init=config["init"],
        pg=pg,
        rg=rg,
        eval_every=config["eval_every"],
    )


def _world_kwargs(config: dict) -> dict:
    return dict(
        train_per_class=config["train_per_class"],
        val_per_class=config["val_per_class"],
        test_per_class=config["test_per_class"],
        prior_per_class=config["prior_per_class"],
        syn_per_class=config["syn_per_class"],
        rejection_threshold=config["rejection_threshold"],
        prior_epochs=config["prior_epochs"],
    )


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic_csv(path: Path, writer_fn, *args) -> None:
    """Run a write-to-path function against a temp file, then rename."""
    tmp = path.with_name(path.name + ".tmp")
    writer_fn(tmp, *args)
    os.replace(tmp, path)


def _write_config_echo(path: Path, config: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["key", "value"])
    for key in sorted(config):
        value = config[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        w.writerow([key, value])
    _atomic_text(path, buf.getvalue())


def _write_aggregate(path: Path, metrics: dict[str, list[float]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "mean", "std", "n"])
    for name in sorted(metrics):
        values = np.asarray(metrics[name], dtype=np.float64)
        w.writerow([name, repr(float(values.mean())), repr(float(values.std())), len(values)])
    _atomic_text(path, buf.getvalue())


def cmd_gen(config: dict, out_dir: Path) -> None:
    """Write the real, prior, and synthetic dataset files for seeds[0]."""
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = config["seeds"][0]
    spec = _spec_for_seed(config, seed)
    sd = _derive_seeds(seed)
    real = sample_mixture(spec, config["train_per_class"], sd["real_data"])
    prior = sample_mixture(spec, config["prior_per_class"], sd["prior_data"])
    syn = make_synthetic_clone(spec, _knobs(config), config["syn_per_class"], sd["syn_data"])
    _atomic_csv(out_dir / "real.txt", lambda p, ds: save_dataset(ds, p), real)
    _atomic_csv(out_dir / "prior.txt", lambda p, ds: save_dataset(ds, p), prior)
    _atomic_csv(out_dir / "synthetic.txt", lambda p, ds: save_dataset(ds, p), syn)


def _run_one_seed(preset: str, config: dict, seed: int, seed_dir: Path) -> dict[str, float]:
    """Execute one preset for one seed; returns the seed's aggregate metrics."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    spec = _spec_for_seed(config, seed)
    knobs = _knobs(config)
    cfg = _train_config(config, seed)
    kw = _world_kwargs(config)

    if preset == "zero-shot":
        report = run_zero_shot(spec, knobs, cfg, **kw)
        _atomic_csv(seed_dir / "report.csv", write_report_csv, report)
        _atomic_csv(seed_dir / "final.csv", write_final_csv, report)
        return {
            "test_accuracy": report.final_test_acc,
            "mode_coverage": report.extras["mode_coverage"],
        }

    if preset == "low-shot":
        report = run_low_shot(spec, knobs, config["real_shots_per_class"], cfg, **kw)
        _atomic_csv(seed_dir / "report.csv", write_report_csv, report)
        _atomic_csv(seed_dir / "final.csv", write_final_csv, report)
        return {
            "test_accuracy": report.final_test_acc,
            "syn_to_real_ratio": report.extras["syn_to_real_ratio"],
            "rg_projection_rate": float(np.mean(report.proj_frac)),
        }

    if preset == "loss-split":
        result = run_loss_split_augmentation(spec, knobs, cfg, **kw)
        _atomic_csv(seed_dir / "report_baseline.csv", write_report_csv, result.baseline)
        _atomic_csv(seed_dir / "report_low_half.csv", write_report_csv, result.low_half)
        _atomic_csv(seed_dir / "report_high_half.csv", write_report_csv, result.high_half)
        _atomic_csv(seed_dir / "final.csv", write_final_csv, result.high_half)
        return {
            "baseline_test_accuracy": result.baseline.final_test_acc,
            "low_half_test_accuracy": result.low_half.final_test_acc,
            "high_half_test_accuracy": result.high_half.final_test_acc,
        }

    if preset == "observe":
        result = run_observation_battery(
            spec, knobs, cfg, coverage_radius=config["coverage_radius"], **kw
        )
        _atomic_csv(seed_dir / "report_real.csv", write_report_csv, result.real_report)
        _atomic_csv(seed_dir / "report_synthetic.csv", write_report_csv, result.syn_report)
        _atomic_csv(seed_dir / "crosseval.csv", write_crosseval_csv, result.crosseval)
        _atomic_csv(
            seed_dir / "coverage.csv", write_coverage_csv, result.coverage, config["coverage_radius"]
        )
        _write_observe_losses(seed_dir / "losses.csv", result)
        return {
            "acc_real_on_real": result.crosseval[("Real", "Real")],
            "acc_real_on_synthetic": result.crosseval[("Real", "Synthetic")],
            "acc_synthetic_on_real": result.crosseval[("Synthetic", "Real")],
            "acc_synthetic_on_synthetic": result.crosseval[("Synthetic", "Synthetic")],
            "mean_loss_synthetic_under_real": result.syn_under_real.mean,
            "mean_loss_real_under_synthetic": result.real_under_syn.mean,
            "mode_coverage": result.coverage,
        }

    raise ValueError(f"unknown preset {preset!r}, expected one of {PRESETS}")


def _write_observe_losses(path: Path, result) -> None:
    # both opposite-source profiles in one file; the source column tells them apart
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["index", "label", "source", "loss"])
    for i, loss in enumerate(result.syn_under_real.losses):
        w.writerow([i, "", "Synthetic", repr(float(loss))])
    for i, loss in enumerate(result.real_under_syn.losses):
        w.writerow([i, "", "Real", repr(float(loss))])
    _atomic_text(path, buf.getvalue())


def cmd_run(config: dict, preset: str, out_dir: Path, seeds: tuple[int, ...]) -> None:
    """Run a preset over all seeds, then write the aggregate strictly last."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    preset_dir = out_dir / preset
    preset_dir.mkdir(parents=True, exist_ok=True)
    metrics: dict[str, list[float]] = {}
    for seed in seeds:
        seed_metrics = _run_one_seed(preset, config, seed, preset_dir / f"seed_{seed}")
        for name, value in seed_metrics.items():
            metrics.setdefault(name, []).append(float(value))
    _write_config_echo(preset_dir / "config_echo.csv", config)
    _write_aggregate(preset_dir / "aggregate.csv", metrics)


def cmd_summarize(run_dir: Path, out=sys.stdout) -> None:
    """Print a text table per preset found under run_dir."""
    aggregates = sorted(run_dir.glob("*/aggregate.csv"))
    if not aggregates:
        raise FileNotFoundError(
            f"no aggregates under {run_dir}; expected <preset>/aggregate.csv "
            f"for presets like {', '.join(PRESETS)}"
        )
    for agg_path in aggregates:
        preset_dir = agg_path.parent
        print(f"preset: {preset_dir.name}", file=out)
        echo_path = preset_dir / "config_echo.csv"
        if echo_path.exists():
            with open(echo_path, encoding="utf-8", newline="") as fh:
                rows = {row["key"]: row["value"] for row in csv.DictReader(fh)}
            knob_keys = ("content_drop", "appearance_offset", "appearance_scale", "quality_rate")
            knobs = " ".join(f"{k}={rows[k]}" for k in knob_keys if k in rows)
            print(f"knobs: {knobs}", file=out)
            print(f"seeds: {rows.get('seeds', '?')}", file=out)
        with open(agg_path, encoding="utf-8", newline="") as fh:
            print(f"{'metric':<36} {'mean':>12} {'std':>12} {'n':>4}", file=out)
            for row in csv.DictReader(fh):
                mean = float(row["mean"])
                std = float(row["std"])
                print(f"{row['metric']:<36} {mean:>12.6f} {std:>12.6f} {row['n']:>4}", file=out)
        print(file=out)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="syngap",
        description="Generate content-gap datasets, run guidance experiments, summarize results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="write real/prior/synthetic dataset files")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)

    p_run = sub.add_parser("run", help="run an experiment preset over all seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--preset", required=True, choices=PRESETS)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seeds", default=None, help="comma list, overrides the config")

    p_sum = sub.add_parser("summarize", help="print tables for a finished run directory")
    p_sum.add_argument("run_dir")

    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            cmd_gen(parse_config(args.config), Path(args.out))
        elif args.command == "run":
            config = parse_config(args.config)
            seeds = _parse_seeds(args.seeds) if args.seeds else config["seeds"]
            if not seeds:
                raise ValueError("no seeds given: set seeds= in the config or pass --seeds")
            cmd_run(config, args.preset, Path(args.out), seeds)
        elif args.command == "summarize":
            cmd_summarize(Path(args.run_dir))
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
