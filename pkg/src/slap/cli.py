"""Command-line interface: data generation, training, evaluation, ablations,
and attention visualization."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from slap import __version__


def _load_cfg(config_path, **train_overrides):
    from slap.config import SlapConfig, load_config

    cfg = load_config(config_path) if config_path else SlapConfig()
    applied = {k: v for k, v in train_overrides.items() if v is not None}
    if applied:
        cfg.train = dataclasses.replace(cfg.train, **applied)
    return cfg


@click.group()
@click.version_option(__version__)
def main():
    """Language-conditioned point-cloud policy tools."""


@main.command("gen-data")
@click.option("--templates", default="all", show_default=True,
              help="'all' or comma-separated template names")
@click.option("--demos", default=12, show_default=True, help="episodes per task")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--val-per-task", default=None, type=int,
              help="validation episodes per task (default: demos // 6, at least 1)")
@click.option("--distractors", default="1,2", show_default=True,
              help="min,max distractor objects per scene")
@click.option("--views", default=3, show_default=True, help="scan views per scene")
def gen_data(templates, demos, seed, out, val_per_task, distractors, views):
    """Generate a synthetic demonstration dataset."""
    from slap.dataio import build_dataset, templates_from_names

    lo, hi = (int(x) for x in distractors.split(","))
    manifest = build_dataset(templates_from_names(templates), demos_per_task=demos,
                             seed=seed, out_dir=out, n_val_per_task=val_per_task,
                             distractors=(lo, hi), n_views=views)
    n = len(manifest["episodes"])
    click.echo(f"wrote {n} episodes for {len(manifest['templates'])} tasks to {out}")


def _train_command(kind, data, out, config, epochs, seed, lr, no_augment,
                   locality_weight=None, variant=None, tasks=None, threads=None):
    from slap.dataio import load_dataset
    from slap.training import train

    overrides = {"epochs": epochs, "seed": seed, "learning_rate": lr,
                 "num_threads": threads}
    if locality_weight is not None:
        overrides["locality_weight"] = locality_weight
    if tasks:
        overrides["tasks"] = tuple(t.strip() for t in tasks.split(","))
    cfg = _load_cfg(config, **overrides)
    if no_augment:
        cfg.augment = dataclasses.replace(cfg.augment, enabled=False)
    if variant:
        cfg.apm = dataclasses.replace(cfg.apm, variant=variant)
    dataset = load_dataset(data)
    result = train(kind, dataset, cfg, out)
    click.echo(f"{kind}: {result.epochs_run} epochs, best val objective "
               f"{result.best_val_objective:.6f}, checkpoint {result.checkpoint_path}")


_common_train_options = [
    click.option("--data", required=True, type=click.Path(exists=True)),
    click.option("--out", required=True, type=click.Path()),
    click.option("--config", default=None, type=click.Path(exists=True),
                 help="YAML config file; flags override it"),
    click.option("--epochs", default=None, type=int),
    click.option("--seed", default=None, type=int),
    click.option("--lr", default=None, type=float),
    click.option("--no-augment", is_flag=True, help="disable scene augmentation"),
    click.option("--tasks", default=None, help="comma-separated template names to train on"),
    click.option("--threads", default=None, type=int,
                 help="torch thread count (1 = bit-reproducible runs)"),
]


def _add_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


@main.command("train-ipm")
@_add_options(_common_train_options)
@click.option("--locality-weight", default=None, type=float,
              help="weight of the locality loss term")
def train_ipm(data, out, config, epochs, seed, lr, no_augment, tasks, threads,
              locality_weight):
    """Train the interaction prediction module."""
    _train_command("ipm", data, out, config, epochs, seed, lr, no_augment,
                   locality_weight=locality_weight, tasks=tasks, threads=threads)


@main.command("train-apm")
@_add_options(_common_train_options)
@click.option("--variant", default=None,
              type=click.Choice(["full", "no_crop", "pointnet_only"]),
              help="input variant (ablations)")
def train_apm(data, out, config, epochs, seed, lr, no_augment, tasks, threads, variant):
    """Train the relative action module."""
    _train_command("apm", data, out, config, epochs, seed, lr, no_augment,
                   variant=variant, tasks=tasks, threads=threads)


@main.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--variant", default="full", show_default=True,
              type=click.Choice(["full", "oracle_ipm", "no_crop", "pointnet_only",
                                 "ipm_only", "ipm-accuracy"]))
@click.option("--ipm", default=None, type=click.Path(exists=True), help="IPM checkpoint")
@click.option("--apm", default=None, type=click.Path(exists=True), help="APM checkpoint")
@click.option("--split", default="val", show_default=True,
              type=click.Choice(["train", "val"]))
@click.option("--out", default=None, type=click.Path(), help="CSV report path")
def eval_cmd(data, variant, ipm, apm, split, out):
    """Evaluate checkpoints on a dataset split."""
    from slap.dataio import load_dataset
    from slap.evaluation import evaluate_distance_error, evaluate_interaction_accuracy

    dataset = load_dataset(data)
    if variant == "ipm-accuracy":
        if not ipm:
            raise click.UsageError("--ipm is required for ipm-accuracy")
        report = evaluate_interaction_accuracy(ipm, dataset, split)
    else:
        if variant in ("full", "no_crop", "ipm_only") and not ipm:
            raise click.UsageError(f"--ipm is required for variant {variant}")
        if variant != "ipm_only" and not apm:
            raise click.UsageError(f"--apm is required for variant {variant}")
        report = evaluate_distance_error(ipm, apm, dataset, split, variant)
    for row in report.rows:
        click.echo(f"{row.task:28s} n={row.n_episodes:3d} {report.metric}={row.value:.4f}"
                   + (f" failures={row.n_failures}" if row.n_failures else ""))
    click.echo(f"{'average':28s} {report.metric}={report.average:.4f}")
    if out:
        report.to_csv(out)
        click.echo(f"report written to {out}")


@main.command("ablate")
@click.option("--suite", required=True,
              type=click.Choice(["dist-error", "ipm-accuracy", "locality"]))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--epochs", default=None, type=int)
@click.option("--seeds", default="0,1,2", show_default=True,
              help="seeds for the multi-seed suites")
@click.option("--tasks", default=None, help="restrict to these templates")
def ablate(suite, data, out, config, epochs, seeds, tasks):
    """Run an ablation suite with equal training budgets."""
    from slap.ablation import (
        run_augmentation_ablation,
        run_distance_ablation,
        run_locality_ablation,
    )
    from slap.dataio import load_dataset

    overrides = {"epochs": epochs}
    if tasks:
        overrides["tasks"] = tuple(t.strip() for t in tasks.split(","))
    cfg = _load_cfg(config, **overrides)
    dataset = load_dataset(data)
    seed_list = tuple(int(s) for s in seeds.split(","))
    if suite == "dist-error":
        result = run_distance_ablation(dataset, cfg, out)
        click.echo(json.dumps(result["averages"], indent=2, sort_keys=True))
    elif suite == "ipm-accuracy":
        result = run_augmentation_ablation(dataset, cfg, out, seed_list)
        click.echo(json.dumps(result, indent=2, sort_keys=True))
    else:
        result = run_locality_ablation(dataset, cfg, out, seed_list)
        click.echo(json.dumps(result, indent=2, sort_keys=True))


@main.command("visualize")
@click.option("--episode", required=True, type=click.Path(exists=True),
              help="episode file (.slep)")
@click.option("--ipm", required=True, type=click.Path(exists=True), help="IPM checkpoint")
@click.option("--out", required=True, type=click.Path(), help="output PLY path")
def visualize(episode, ipm, out):
    """Export the predicted attention mask and interaction site as a PLY."""
    import numpy as np

    from slap.dataio import read_episode
    from slap.ipm import export_attention, predict_interaction
    from slap.training import load_model

    demo = read_episode(episode)
    model, _ = load_model(ipm)
    model.eval()
    pred = predict_interaction(demo, model, np.random.default_rng(0))
    export_attention(pred, demo.cloud, out)
    click.echo(f"interaction point {np.round(pred.point, 4).tolist()}; "
               f"{len(pred.top_mask)} attention points -> {out}")


if __name__ == "__main__":
    sys.exit(main())
