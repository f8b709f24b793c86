"""Ablation harness: the architecture variants, the augmentation on/off
comparison, and the locality-weight comparison, each with equal training
budgets so the orderings are attributable to the design choice under test.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

from slap.config import SlapConfig
from slap.dataio import SlapDataset
from slap.evaluation import (
    attention_mass_distance,
    evaluate_distance_error,
    evaluate_interaction_accuracy,
)
from slap.training import train


def _clone(cfg: SlapConfig, **train_overrides) -> SlapConfig:
    new = dataclasses.replace(cfg)
    new.encoder = dataclasses.replace(cfg.encoder)
    new.backbone = dataclasses.replace(cfg.backbone)
    new.apm = dataclasses.replace(cfg.apm)
    new.augment = dataclasses.replace(cfg.augment)
    new.train = dataclasses.replace(cfg.train, **train_overrides)
    return new


def run_distance_ablation(dataset: SlapDataset, cfg: SlapConfig, out_dir,
                          split: str = "val") -> dict:
    """Train the interaction model plus the three action-model variants with
    one budget, then report mean distance error per pipeline variant."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ipm_res = train("ipm", dataset, _clone(cfg), out / "ipm")

    apm_ckpts = {}
    for variant in ("full", "no_crop", "pointnet_only"):
        vcfg = _clone(cfg)
        vcfg.apm = dataclasses.replace(cfg.apm, variant=variant)
        res = train("apm", dataset, vcfg, out / f"apm_{variant}")
        apm_ckpts[variant] = res.checkpoint_path

    reports = {
        "full": evaluate_distance_error(ipm_res.checkpoint_path, apm_ckpts["full"],
                                        dataset, split, "full"),
        "oracle_ipm": evaluate_distance_error(None, apm_ckpts["full"],
                                              dataset, split, "oracle_ipm"),
        "no_crop": evaluate_distance_error(ipm_res.checkpoint_path, apm_ckpts["no_crop"],
                                           dataset, split, "no_crop"),
        "pointnet_only": evaluate_distance_error(None, apm_ckpts["pointnet_only"],
                                                 dataset, split, "pointnet_only"),
        "ipm_only": evaluate_distance_error(ipm_res.checkpoint_path, None,
                                            dataset, split, "ipm_only"),
    }
    averages = {v: r.average for v, r in reports.items()}
    with open(out / "distance_ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("task",) + tuple(reports))
        tasks = sorted({row.task for r in reports.values() for row in r.rows})
        for task in tasks:
            w.writerow((task,) + tuple(
                next((f"{row.value:.6f}" for row in r.rows if row.task == task), "")
                for r in reports.values()
            ))
        w.writerow(("average",) + tuple(f"{averages[v]:.6f}" for v in reports))
    (out / "distance_ablation.json").write_text(json.dumps(
        {"averages": averages,
         "failures": {v: r.total_failures for v, r in reports.items()}},
        indent=2, sort_keys=True))
    return {"averages": averages, "reports": reports, "checkpoints": apm_ckpts,
            "ipm_checkpoint": ipm_res.checkpoint_path}


def run_augmentation_ablation(dataset: SlapDataset, cfg: SlapConfig, out_dir,
                              seeds=(0, 1, 2), split: str = "val") -> dict:
    """Interaction accuracy with scene augmentation on vs off, across seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        pair = {}
        for label, enabled in (("augmented", True), ("plain", False)):
            vcfg = _clone(cfg, seed=seed)
            vcfg.augment = dataclasses.replace(cfg.augment, enabled=enabled)
            res = train("ipm", dataset, vcfg, out / f"ipm_{label}_s{seed}")
            rep = evaluate_interaction_accuracy(res.checkpoint_path, dataset, split)
            pair[label] = rep.average
        rows.append({"seed": seed, **pair})
    means = {label: sum(r[label] for r in rows) / len(rows)
             for label in ("augmented", "plain")}
    result = {"per_seed": rows, "mean": means}
    (out / "augmentation_ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def run_locality_ablation(dataset: SlapDataset, cfg: SlapConfig, out_dir,
                          seeds=(0, 1, 2), split: str = "val") -> dict:
    """Attention concentration with locality weight 1 vs 0, across seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        pair = {}
        for label, w in (("with_locality", 1.0), ("without_locality", 0.0)):
            vcfg = _clone(cfg, seed=seed, locality_weight=w)
            res = train("ipm", dataset, vcfg, out / f"ipm_{label}_s{seed}")
            pair[label] = attention_mass_distance(res.checkpoint_path, dataset, split)
        rows.append({"seed": seed, **pair})
    means = {label: sum(r[label] for r in rows) / len(rows)
             for label in ("with_locality", "without_locality")}
    result = {"per_seed": rows, "mean_sq_dist_m2": means}
    (out / "locality_ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result
