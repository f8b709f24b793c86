"""Evaluation: distance-error metric across pipeline variants, and
interaction-accuracy against the generator's part volumes.

Variants of the distance-error pipeline:
  full          predicted interaction point -> fixed-radius crop -> actions
  oracle_ipm    ground-truth interaction point -> crop -> actions
  no_crop       whole scene, actions still relative to the predicted point
  pointnet_only whole scene, absolute regression, no interaction point
  ipm_only      distance from the predicted to the labeled interaction point

Empty-crop episodes are recorded as failures with a 1.0 m sentinel and
reported separately; they are never silently averaged into the error.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch

from slap.apm import gripper_head_inputs, relative_targets
from slap.config import ApmConfig, section_from_dict
from slap.errors import DatasetError, EmptyCrop
from slap.geometry import crop_sphere
from slap.ipm import predict_interaction
from slap.scenegen import Demonstration, obb_contains
from slap.training import load_model, _rng

VARIANTS = ("full", "oracle_ipm", "no_crop", "pointnet_only", "ipm_only")
FAILURE_SENTINEL = 1.0


@dataclass
class EvalRow:
    task: str
    n_episodes: int
    value: float
    n_failures: int = 0


@dataclass
class EvalReport:
    metric: str
    variant: str
    rows: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        values = [r.value for r in self.rows if not np.isnan(r.value)]
        return float(statistics.mean(values)) if values else float("nan")

    @property
    def total_failures(self) -> int:
        return sum(r.n_failures for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("task", "n_episodes", self.metric, "n_failures"))
            for r in self.rows:
                w.writerow((r.task, r.n_episodes, f"{r.value:.6f}", r.n_failures))
            w.writerow(("average", sum(r.n_episodes for r in self.rows),
                        f"{self.average:.6f}", self.total_failures))


def _split_demos(dataset, split: str) -> list:
    demos = dataset.val if split == "val" else dataset.train
    if not demos:
        raise DatasetError(f"{split} split is empty")
    return demos


def _episode_distance_error(demo: Demonstration, variant: str, ipm_model, apm_model,
                            apm_cfg, seed_key) -> float:
    """Mean over the three actions of the absolute position error (meters)."""
    if variant in ("full", "no_crop", "ipm_only"):
        pred = predict_interaction(demo, ipm_model, _rng(*seed_key, 1))
        p_i = pred.point
    elif variant == "oracle_ipm":
        p_i = demo.interaction_point
    if variant == "ipm_only":
        return float(np.linalg.norm(p_i - demo.interaction_point))

    if variant == "pointnet_only":
        center = demo.cloud.positions.mean(axis=0)
        crop = demo.cloud
    elif variant in ("full", "oracle_ipm"):
        center = p_i
        crop = crop_sphere(demo.cloud, center, apm_cfg.crop_radius)
        if len(crop) == 0:
            raise EmptyCrop(f"empty crop at {np.round(center, 3).tolist()}")
    else:  # no_crop
        center = p_i
        crop = demo.cloud

    out = apm_model(crop.translated(-center), gripper_head_inputs(demo),
                    _rng(*seed_key, 2))
    target = relative_targets(demo, center)
    errs = [
        float(np.linalg.norm(out["delta_p"][k].detach().numpy() - target.actions()[k].delta_p))
        for k in range(3)
    ]
    return float(np.mean(errs))


def evaluate_distance_error(ipm_ckpt, apm_ckpt, dataset, split: str = "val",
                            variant: str = "full", seed: int = 0) -> EvalReport:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    ipm_model = ipm_header = None
    apm_model = apm_header = apm_cfg = None
    if variant in ("full", "no_crop", "ipm_only"):
        ipm_model, ipm_header = load_model(ipm_ckpt)
        ipm_model.eval()
    if variant != "ipm_only":
        apm_model, apm_header = load_model(apm_ckpt)
        apm_model.eval()
        apm_cfg = section_from_dict(ApmConfig, apm_header["config"]["apm"])
        expected = {"full": "full", "oracle_ipm": "full", "no_crop": "no_crop",
                    "pointnet_only": "pointnet_only"}[variant]
        if apm_cfg.variant != expected:
            raise DatasetError(
                f"checkpoint was trained for variant {apm_cfg.variant!r}, "
                f"evaluation requested {expected!r}")

    demos = _split_demos(dataset, split)
    per_task = {}
    with torch.no_grad():
        for j, demo in enumerate(demos):
            task = demo.meta.get("template", "task")
            errors, failures = per_task.setdefault(task, ([], [0]))
            try:
                err = _episode_distance_error(demo, variant, ipm_model, apm_model,
                                              apm_cfg, (seed, j))
                errors.append(err)
            except EmptyCrop:
                failures[0] += 1
                errors.append(FAILURE_SENTINEL)

    rows = [EvalRow(task, len(errs), float(np.mean(errs)), fails[0])
            for task, (errs, fails) in sorted(per_task.items())]
    manifest = {
        "metric": "distance_error_m", "variant": variant, "split": split, "seed": seed,
        "dataset_hash": dataset.dataset_hash,
        "ipm_checkpoint": str(ipm_ckpt) if ipm_model is not None else None,
        "ipm_config_hash": ipm_header["config_hash"] if ipm_model is not None else None,
        "apm_checkpoint": str(apm_ckpt) if apm_model is not None else None,
        "apm_config_hash": apm_header["config_hash"] if apm_model is not None else None,
    }
    return EvalReport("distance_error_m", variant, rows, manifest)


def evaluate_interaction_accuracy(ipm_ckpt, dataset, split: str = "val",
                                  seed: int = 0) -> EvalReport:
    """Success = predicted point inside the labeled part volume (the handle,
    not just somewhere on the cabinet)."""
    ipm_model, header = load_model(ipm_ckpt)
    ipm_model.eval()
    demos = _split_demos(dataset, split)
    per_task = {}
    with torch.no_grad():
        for j, demo in enumerate(demos):
            part = demo.meta.get("target_part")
            if part is None:
                raise DatasetError("episode lacks part-level volumes in metadata")
            pred = predict_interaction(demo, ipm_model, _rng(seed, j, 1))
            hit = obb_contains(part, pred.point)
            per_task.setdefault(demo.meta.get("template", "task"), []).append(int(hit))
    rows = [EvalRow(task, len(hits), float(np.mean(hits))) for task, hits in sorted(per_task.items())]
    manifest = {
        "metric": "interaction_accuracy", "split": split, "seed": seed,
        "dataset_hash": dataset.dataset_hash,
        "ipm_checkpoint": str(ipm_ckpt), "ipm_config_hash": header["config_hash"],
    }
    return EvalReport("interaction_accuracy", "ipm", rows, manifest)


def attention_mass_distance(ipm_ckpt, dataset, split: str = "val", seed: int = 0) -> float:
    """Mean softmax-weighted squared distance of attention to the label (m^2).

    The quantity the locality loss regularizes, measured on clean episodes.
    """
    model, _ = load_model(ipm_ckpt)
    model.eval()
    demos = _split_demos(dataset, split)
    vals = []
    with torch.no_grad():
        for j, demo in enumerate(demos):
            scores, points = model.score(demo.cloud, demo.command, demo.initial_proprio(),
                                         _rng(seed, j, 1))
            probs = torch.softmax(scores, dim=0).numpy()
            d2 = np.sum((points - demo.interaction_point) ** 2, axis=1)
            vals.append(float(np.dot(probs, d2)))
    return float(np.mean(vals))
