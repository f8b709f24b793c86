"""Training orchestration: seeded per-sample loops, batch-size-1 Adam steps,
validation with reset-to-best, CSV logs, run manifests, and checkpointing.

The validation protocol follows the reset rule: after every epoch the
validation objective is compared to the best seen; if it did not improve,
parameters AND optimizer moments are rolled back to the best snapshot before
continuing. The final checkpoint always holds the best-validation
parameters. With ``validation_reset`` disabled the loop is plain training
and the final checkpoint holds the last-epoch parameters.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

import slap
from slap.apm import ActionModel, ApmLossWeights, apm_loss_torch, crop_input, relative_targets
from slap.augment import apm_offset_jitter, augment_scene
from slap.checkpoint import load_checkpoint, save_checkpoint
from slap.config import (
    ApmConfig,
    BackboneConfig,
    EncoderConfig,
    SlapConfig,
    config_hash,
    section_from_dict,
    to_dict,
)
from slap.dataio import SlapDataset, Vocabulary
from slap.errors import DatasetError, LockError, NonFiniteLoss, TargetNotInP
from slap.geometry import UnitQuaternion, grid_downsample, quat_angle
from slap.ipm import InteractionModel, ipm_loss_terms, snap_index
from slap.scenegen import Demonstration

# Salt constants keep independent RNG streams from colliding.
_S_SHUFFLE, _S_AUGMENT, _S_ENCODE, _S_APM, _S_VAL = 11, 13, 17, 19, 23

IPM_CSV_COLUMNS = ("epoch", "train_CE", "train_Lloc", "val_CE", "val_accuracy", "val_mean_dist")
APM_CSV_COLUMNS = ("epoch", "L_pos", "L_ori", "L_grip", "val_pos_err_m", "val_ori_err_rad", "val_grip_acc")


@dataclass
class TrainResult:
    checkpoint_path: str
    csv_path: str
    best_val_objective: float
    history: list = field(default_factory=list)
    model: torch.nn.Module = None
    epochs_run: int = 0


def torch_dtype(name: str):
    return torch.float32 if name == "float32" else torch.float64


def model_config_dict(kind: str, cfg: SlapConfig, vocab: Vocabulary = None) -> dict:
    """The checkpoint-identity subset of the config (drives the config hash)."""
    if kind == "ipm":
        return {"kind": "ipm", "dtype": cfg.train.dtype,
                "encoder": to_dict(cfg.encoder), "backbone": to_dict(cfg.backbone),
                "vocab": list(vocab.tokens)}
    if kind == "apm":
        return {"kind": "apm", "dtype": cfg.train.dtype, "apm": to_dict(cfg.apm)}
    raise ValueError(f"unknown model kind {kind!r}")


def build_model(kind: str, cfg: SlapConfig, vocab: Vocabulary = None, seed: int = 0):
    torch.manual_seed(seed)
    dtype = torch_dtype(cfg.train.dtype)
    if kind == "ipm":
        return InteractionModel(cfg.encoder, cfg.backbone, vocab, dtype)
    if kind == "apm":
        return ActionModel(cfg.apm, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path):
    """Rebuild a model from a checkpoint. -> (model, header dict)."""
    state, header = load_checkpoint(path)
    mc = header["config"]
    dtype = torch_dtype(mc["dtype"])
    if header["kind"] == "ipm":
        enc = section_from_dict(EncoderConfig, mc["encoder"])
        bb = section_from_dict(BackboneConfig, mc["backbone"])
        model = InteractionModel(enc, bb, Vocabulary(mc["vocab"]), dtype)
    elif header["kind"] == "apm":
        model = ActionModel(section_from_dict(ApmConfig, mc["apm"]), dtype)
    else:
        raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
    model.load_state_dict({k: torch.from_numpy(v.copy()).to(dtype) for k, v in state.items()})
    return model, header


def source_hash() -> str:
    """Content hash of the package sources, recorded in run manifests."""
    root = Path(slap.__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")) + sorted(root.rglob("*.pyx")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(list(entropy))


def _filter_tasks(demos: list, tasks: tuple) -> list:
    if not tasks:
        return list(demos)
    return [d for d in demos if d.meta.get("template") in tasks]


def _snapshot(model, opt):
    return ({k: v.detach().clone() for k, v in model.state_dict().items()},
            copy.deepcopy(opt.state_dict()))


def _restore(model, opt, snap):
    params, opt_state = snap
    model.load_state_dict({k: v.clone() for k, v in params.items()})
    opt.load_state_dict(copy.deepcopy(opt_state))


class _Lock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"{self.path.parent} is in use by another run "
                            f"(stale lock? remove {self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _check_finite(loss: torch.Tensor, sample_id: str):
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLoss(f"non-finite loss ({loss.item()}) on sample {sample_id}")


# ---------------------------------------------------------------------------
# Per-sample losses


def _ipm_sample(model, demo: Demonstration, cfg: SlapConfig, seed_key, train: bool):
    """-> (loss, ce, lloc, hit) on one (possibly augmented) episode."""
    w = cfg.train.locality_weight
    res = cfg.encoder.fine.grid_resolution
    use = demo
    if train and cfg.augment.enabled:
        # An unlucky dropout can erase the labeled region; re-draw a few times,
        # then fall back to the clean episode.
        for attempt in range(3):
            cand = augment_scene(demo, list(seed_key) + [_S_AUGMENT, attempt], cfg.augment)
            try:
                snap_index(grid_downsample(cand.cloud, res).positions,
                           cand.interaction_point, res)
            except TargetNotInP:
                continue
            use = cand
            break
    enc_rng = _rng(*seed_key, _S_ENCODE)
    scores, points = model.score(use.cloud, use.command, use.initial_proprio(), enc_rng)
    total, ce, loc = ipm_loss_terms(scores, points, use.interaction_point, w, res)
    target_idx = snap_index(points, use.interaction_point, res)
    hit = int(np.argmax(scores.detach().numpy()) == target_idx)
    return total, ce, loc, hit


def _apm_sample(model, demo: Demonstration, cfg: SlapConfig, seed_key, train: bool):
    """-> (loss, terms dict) honoring the configured input variant."""
    variant = cfg.apm.variant
    rng = _rng(*seed_key, _S_APM)
    if variant == "pointnet_only":
        center = demo.cloud.positions.mean(axis=0)
        crop = demo.cloud
    else:
        center = demo.interaction_point.copy()
        if train and cfg.augment.apm_center_std > 0:
            center = center + rng.normal(0.0, cfg.augment.apm_center_std, 3)
        crop = (crop_input(demo, center, cfg.apm.crop_radius)
                if variant == "full" else demo.cloud)
    rel = crop.translated(-center)
    target = relative_targets(demo, center)
    if train and variant != "pointnet_only" and cfg.augment.apm_jitter > 0:
        rel, target = apm_offset_jitter(rel, target, list(seed_key) + [_S_APM, 1], cfg.augment)
    out = model(rel, target.proprio, _rng(*seed_key, _S_ENCODE))
    weights = ApmLossWeights(cfg.apm.lambda_p, cfg.apm.lambda_q, cfg.apm.lambda_g)
    total, pos, ori, grip = apm_loss_torch(out, target, weights, cfg.apm.orientation_loss)
    with torch.no_grad():
        pos_err = float(np.mean([
            np.linalg.norm(out["delta_p"][k].numpy() - target.actions()[k].delta_p)
            for k in range(3)
        ]))
        ori_err = float(np.mean([
            quat_angle(UnitQuaternion.from_array(out["quat"][k].numpy().astype(np.float64)),
                       target.actions()[k].q)
            for k in range(3)
        ]))
        grip_ok = float(np.mean([
            int((out["grip_logits"][k].item() >= 0.0) == target.actions()[k].g)
            for k in range(3)
        ]))
    return total, {"pos": pos, "ori": ori, "grip": grip,
                   "pos_err": pos_err, "ori_err": ori_err, "grip_acc": grip_ok}


# ---------------------------------------------------------------------------
# The training loop


def train(model_kind: str, dataset: SlapDataset, cfg: SlapConfig, out_dir) -> TrainResult:
    """Train one module on a dataset; see the module docstring for protocol."""
    if model_kind not in ("ipm", "apm"):
        raise ValueError(f"unknown model kind {model_kind!r}")
    train_demos = _filter_tasks(dataset.train, cfg.train.tasks)
    val_demos = _filter_tasks(dataset.val, cfg.train.tasks)
    if not train_demos:
        raise DatasetError("training split is empty")
    if not val_demos:
        raise DatasetError("validation split is empty")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.num_threads:
        torch.set_num_threads(cfg.train.num_threads)

    with _Lock(out):
        model = build_model(model_kind, cfg, dataset.vocab, cfg.train.seed)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate)
        csv_path = out / f"{model_kind}_train_log.csv"
        ckpt_path = out / f"{model_kind}.ckpt"
        columns = IPM_CSV_COLUMNS if model_kind == "ipm" else APM_CSV_COLUMNS

        best_obj = None
        best_snap = _snapshot(model, opt) if cfg.train.validation_reset else None
        history = []
        t0 = time.time()
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            epochs_run = 0
            for epoch in range(cfg.train.epochs):
                lr = cfg.train.learning_rate * cfg.train.lr_decay_factor ** sum(
                    1 for e in cfg.train.lr_decay_epochs if e <= epoch)
                for group in opt.param_groups:
                    group["lr"] = lr
                order = _rng(cfg.train.seed, _S_SHUFFLE, epoch).permutation(len(train_demos))
                sums = {}
                for i in order:
                    demo = train_demos[int(i)]
                    sample_id = dataset.sample_id("train", int(i))
                    seed_key = (cfg.train.seed, epoch, int(i))
                    if model_kind == "ipm":
                        loss, ce, loc, hit = _ipm_sample(model, demo, cfg, seed_key, True)
                        _accumulate(sums, {"ce": ce.item(), "lloc": loc.item(), "acc": hit})
                    else:
                        loss, terms = _apm_sample(model, demo, cfg, seed_key, True)
                        _accumulate(sums, {"pos": terms["pos"].item(), "ori": terms["ori"].item(),
                                           "grip": terms["grip"].item(),
                                           "pos_err": terms["pos_err"]})
                    _check_finite(loss, sample_id)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                n = len(train_demos)
                train_means = {k: v / n for k, v in sums.items()}

                val = _validate(model_kind, model, val_demos, cfg)
                row, metrics = _epoch_row(model_kind, epoch, train_means, val)
                writer.writerow(row)
                fh.flush()
                history.append(metrics)
                epochs_run = epoch + 1

                improved = best_obj is None or val["objective"] < best_obj
                if improved:
                    best_obj = val["objective"]
                    if cfg.train.validation_reset:
                        best_snap = _snapshot(model, opt)
                elif cfg.train.validation_reset:
                    _restore(model, opt, best_snap)

                if _early_stop(cfg, metrics):
                    break

        if cfg.train.validation_reset and best_snap is not None:
            model.load_state_dict({k: v.clone() for k, v in best_snap[0].items()})

        mc = model_config_dict(model_kind, cfg, dataset.vocab)
        save_checkpoint(ckpt_path, model_kind, mc,
                        {k: v for k, v in model.state_dict().items()},
                        extra={"best_val_objective": best_obj, "epochs_run": epochs_run})
        run_manifest = {
            "model_kind": model_kind,
            "config": to_dict(cfg),
            "config_hash": config_hash(cfg),
            "model_config_hash": config_hash(mc),
            "dataset_hash": dataset.dataset_hash,
            "dataset_root": dataset.root,
            "seed": cfg.train.seed,
            "code_version": {"version": slap.__version__, "source_hash": source_hash()},
            "epochs_run": epochs_run,
            "best_val_objective": best_obj,
            "wall_time_s": round(time.time() - t0, 3),
            "checkpoint": ckpt_path.name,
            "csv": csv_path.name,
        }
        (out / f"{model_kind}_run.json").write_text(json.dumps(run_manifest, indent=2, sort_keys=True))
    return TrainResult(str(ckpt_path), str(csv_path), best_obj, history, model, epochs_run)


def _accumulate(sums: dict, terms: dict):
    for k, v in terms.items():
        sums[k] = sums.get(k, 0.0) + v


def _validate(model_kind: str, model, val_demos: list, cfg: SlapConfig) -> dict:
    agg = {}
    with torch.no_grad():
        for j, demo in enumerate(val_demos):
            seed_key = (cfg.train.seed, _S_VAL, j)
            if model_kind == "ipm":
                loss, ce, loc, hit = _ipm_sample(model, demo, cfg, seed_key, False)
                scores, points = model.score(demo.cloud, demo.command, demo.initial_proprio(),
                                             _rng(*seed_key, _S_ENCODE))
                best = int(np.argmax(scores.numpy()))
                dist = float(np.linalg.norm(points[best] - demo.interaction_point))
                _accumulate(agg, {"objective": loss.item(), "ce": ce.item(),
                                  "acc": hit, "dist": dist})
            else:
                loss, terms = _apm_sample(model, demo, cfg, seed_key, False)
                _accumulate(agg, {"objective": loss.item(), "pos_err": terms["pos_err"],
                                  "ori_err": terms["ori_err"], "grip_acc": terms["grip_acc"]})
    n = len(val_demos)
    return {k: v / n for k, v in agg.items()}


def _epoch_row(model_kind: str, epoch: int, train_means: dict, val: dict):
    if model_kind == "ipm":
        row = (epoch, train_means["ce"], train_means["lloc"],
               val["ce"], val["acc"], val["dist"])
        metrics = {"epoch": epoch, "train_CE": train_means["ce"],
                   "train_Lloc": train_means["lloc"], "train_accuracy": train_means["acc"],
                   "val_CE": val["ce"], "val_accuracy": val["acc"],
                   "val_mean_dist": val["dist"], "objective": val["objective"]}
    else:
        row = (epoch, train_means["pos"], train_means["ori"], train_means["grip"],
               val["pos_err"], val["ori_err"], val["grip_acc"])
        metrics = {"epoch": epoch, "L_pos": train_means["pos"], "L_ori": train_means["ori"],
                   "L_grip": train_means["grip"], "train_pos_err": train_means["pos_err"],
                   "val_pos_err_m": val["pos_err"], "val_ori_err_rad": val["ori_err"],
                   "val_grip_acc": val["grip_acc"], "objective": val["objective"]}
    return row, metrics


_STOP_RULES = {
    "train_accuracy": lambda v, thr: v >= thr,
    "val_accuracy": lambda v, thr: v >= thr,
    "train_pos_err": lambda v, thr: v <= thr,
    "val_pos_err_m": lambda v, thr: v <= thr,
}


def _early_stop(cfg: SlapConfig, metrics: dict) -> bool:
    name = cfg.train.early_stop_metric
    if not name:
        return False
    if name not in _STOP_RULES or name not in metrics:
        raise ValueError(f"unknown early-stop metric {name!r}")
    return _STOP_RULES[name](metrics[name], cfg.train.early_stop_value)
