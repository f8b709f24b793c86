"""Relative action prediction: SA-cascade crop encoder with per-action
regression heads (position offset, orientation) and a proprioception-only
gripper classifier, plus the combined regression loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from slap.config import ApmConfig
from slap.encoder import SetAbstraction, _grid_centers
from slap.errors import EmptyCrop
from slap.geometry import Action, PointCloud, UnitQuaternion, crop_sphere
from slap.scenegen import Demonstration, ProprioState

ACTION_NAMES = ("approach", "interaction", "departure")


@dataclass
class ActionTriplet:
    """The three relative keyframe actions with their proprio inputs."""

    approach: Action
    interaction: Action
    departure: Action
    proprio: tuple  # 3 ProprioStates (state when deciding each action)

    def __post_init__(self):
        self.proprio = tuple(self.proprio)
        if len(self.proprio) != 3:
            raise ValueError("need exactly 3 proprio states")

    def actions(self) -> tuple:
        return (self.approach, self.interaction, self.departure)


@dataclass
class ApmLossWeights:
    lambda_p: float = 1.0
    lambda_q: float = 1e-2
    lambda_g: float = 1e-4

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_q, self.lambda_g) < 0:
            raise ValueError("loss weights must be >= 0")


def gripper_head_inputs(demo: Demonstration) -> tuple:
    """Proprio state available when deciding each action: the initial state for
    the first, then the post-state of the preceding keyframe."""
    init = demo.initial_proprio()
    chain = [(init.g_act, init.g_w)] + [
        (kf.proprio.g_act, kf.proprio.g_w) for kf in demo.keyframes[:-1]
    ]
    return tuple(ProprioState(g, w, ts) for ts, (g, w) in enumerate(chain))


def relative_targets(demo: Demonstration, center) -> ActionTriplet:
    """Expert actions expressed relative to the given crop center."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    acts = [Action(kf.position - center, kf.orientation, kf.gripper) for kf in demo.keyframes]
    return ActionTriplet(acts[0], acts[1], acts[2], gripper_head_inputs(demo))


def crop_input(demo: Demonstration, center, radius: float = 0.1) -> PointCloud:
    """Fixed-radius crop of the scene around an interaction point candidate."""
    if not np.all(np.isfinite(np.asarray(center, dtype=np.float64))):
        raise ValueError("crop center must be finite")
    crop = crop_sphere(demo.cloud, center, radius)
    if len(crop) == 0:
        raise EmptyCrop(
            f"no points within {radius} m of {np.round(np.asarray(center), 3).tolist()}"
        )
    return crop


class ActionModel(nn.Module):
    """Crop encoder + three per-action heads.

    Position/orientation heads read the pooled spatial feature; the gripper
    head reads proprioception only. ``separate_trunks`` gives each action its
    own encoder (ablation knob); the default shares one trunk.
    """

    def __init__(self, cfg: ApmConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        n_trunks = 3 if cfg.separate_trunks else 1
        self.trunks = nn.ModuleList()
        for _ in range(n_trunks):
            fine = SetAbstraction(3, cfg.fine, dtype)
            coarse = SetAbstraction(fine.out_features, cfg.coarse, dtype)
            self.trunks.append(nn.ModuleDict({"fine": fine, "coarse": coarse}))
        feat = self.trunks[0]["coarse"].out_features
        h = cfg.head_hidden

        def head(out_dim):
            return nn.Sequential(
                nn.Linear(feat, h, dtype=dtype), nn.ReLU(),
                nn.Linear(h, h, dtype=dtype), nn.ReLU(),
                nn.Linear(h, out_dim, dtype=dtype),
            )

        self.pos_heads = nn.ModuleList([head(3) for _ in range(3)])
        self.quat_heads = nn.ModuleList([head(4) for _ in range(3)])
        self.grip_heads = nn.ModuleList([
            nn.Sequential(
                nn.Linear(3, 32, dtype=dtype), nn.ReLU(),
                nn.Linear(32, 1, dtype=dtype),
            )
            for _ in range(3)
        ])

    def _encode(self, trunk, points: np.ndarray, colors: torch.Tensor, rng=None) -> torch.Tensor:
        fine_centers, _ = _grid_centers(points, self.cfg.fine.grid_resolution)
        f_fine = trunk["fine"](points, colors, fine_centers, rng)
        coarse_centers, _ = _grid_centers(fine_centers, self.cfg.coarse.grid_resolution)
        f_coarse = trunk["coarse"](fine_centers, f_fine, coarse_centers, rng)
        return f_coarse.max(dim=0).values

    def forward(self, crop: PointCloud, proprio: tuple, rng=None) -> dict:
        """Crop must be in crop-center-relative coordinates.

        -> dict with delta_p (3, 3), quat (3, 4) unit + w >= 0, grip_logits (3,).
        """
        if len(crop) == 0:
            raise EmptyCrop("action model received an empty crop")
        colors = torch.from_numpy(crop.colors).to(self.dtype)
        feats = []
        for k in range(3):
            trunk = self.trunks[k if self.cfg.separate_trunks else 0]
            if k == 0 or self.cfg.separate_trunks:
                feat = self._encode(trunk, crop.positions, colors, rng)
            feats.append(feat)
        delta_p = torch.stack([self.pos_heads[k](feats[k]) for k in range(3)])
        raw_q = torch.stack([self.quat_heads[k](feats[k]) for k in range(3)])
        quat = raw_q / torch.linalg.norm(raw_q, dim=1, keepdim=True)
        # Hemisphere canonicalization; the sign is constant almost everywhere,
        # so detaching it keeps gradients exact.
        sign = torch.where(quat[:, :1] < 0, -1.0, 1.0).detach().to(quat.dtype)
        quat = quat * sign
        grip_logits = torch.stack([
            self.grip_heads[k](torch.from_numpy(p.as_features()).to(self.dtype)).squeeze(-1)
            for k, p in enumerate(proprio)
        ])
        return {"delta_p": delta_p, "quat": quat, "grip_logits": grip_logits}


def predict_actions(crop: PointCloud, proprio: tuple, model: ActionModel,
                    rng=None) -> ActionTriplet:
    """Run the model on a center-relative crop; logits >= 0 close the gripper."""
    with torch.no_grad():
        out = model(crop, proprio, rng)
    acts = []
    for k in range(3):
        q = UnitQuaternion.from_array(out["quat"][k].numpy().astype(np.float64))
        g = int(out["grip_logits"][k].item() >= 0.0)
        acts.append(Action(out["delta_p"][k].numpy().astype(np.float64), q, g))
    return ActionTriplet(acts[0], acts[1], acts[2], tuple(proprio))


def _orientation_term(q_pred: torch.Tensor, q_target: torch.Tensor, mode: str) -> torch.Tensor:
    dot = torch.dot(q_pred, q_target)
    if mode == "printed":
        return 1.0 - dot
    return 1.0 - dot * dot


def apm_loss_torch(out: dict, target: ActionTriplet, weights: ApmLossWeights,
                   orientation_mode: str = "squared"):
    """-> (total, pos_term, ori_term, grip_term) on model outputs."""
    dtype = out["delta_p"].dtype
    pos = out["delta_p"].new_zeros(())
    ori = out["delta_p"].new_zeros(())
    grip = out["delta_p"].new_zeros(())
    bce = nn.functional.binary_cross_entropy_with_logits
    for k, act in enumerate(target.actions()):
        tgt_p = torch.as_tensor(act.delta_p, dtype=dtype)
        tgt_q = torch.as_tensor(act.q.as_array(), dtype=dtype)
        pos = pos + torch.sum((out["delta_p"][k] - tgt_p) ** 2)
        ori = ori + _orientation_term(out["quat"][k], tgt_q, orientation_mode)
        grip = grip + bce(out["grip_logits"][k], torch.tensor(float(act.g), dtype=dtype))
    total = weights.lambda_p * pos + weights.lambda_q * ori + weights.lambda_g * grip
    return total, pos, ori, grip


def apm_loss(pred: ActionTriplet, target: ActionTriplet,
             weights: ApmLossWeights = ApmLossWeights(), gripper_logits=None,
             orientation_mode: str = "squared") -> float:
    """Loss between two action triplets (sum over the three actions).

    For the gripper term, pass the raw ``gripper_logits`` when available;
    otherwise the predicted binary commands are treated as hard probabilities
    (0 when they match the target and +inf on a mismatch, by the usual
    0*log(0) = 0 convention).
    """
    total = 0.0
    for k, (p, t) in enumerate(zip(pred.actions(), target.actions())):
        total += weights.lambda_p * float(np.sum((p.delta_p - t.delta_p) ** 2))
        dot = float(np.dot(p.q.as_array(), t.q.as_array()))
        total += weights.lambda_q * ((1.0 - dot) if orientation_mode == "printed" else (1.0 - dot * dot))
        if gripper_logits is not None:
            z = float(gripper_logits[k])
            # Numerically-stable binary cross entropy with logits.
            total += weights.lambda_g * (max(z, 0.0) - z * t.g + math.log1p(math.exp(-abs(z))))
        elif p.g != t.g:
            return math.inf
    return total


@dataclass
class AbsolutePose:
    """What a motion planner would consume: go to (position, orientation), set gripper."""

    position: np.ndarray
    orientation: UnitQuaternion
    gripper: int


def assemble_absolute(pred: ActionTriplet, p_interaction) -> list:
    """Absolute keyframe poses: interaction point plus each predicted offset."""
    p_interaction = np.asarray(p_interaction, dtype=np.float64).reshape(3)
    return [AbsolutePose(p_interaction + a.delta_p, a.q, a.g) for a in pred.actions()]
