"""Interaction prediction: per-token scores over the downsampled scene,
locality-regularized classification loss, argmax extraction, attention export.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from slap.backbone import PerceiverBackbone, ScoreHead, argmax_lowest_index, top_fraction_indices
from slap.config import BackboneConfig, EncoderConfig
from slap.dataio import Vocabulary
from slap.encoder import SceneEncoder
from slap.errors import TargetNotInP
from slap.geometry import PointCloud, write_ply
from slap.scenegen import Demonstration, ProprioState

TOP_FRACTION = 0.05
TOKEN_RESOLUTION = 0.005


@dataclass
class InteractionPrediction:
    scores: np.ndarray  # (|P|,) raw logits
    points: np.ndarray  # (|P|, 3) token coordinates
    point: np.ndarray  # argmax location
    top_mask: np.ndarray  # indices of the top 5% scoring tokens

    @property
    def argmax_index(self) -> int:
        return argmax_lowest_index(self.scores)


class InteractionModel(nn.Module):
    """Encoder + fixed-latent backbone + scalar score head."""

    def __init__(self, enc_cfg: EncoderConfig, bb_cfg: BackboneConfig,
                 vocab: Vocabulary, dtype=torch.float32):
        super().__init__()
        self.encoder = SceneEncoder(enc_cfg, vocab, dtype)
        self.backbone = PerceiverBackbone(enc_cfg.feature_dim, bb_cfg, dtype)
        self.score_head = ScoreHead(enc_cfg.feature_dim, dtype)

    def score(self, cloud: PointCloud, command: str, proprio: ProprioState, rng=None):
        """-> (scores (|P|,) tensor, token points (|P|, 3) array)."""
        tokens = self.encoder.encode(cloud, command, proprio, rng)
        seq, segments = self.encoder.positional_encode(tokens)
        per_token, _ = self.backbone(seq)
        return self.score_head(per_token, segments), tokens.points


def predict_interaction(demo: Demonstration, model, rng=None) -> InteractionPrediction:
    """Run any scorer with a ``score(cloud, command, proprio, rng)`` method."""
    with torch.no_grad():
        scores_t, points = model.score(demo.cloud, demo.command, demo.initial_proprio(), rng)
    scores = scores_t.detach().cpu().numpy().astype(np.float64)
    best = argmax_lowest_index(scores)
    return InteractionPrediction(scores, points, points[best].copy(),
                                 top_fraction_indices(scores, TOP_FRACTION))


def snap_index(points: np.ndarray, target, resolution: float = TOKEN_RESOLUTION) -> int:
    """Nearest token index for a labeled point; errors beyond one voxel diagonal."""
    points = np.asarray(points, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    d2 = np.sum((points - target) ** 2, axis=1)
    idx = int(np.argmin(d2))
    limit = 3.0 * resolution * resolution  # (sqrt(3) * resolution)^2
    if d2[idx] > limit:
        raise TargetNotInP(
            f"label {np.round(target, 4).tolist()} is {np.sqrt(d2[idx]):.4f} m from the nearest "
            f"token (limit {np.sqrt(limit):.4f} m); dataset and tokens disagree"
        )
    return idx


def locality_loss(scores: torch.Tensor, points, target) -> torch.Tensor:
    """Softmax-attention-weighted mean of squared distances to the label.

    Zero exactly when all attention mass sits on the labeled point; invariant
    to adding a constant to every score.
    """
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64), dtype=scores.dtype)
    tgt = torch.as_tensor(np.asarray(target, dtype=np.float64).reshape(3), dtype=scores.dtype)
    d2 = torch.sum((pts - tgt) ** 2, dim=1)
    return torch.dot(torch.softmax(scores, dim=0), d2)


def ipm_loss_terms(scores: torch.Tensor, points, target_point, w: float,
                   resolution: float = TOKEN_RESOLUTION):
    """-> (total, cross_entropy, locality). Target snaps to its token first."""
    if w < 0:
        raise ValueError(f"locality weight must be >= 0, got {w}")
    n = scores.shape[0]
    target_idx = snap_index(points, target_point, resolution)
    ce = -torch.log_softmax(scores, dim=0)[target_idx]
    loc = locality_loss(scores, points, target_point)
    return ce + (w / n) * loc, ce, loc


def ipm_loss(scores: torch.Tensor, points, target_point, w: float,
             resolution: float = TOKEN_RESOLUTION) -> torch.Tensor:
    """Cross-entropy against the labeled token plus scaled locality loss."""
    total, _, _ = ipm_loss_terms(scores, points, target_point, w, resolution)
    return total


RED = np.array([1.0, 0.0, 0.0])
YELLOW = np.array([1.0, 1.0, 0.0])


def export_attention(pred: InteractionPrediction, cloud: PointCloud, path) -> None:
    """PLY snapshot: scene in its own colors, top-5% tokens red, argmax as a
    small yellow sphere."""
    from slap.scenegen import sample_sphere

    mask_pts = pred.points[pred.top_mask]
    sphere, _ = sample_sphere(pred.point, 0.006, 0.002)
    positions = np.concatenate([cloud.positions, mask_pts, sphere])
    colors = np.concatenate([
        cloud.colors,
        np.tile(RED, (mask_pts.shape[0], 1)),
        np.tile(YELLOW, (sphere.shape[0], 1)),
    ])
    try:
        write_ply(PointCloud(positions, colors), path)
    except OSError as exc:
        raise OSError(f"failed to write attention export {path}: {exc}") from exc
