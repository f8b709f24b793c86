"""Finite-difference gradient verification for every learnable operation.

Each registry entry builds a small float64 instance (module + scalar loss
closure) from a seed. The check compares autograd parameter gradients
against central differences on a random subset of coordinates per tensor
and fails loudly with the worst offender's parameter path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from slap.apm import ActionModel, ApmLossWeights, apm_loss_torch, relative_targets
from slap.config import ApmConfig, BackboneConfig, EncoderConfig, SetAbstractionConfig
from slap.dataio import Vocabulary
from slap.encoder import SetAbstraction
from slap.errors import ToleranceExceeded
from slap.geometry import Action, PointCloud, UnitQuaternion
from slap.ipm import InteractionModel, ipm_loss, locality_loss
from slap.scenegen import ProprioState


@dataclass
class GradCheckReport:
    name: str
    n_checked: int
    worst_rel: float
    worst_param: str
    passed: bool
    failures: list = field(default_factory=list)


def _rand_cloud(rng, n, scale=0.1):
    return PointCloud(rng.uniform(-scale, scale, (n, 3)), rng.uniform(0, 1, (n, 3)))


def _small_vocab():
    return Vocabulary(["drawer", "open", "the", "top"])


def _small_encoder_cfg():
    return EncoderConfig(
        feature_dim=16,
        fine=SetAbstractionConfig(0.02, 0.06, max_neighbors=6, mlp_widths=(8, 12)),
        coarse=SetAbstractionConfig(0.08, 0.2, max_neighbors=6, mlp_widths=(8, 12)),
        pe_bands=3, proprio_hidden=8,
    )


def _build_linear(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    layer = nn.Linear(5, 3, dtype=torch.float64)
    x = torch.from_numpy(rng.normal(size=(7, 5)))
    return layer, lambda: (layer(x) ** 2).sum()


def _build_sa_layer(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    sa = SetAbstraction(3, SetAbstractionConfig(0.05, 0.08, max_neighbors=8, mlp_widths=(8, 12)),
                        dtype=torch.float64)
    cloud = _rand_cloud(rng, 20)
    centers = cloud.positions[:5].copy()
    feats = torch.from_numpy(cloud.colors)
    return sa, lambda: (sa(cloud.positions, feats, centers) ** 2).sum()


def _build_backbone(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    from slap.backbone import PerceiverBackbone
    bb = PerceiverBackbone(12, BackboneConfig(latent_count=6, latent_dim=12,
                                              self_attention_blocks=2, heads=2),
                           dtype=torch.float64)
    seq = torch.from_numpy(rng.normal(size=(9, 12)))

    def loss():
        out, pooled = bb(seq)
        return (out ** 2).sum() + (pooled ** 2).sum()

    return bb, loss


def _build_score_head(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    from slap.backbone import ScoreHead
    head = ScoreHead(10, dtype=torch.float64)
    x = torch.from_numpy(rng.normal(size=(8, 10)))
    segments = np.array([0, 0, 0, 0, 0, 1, 1, 2])
    return head, lambda: (head(x, segments) ** 2).sum()


def _ipm_instance(seed):
    """Full interaction model + loss on a ~30-token scene."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model = InteractionModel(_small_encoder_cfg(),
                             BackboneConfig(latent_count=4, latent_dim=16,
                                            self_attention_blocks=1, heads=2),
                             _small_vocab(), dtype=torch.float64)
    cloud = _rand_cloud(rng, 30)
    target = cloud.positions[rng.integers(len(cloud))].copy()
    proprio = ProprioState(0, 0.08, 0)

    def loss():
        scores, points = model.score(cloud, "open the top drawer", proprio, None)
        return ipm_loss(scores, points, target, w=1.0, resolution=0.02)

    return model, loss


def _build_ipm_losses(seed):
    """d(ipm_loss)/d(scores) as leaf gradients, via a passthrough module."""
    rng = np.random.default_rng(seed)
    scores = nn.Parameter(torch.from_numpy(rng.normal(size=12)))
    holder = nn.Module()
    holder.scores = scores
    points = rng.uniform(-0.1, 0.1, (12, 3))
    target = points[3].copy()

    def loss():
        return (ipm_loss(scores, points, target, w=0.7, resolution=0.2)
                + locality_loss(scores * 0.5, points, target))

    return holder, loss


def _apm_instance(seed, separate=False):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cfg = ApmConfig(
        fine=SetAbstractionConfig(0.02, 0.05, max_neighbors=6, mlp_widths=(8, 12)),
        coarse=SetAbstractionConfig(0.06, 0.12, max_neighbors=6, mlp_widths=(8, 12)),
        head_hidden=8, separate_trunks=separate,
    )
    model = ActionModel(cfg, dtype=torch.float64)
    crop = _rand_cloud(rng, 20, scale=0.05)
    proprio = tuple(ProprioState(0, 0.08, k) for k in range(3))
    acts = []
    for _ in range(3):
        q = UnitQuaternion.from_array(rng.normal(size=4))
        acts.append(Action(rng.uniform(-0.05, 0.05, 3), q, int(rng.integers(2))))
    from slap.apm import ActionTriplet
    target = ActionTriplet(acts[0], acts[1], acts[2], proprio)

    def loss():
        out = model(crop, proprio, None)
        total, _, _, _ = apm_loss_torch(out, target, ApmLossWeights(1.0, 0.5, 0.25))
        return total

    return model, loss


REGISTRY = {
    "linear": _build_linear,
    "sa_layer": _build_sa_layer,
    "backbone": _build_backbone,
    "score_head": _build_score_head,
    "ipm_losses": _build_ipm_losses,
    "ipm_full": _ipm_instance,
    "apm_heads": _apm_instance,
}


def grad_check(name: str, tolerance: float = 1e-3, seed: int = 0, step: float = 1e-4,
               coords_per_tensor: int = 6, corrupt: str = None,
               raise_on_failure: bool = True) -> GradCheckReport:
    """Compare autograd parameter gradients with central finite differences.

    ``corrupt`` names a parameter whose analytic gradient is perturbed before
    comparison; the harness must then fail (sensitivity hook for tests).
    """
    if name not in REGISTRY:
        raise KeyError(f"{name!r} is not in the gradient-check registry {sorted(REGISTRY)}")
    module, loss_fn = REGISTRY[name](seed)

    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    analytic = {pname: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for pname, p in module.named_parameters()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"no parameter named {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] + 1.0

    rng = np.random.default_rng(seed + 1)
    worst_rel, worst_param = 0.0, ""
    failures = []
    n_checked = 0
    with torch.no_grad():
        params = dict(module.named_parameters())
        for pname, p in params.items():
            flat = p.reshape(-1)
            n = flat.shape[0]
            picks = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
            for j in picks:
                orig = flat[j].item()
                flat[j] = orig + step
                f_plus = float(loss_fn())
                flat[j] = orig - step
                f_minus = float(loss_fn())
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * step)
                a = float(analytic[pname].reshape(-1)[j])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                n_checked += 1
                if rel > worst_rel:
                    worst_rel, worst_param = rel, f"{pname}[{int(j)}]"
                if rel > tolerance:
                    failures.append((f"{pname}[{int(j)}]", a, numeric, rel))

    report = GradCheckReport(name, n_checked, worst_rel, worst_param, not failures, failures)
    if failures and raise_on_failure:
        pname, a, numeric, rel = max(failures, key=lambda f: f[3])
        raise ToleranceExceeded(
            f"{name}: analytic {a:.6e} vs central-difference {numeric:.6e} "
            f"(relative {rel:.2e} > {tolerance:.1e}) at {pname}"
        )
    return report
