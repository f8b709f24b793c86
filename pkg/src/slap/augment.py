"""Scene-level data augmentations for interaction-point training, plus the
offset jitter used when training the action regressor.

Training composes the scene augmentations in a fixed order:
rotation -> crop -> dropout -> noise (see AUGMENT_ORDER). Every operation is
deterministic given its seed and never touches the language command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slap.geometry import PointCloud, UnitQuaternion, crop_sphere, rotate_points_z, rotate_z
from slap.scenegen import Demonstration, Keyframe

AUGMENT_ORDER = ("rotation", "crop", "dropout", "noise")


@dataclass
class AugmentConfig:
    enabled: bool = True
    rotation_max_deg: float = 45.0
    crop_p: float = 0.75
    crop_radius_range: tuple = (1.0, 2.0)
    crop_center_std: float = 0.1
    dropout_mean: float = 10.0
    dropout_axis_range: tuple = (0.005, 0.03)
    dropout_min_points: int = 256
    noise_std_range: tuple = (0.0005, 0.003)
    # Action-regressor augmentation: crop-center noise and offset jitter.
    apm_center_std: float = 0.01
    apm_jitter: float = 0.025


def elliptical_dropout(cloud: PointCloud, seed, cfg: AugmentConfig = AugmentConfig()) -> PointCloud:
    """Remove Poisson-many random elliptical patches (occlusion speckle).

    Each ellipse lives on a random view plane; center uniform over the
    cloud's projected bounds, semi-axes uniform over ``dropout_axis_range``.
    An ellipse that would leave fewer than ``dropout_min_points`` points is
    skipped, so the cloud is never wiped out.
    """
    rng = np.random.default_rng(seed)
    k = int(rng.poisson(cfg.dropout_mean))
    if k == 0 or len(cloud) == 0:
        return cloud.select(np.arange(len(cloud)))
    keep = np.ones(len(cloud), dtype=bool)
    for _ in range(k):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        u = np.cross(d, [0.0, 0.0, 1.0] if abs(d[2]) < 0.9 else [1.0, 0.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(d, u)
        pu = cloud.positions @ u
        pv = cloud.positions @ v
        cu = rng.uniform(pu.min(), pu.max())
        cv = rng.uniform(pv.min(), pv.max())
        a, b = rng.uniform(*cfg.dropout_axis_range, size=2)
        phi = rng.uniform(0, 2 * np.pi)
        x = (pu - cu) * np.cos(phi) + (pv - cv) * np.sin(phi)
        y = -(pu - cu) * np.sin(phi) + (pv - cv) * np.cos(phi)
        inside = (x / a) ** 2 + (y / b) ** 2 <= 1.0
        candidate = keep & ~inside
        if candidate.sum() >= cfg.dropout_min_points:
            keep = candidate
    return cloud.select(keep)


def additive_noise(cloud: PointCloud, seed, cfg: AugmentConfig = AugmentConfig()) -> PointCloud:
    """Per-episode Gaussian position noise; std drawn uniformly per call."""
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(*cfg.noise_std_range)
    if sigma == 0.0 or len(cloud) == 0:
        return cloud.select(np.arange(len(cloud)))
    pos = cloud.positions + rng.normal(0.0, sigma, size=cloud.positions.shape)
    view = None if cloud.source_view is None else cloud.source_view.copy()
    return PointCloud(pos, cloud.colors.copy(), view)


def _rotate_demo(demo: Demonstration, angle: float, pivot) -> Demonstration:
    cloud = rotate_z(demo.cloud, angle, pivot)
    rot = UnitQuaternion.from_z_rotation(angle)
    keyframes = [
        Keyframe(rotate_points_z(kf.position, angle, pivot), rot.compose(kf.orientation),
                 kf.gripper, kf.proprio)
        for kf in demo.keyframes
    ]
    p_int = rotate_points_z(demo.interaction_point, angle, pivot)
    meta = dict(demo.meta)
    for key in ("target_part",):
        if key in meta:
            obb = dict(meta[key])
            obb["center"] = rotate_points_z(np.asarray(obb["center"]), angle, pivot).tolist()
            obb["yaw"] = float(obb["yaw"] + angle)
            meta[key] = obb
    if "target" in meta:
        tgt = dict(meta["target"])
        bbox = dict(tgt["bbox"])
        bbox["center"] = rotate_points_z(np.asarray(bbox["center"]), angle, pivot).tolist()
        bbox["yaw"] = float(bbox["yaw"] + angle)
        tgt["bbox"] = bbox
        tgt["yaw"] = float(tgt["yaw"] + angle)
        meta["target"] = tgt
    return Demonstration(cloud, demo.command, keyframes, demo.interaction_index, p_int, meta)


def rotational_randomization(demo: Demonstration, seed,
                             cfg: AugmentConfig = AugmentConfig()) -> Demonstration:
    """Rotate the whole episode about the vertical axis through the workspace center."""
    rng = np.random.default_rng(seed)
    limit = np.deg2rad(cfg.rotation_max_deg)
    angle = rng.uniform(-limit, limit)
    pivot = np.asarray(demo.meta.get("workspace_center", (0.0, 0.0, 0.0)))
    return _rotate_demo(demo, angle, pivot)


def random_crop(demo: Demonstration, seed, p: float = None,
                cfg: AugmentConfig = AugmentConfig()) -> Demonstration:
    """With probability p, crop the cloud to a random sphere near the label.

    The crop must keep the labeled interaction point's neighborhood; it is
    re-drawn up to 10 times and skipped if that cannot be satisfied.
    """
    if p is None:
        p = cfg.crop_p
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"crop probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    if rng.random() >= p:
        return demo
    for _ in range(10):
        center = demo.interaction_point + rng.normal(0.0, cfg.crop_center_std, size=3)
        radius = rng.uniform(*cfg.crop_radius_range)
        cropped = crop_sphere(demo.cloud, center, radius)
        if len(cropped) == 0:
            continue
        d2 = np.sum((cropped.positions - demo.interaction_point) ** 2, axis=1)
        if d2.min() <= 0.005 ** 2 * 3:  # voxel-diagonal guard around the label
            return Demonstration(cropped, demo.command, demo.keyframes,
                                 demo.interaction_index, demo.interaction_point,
                                 dict(demo.meta))
    return demo


def apm_offset_jitter(crop: PointCloud, target, seed,
                      cfg: AugmentConfig = AugmentConfig()):
    """Shift the crop frame by a uniform offset, compensating the targets.

    ``crop`` is expressed in crop-center-relative coordinates and ``target``
    is an ActionTriplet whose delta_p values are relative to the same
    center. Moving the center by ``dr`` shifts both by ``-dr``, so absolute
    keyframe positions are preserved exactly.
    """
    from slap.apm import ActionTriplet  # local import to avoid a cycle
    from slap.geometry import Action

    rng = np.random.default_rng(seed)
    dr = rng.uniform(-cfg.apm_jitter, cfg.apm_jitter, size=3)
    shifted = crop.translated(-dr)
    actions = [Action(a.delta_p - dr, a.q, a.g) for a in target.actions()]
    return shifted, ActionTriplet(actions[0], actions[1], actions[2], target.proprio)


def augment_scene(demo: Demonstration, seed, cfg: AugmentConfig = AugmentConfig()) -> Demonstration:
    """Full scene augmentation in the pinned order: rotation, crop, dropout, noise."""
    if not cfg.enabled:
        return demo
    seeds = np.random.SeedSequence(seed).spawn(len(AUGMENT_ORDER))
    demo = rotational_randomization(demo, seeds[0], cfg)
    demo = random_crop(demo, seeds[1], cfg=cfg)
    cloud = elliptical_dropout(demo.cloud, seeds[2], cfg)
    cloud = additive_noise(cloud, seeds[3], cfg)
    return Demonstration(cloud, demo.command, demo.keyframes,
                         demo.interaction_index, demo.interaction_point, dict(demo.meta))
