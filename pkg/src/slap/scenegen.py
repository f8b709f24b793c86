"""Procedural tabletop scenes with expert keyframe demonstrations.

Each task template builds a parametric object from primitive solids, places
it (plus distractors from other templates) on a table, renders three partial
views by surface-normal culling, and emits three expert keyframes
(approach / interaction / departure). The interaction point is recovered
from the keyframes by the gripper-change heuristic, and the contact point is
guaranteed to be a sampled surface point so it always snaps into the token
grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from slap.errors import PlacementError
from slap.geometry import PointCloud, UnitQuaternion, dedup_voxelize, rotate_points_z

GRIPPER_OPEN_W = 0.08
GRIPPER_CHANGE_THRESHOLD = 0.005

# Fixed palette; pure red/yellow are reserved for attention visualization.
PALETTE = {
    "table": (0.52, 0.52, 0.52),
    "wood": (0.55, 0.36, 0.20),
    "dark": (0.15, 0.15, 0.18),
    "white": (0.88, 0.88, 0.85),
    "ball": (0.85, 0.78, 0.15),
    "block": (0.20, 0.65, 0.30),
    "bowl": (0.75, 0.25, 0.25),
    "bottle": (0.20, 0.40, 0.80),
    "drawer": (0.65, 0.48, 0.28),
}


@dataclass
class ProprioState:
    """Gripper state: closed flag, finger separation (m), task time-step."""

    g_act: int
    g_w: float
    ts: int

    def __post_init__(self):
        if self.g_act not in (0, 1):
            raise ValueError(f"g_act must be 0 or 1, got {self.g_act}")
        if not 0.0 <= self.g_w <= GRIPPER_OPEN_W:
            raise ValueError(f"g_w must be in [0, {GRIPPER_OPEN_W}], got {self.g_w}")
        if self.ts not in (0, 1, 2):
            raise ValueError(f"ts must be in {{0,1,2}}, got {self.ts}")

    def as_features(self) -> np.ndarray:
        """Normalized numeric features: (g_act, g_w / open width, ts / 2)."""
        return np.array([self.g_act, self.g_w / GRIPPER_OPEN_W, self.ts / 2.0])


@dataclass
class Keyframe:
    """Expert end-effector pose; proprio records the state after executing it."""

    position: np.ndarray
    orientation: UnitQuaternion
    gripper: int
    proprio: ProprioState

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


@dataclass
class Demonstration:
    """One task episode: aggregated cloud, command, keyframes, derived label."""

    cloud: PointCloud
    command: str
    keyframes: list
    interaction_index: int
    interaction_point: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.interaction_point = np.asarray(self.interaction_point, dtype=np.float64).reshape(3)

    def initial_proprio(self) -> ProprioState:
        g_act, g_w = self.meta["initial_proprio"]
        return ProprioState(int(g_act), float(g_w), 0)


@dataclass(frozen=True)
class WorkspaceBounds:
    lo: tuple = (0.25, -0.25, 0.0)
    hi: tuple = (0.75, 0.25, 0.35)

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty workspace bounds: {self.lo} .. {self.hi}")

    @property
    def center(self) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        c = (lo + hi) / 2.0
        return np.array([c[0], c[1], 0.0])


# ---------------------------------------------------------------------------
# Surface sampling primitives: each returns (positions, normals) in a local frame.


def _rect_grid(center, u_vec, v_vec, half_u, half_v, normal, spacing):
    nu = max(2, int(np.ceil(2 * half_u / spacing)) + 1)
    nv = max(2, int(np.ceil(2 * half_v / spacing)) + 1)
    us = np.linspace(-half_u, half_u, nu)
    vs = np.linspace(-half_v, half_v, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    pts = (np.asarray(center)[None, :]
           + uu.reshape(-1, 1) * np.asarray(u_vec)[None, :]
           + vv.reshape(-1, 1) * np.asarray(v_vec)[None, :])
    nrm = np.tile(np.asarray(normal, dtype=np.float64), (pts.shape[0], 1))
    return pts, nrm


def sample_box(center, half, spacing, faces="all"):
    """Surface points of an axis-aligned box; ``faces`` may skip the top ('open')."""
    cx, cy, cz = center
    hx, hy, hz = half
    ex, ey, ez = np.eye(3)
    specs = {
        "+x": ((cx + hx, cy, cz), ey, ez, hy, hz, ex),
        "-x": ((cx - hx, cy, cz), ey, ez, hy, hz, -ex),
        "+y": ((cx, cy + hy, cz), ex, ez, hx, hz, ey),
        "-y": ((cx, cy - hy, cz), ex, ez, hx, hz, -ey),
        "+z": ((cx, cy, cz + hz), ex, ey, hx, hy, ez),
        "-z": ((cx, cy, cz - hz), ex, ey, hx, hy, -ez),
    }
    if faces == "open":
        specs.pop("+z")
    pts, nrm = [], []
    for c, u, v, hu, hv, n in specs.values():
        p, m = _rect_grid(c, u, v, hu, hv, n, spacing)
        pts.append(p)
        nrm.append(m)
    return np.concatenate(pts), np.concatenate(nrm)


def sample_open_box(center, outer_half, wall, spacing):
    """Open-top container: outer shell, inner walls, and inner floor."""
    cx, cy, cz = center
    hx, hy, hz = outer_half
    pts, nrm = [], []
    p, m = sample_box(center, outer_half, spacing, faces="open")
    pts.append(p), nrm.append(m)
    ix, iy = hx - wall, hy - wall
    floor_z = cz - hz + wall
    ex, ey, ez = np.eye(3)
    inner = [
        ((cx + ix, cy, cz + wall / 2), ey, ez, iy, hz - wall / 2, -ex),
        ((cx - ix, cy, cz + wall / 2), ey, ez, iy, hz - wall / 2, ex),
        ((cx, cy + iy, cz + wall / 2), ex, ez, ix, hz - wall / 2, -ey),
        ((cx, cy - iy, cz + wall / 2), ex, ez, ix, hz - wall / 2, ey),
        ((cx, cy, floor_z), ex, ey, ix, iy, ez),
    ]
    for c, u, v, hu, hv, n in inner:
        p, m = _rect_grid(c, u, v, hu, hv, n, spacing)
        pts.append(p), nrm.append(m)
    return np.concatenate(pts), np.concatenate(nrm)


def sample_cylinder(base_center, radius, height, spacing, axis_caps=True):
    """Upright cylinder surface: lateral shell plus optional top cap."""
    cx, cy, cz = base_center
    n_a = max(8, int(np.ceil(2 * np.pi * radius / spacing)))
    n_h = max(2, int(np.ceil(height / spacing)) + 1)
    ang = np.linspace(0, 2 * np.pi, n_a, endpoint=False)
    zs = np.linspace(0, height, n_h)
    aa, zz = np.meshgrid(ang, zs, indexing="ij")
    ca, sa = np.cos(aa.ravel()), np.sin(aa.ravel())
    lateral = np.stack([cx + radius * ca, cy + radius * sa, cz + zz.ravel()], axis=1)
    lat_n = np.stack([ca, sa, np.zeros_like(ca)], axis=1)
    pts, nrm = [lateral], [lat_n]
    if axis_caps:
        p, m = sample_disc((cx, cy, cz + height), radius, spacing, up=True)
        pts.append(p), nrm.append(m)
    return np.concatenate(pts), np.concatenate(nrm)


def sample_disc(center, radius, spacing, up=True):
    cx, cy, cz = center
    n_r = max(1, int(np.ceil(radius / spacing)))
    pts = [np.array([[cx, cy, cz]])]
    for r in np.linspace(radius / n_r, radius, n_r):
        n_a = max(6, int(np.ceil(2 * np.pi * r / spacing)))
        ang = np.linspace(0, 2 * np.pi, n_a, endpoint=False)
        ring = np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang), np.full(n_a, cz)], axis=1)
        pts.append(ring)
    pts = np.concatenate(pts)
    n = np.tile([[0.0, 0.0, 1.0 if up else -1.0]], (pts.shape[0], 1))
    return pts, n


def sample_sphere(center, radius, spacing):
    """Fibonacci-lattice sphere surface."""
    n = max(16, int(np.ceil(4 * np.pi * radius * radius / (spacing * spacing))))
    i = np.arange(n, dtype=np.float64)
    phi = np.arccos(1 - 2 * (i + 0.5) / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    nrm = np.stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1)
    return np.asarray(center) + radius * nrm, nrm


# ---------------------------------------------------------------------------
# Object models and task templates


@dataclass
class ObjectModel:
    """Sampled object surface in its local frame (origin on the table)."""

    kind: str
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    bound_radius: float
    parts: dict = field(default_factory=dict)  # name -> (center, half_extents)
    anchor: Optional[np.ndarray] = None  # interaction contact point


def _colored(parts):
    """parts: list of (points, normals, rgb) -> stacked arrays."""
    pts = np.concatenate([p for p, _, _ in parts])
    nrm = np.concatenate([n for _, n, _ in parts])
    col = np.concatenate([np.tile(np.asarray(c, np.float64), (p.shape[0], 1)) for p, _, c in parts])
    return pts, nrm, col


def _aabb(points, margin=0.0):
    lo, hi = points.min(axis=0), points.max(axis=0)
    return (lo + hi) / 2.0, (hi - lo) / 2.0 + margin


_CABINET_BODY = dict(center=(0.0, 0.0, 0.06), half=(0.045, 0.055, 0.06))
_TOP_HANDLE = dict(center=(0.057, 0.0, 0.085), half=(0.012, 0.018, 0.006))
_BOTTOM_ROD = dict(base=(0.057, 0.0, 0.015), radius=0.007, height=0.04)


def _build_cabinet(spacing, variant):
    parts = []
    body_p, body_n = sample_box(**_CABINET_BODY, spacing=spacing)
    parts.append((body_p, body_n, PALETTE["wood"]))
    hp, hn = sample_box(**_TOP_HANDLE, spacing=spacing * 0.8)
    parts.append((hp, hn, PALETTE["dark"]))
    # Bottom handle: horizontal rod along y, protruding from the front face.
    rod_base = np.array(_BOTTOM_ROD["base"])
    rp, rn = sample_cylinder((0, 0, 0), _BOTTOM_ROD["radius"], _BOTTOM_ROD["height"], spacing * 0.8)
    rot = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])  # axis z -> y
    # Rotated points span y in [-height, 0]; shift so the rod is centered.
    rp = rp @ rot.T + np.array([rod_base[0], _BOTTOM_ROD["height"] / 2, 0.035])
    rn = rn @ rot.T
    parts.append((rp, rn, PALETTE["dark"]))
    model_parts = {
        "top_handle": _aabb(hp, margin=0.010),
        "bottom_handle": _aabb(rp, margin=0.010),
    }
    if variant == "protruding":
        dp, dn = sample_box((0.075, 0.0, 0.085), (0.030, 0.040, 0.018), spacing)
        parts.append((dp, dn, PALETTE["drawer"]))
        front = dp[np.isclose(dp[:, 0], 0.105)]
        model_parts["drawer_front"] = _aabb(front, margin=0.012)
    if variant == "open_drawer":
        dp, dn = sample_open_box((0.085, 0.0, 0.075), (0.040, 0.045, 0.020), 0.008, spacing)
        parts.append((dp, dn, PALETTE["drawer"]))
        model_parts["cavity"] = ((0.085, 0.0, 0.075), (0.030, 0.035, 0.014))
    pts, nrm, col = _colored(parts)
    return pts, nrm, col, model_parts


def _xy_radius(points):
    return float(np.hypot(points[:, 0], points[:, 1]).max()) + 0.005


def _obj_cabinet_closed(spacing):
    pts, nrm, col, parts = _build_cabinet(spacing, "closed")
    return ObjectModel("cabinet_closed", pts, nrm, col, _xy_radius(pts), parts)


def _obj_cabinet_protruding(spacing):
    pts, nrm, col, parts = _build_cabinet(spacing, "protruding")
    return ObjectModel("cabinet_protruding", pts, nrm, col, _xy_radius(pts), parts)


def _obj_cabinet_open_drawer(spacing):
    pts, nrm, col, parts = _build_cabinet(spacing, "open_drawer")
    return ObjectModel("cabinet_open_drawer", pts, nrm, col, _xy_radius(pts), parts)


def _obj_basket_with_ball(spacing):
    bp, bn = sample_open_box((0, 0, 0.030), (0.050, 0.050, 0.030), 0.008, spacing)
    ball_c = np.array([0.012, -0.008, 0.028])
    sp, sn = sample_sphere(ball_c, 0.02, spacing)
    pts, nrm, col = _colored([(bp, bn, PALETTE["white"]), (sp, sn, PALETTE["ball"])])
    parts = {"ball": (tuple(ball_c), (0.028, 0.028, 0.028))}
    return ObjectModel("basket_with_ball", pts, nrm, col, _xy_radius(pts), parts)


def _obj_bin_with_block(spacing):
    bp, bn = sample_open_box((0, 0, 0.030), (0.050, 0.050, 0.030), 0.008, spacing)
    blk_c = np.array([-0.010, 0.012, 0.024])
    kp, kn = sample_box(blk_c, (0.016, 0.016, 0.016), spacing)
    pts, nrm, col = _colored([(bp, bn, PALETTE["dark"]), (kp, kn, PALETTE["block"])])
    parts = {"block": (tuple(blk_c), (0.024, 0.024, 0.024))}
    return ObjectModel("bin_with_block", pts, nrm, col, _xy_radius(pts), parts)


def _obj_bowl(spacing):
    outer_p, outer_n = sample_cylinder((0, 0, 0), 0.050, 0.032, spacing, axis_caps=False)
    inner_p, inner_n = sample_cylinder((0, 0, 0.006), 0.044, 0.026, spacing, axis_caps=False)
    inner_n = -inner_n
    rim_p, rim_n = sample_disc((0, 0, 0.032), 0.050, spacing)
    floor_p, floor_n = sample_disc((0, 0, 0.006), 0.044, spacing)
    pts, nrm, col = _colored([
        (outer_p, outer_n, PALETTE["bowl"]),
        (inner_p, inner_n, PALETTE["bowl"]),
        (rim_p, rim_n, PALETTE["bowl"]),
        (floor_p, floor_n, PALETTE["bowl"]),
    ])
    parts = {"interior": ((0.0, 0.0, 0.019), (0.044, 0.044, 0.016))}
    return ObjectModel("bowl", pts, nrm, col, _xy_radius(pts), parts)


def _obj_bottle(spacing):
    body_p, body_n = sample_cylinder((0, 0, 0), 0.019, 0.115, spacing)
    neck_p, neck_n = sample_cylinder((0, 0, 0.115), 0.010, 0.030, spacing)
    pts, nrm, col = _colored([(body_p, body_n, PALETTE["bottle"]), (neck_p, neck_n, PALETTE["bottle"])])
    parts = {"body": ((0.0, 0.0, 0.0725), (0.023, 0.023, 0.0765))}
    return ObjectModel("bottle", pts, nrm, col, _xy_radius(pts), parts)


_Q_DOWN = UnitQuaternion.from_axis_angle((1.0, 0.0, 0.0), np.pi)
_Q_SIDE = UnitQuaternion.from_axis_angle((0.0, 1.0, 0.0), -np.pi / 2)


def _grasp_program(anchor, approach_offset, depart_offset, q, grasp_width):
    """approach (open) -> grasp (close) -> depart (closed)."""
    return [
        (anchor + approach_offset, q, 0, (0, GRIPPER_OPEN_W)),
        (anchor, q, 1, (1, grasp_width)),
        (anchor + depart_offset, q, 1, (1, grasp_width)),
    ], (0, GRIPPER_OPEN_W)


def _place_program(anchor, hover, held_width):
    """approach holding -> release at contact -> retreat (open)."""
    return [
        (anchor + np.array([0, 0, hover]), _Q_DOWN, 1, (1, held_width)),
        (anchor, _Q_DOWN, 0, (0, GRIPPER_OPEN_W)),
        (anchor + np.array([0, 0, hover + 0.02]), _Q_DOWN, 0, (0, GRIPPER_OPEN_W)),
    ], (1, held_width)


def _push_program(anchor, approach_offset, push_offset, q):
    """closed-gripper push: no width change anywhere."""
    return [
        (anchor + approach_offset, q, 1, (1, 0.0)),
        (anchor, q, 1, (1, 0.0)),
        (anchor + push_offset, q, 1, (1, 0.0)),
    ], (1, 0.0)


@dataclass(frozen=True)
class TaskTemplate:
    task_id: int
    name: str
    language_variants: tuple
    object_kind: str
    builder: Callable
    anchor_local: tuple
    part_name: str
    program: Callable  # anchor -> (keyframes local, initial proprio)


def _templates() -> list:
    t = []
    t.append(TaskTemplate(
        0, "open_top_drawer",
        ("open the top drawer", "pull the top drawer out", "open the upper drawer of the cabinet"),
        "cabinet_closed", _obj_cabinet_closed,
        (0.069, 0.0, 0.085), "top_handle",
        lambda a: _grasp_program(a, np.array([0.055, 0, 0]), np.array([0.085, 0, 0]), _Q_SIDE, 0.012),
    ))
    t.append(TaskTemplate(
        1, "open_bottom_drawer",
        ("open the bottom drawer", "pull the lowest drawer out", "open the lower drawer of the cabinet"),
        "cabinet_closed", _obj_cabinet_closed,
        (0.064, 0.0, 0.035), "bottom_handle",
        lambda a: _grasp_program(a, np.array([0.055, 0, 0]), np.array([0.085, 0, 0]), _Q_SIDE, 0.014),
    ))
    t.append(TaskTemplate(
        2, "close_drawer",
        ("close the drawer", "push the drawer shut", "push the open drawer back in"),
        "cabinet_protruding", _obj_cabinet_protruding,
        (0.105, 0.0, 0.085), "drawer_front",
        lambda a: _push_program(a, np.array([0.060, 0, 0]), np.array([-0.045, 0, 0]), _Q_SIDE),
    ))
    t.append(TaskTemplate(
        3, "place_in_drawer",
        ("put it in the open drawer", "place the object into the drawer", "drop the item into the open drawer"),
        "cabinet_open_drawer", _obj_cabinet_open_drawer,
        (0.085, 0.0, 0.063), "cavity",
        lambda a: _place_program(a, 0.070, 0.030),
    ))
    t.append(TaskTemplate(
        4, "pick_ball_from_basket",
        ("pick the ball from the basket", "grab the ball out of the basket", "take the ball from the container"),
        "basket_with_ball", _obj_basket_with_ball,
        (0.012, -0.008, 0.048), "ball",
        lambda a: _grasp_program(a, np.array([0, 0, 0.060]), np.array([0, 0, 0.090]), _Q_DOWN, 0.040),
    ))
    t.append(TaskTemplate(
        5, "pick_block_from_bin",
        ("pick the block from the bin", "grab the block out of the bin", "take the cube from the container"),
        "bin_with_block", _obj_bin_with_block,
        (-0.010, 0.012, 0.040), "block",
        lambda a: _grasp_program(a, np.array([0, 0, 0.060]), np.array([0, 0, 0.090]), _Q_DOWN, 0.032),
    ))
    t.append(TaskTemplate(
        6, "place_in_bowl",
        ("put it in the bowl", "place the object into the bowl", "drop the item in the bowl"),
        "bowl", _obj_bowl,
        (0.0, 0.0, 0.006), "interior",
        lambda a: _place_program(a, 0.070, 0.030),
    ))
    t.append(TaskTemplate(
        7, "pick_bottle",
        ("pick up the bottle", "grab the bottle", "lift the bottle off the table"),
        "bottle", _obj_bottle,
        (0.019, 0.0, 0.070), "body",
        lambda a: _grasp_program(a, np.array([0.055, 0, 0]), np.array([0, 0, 0.100]), _Q_SIDE, 0.038),
    ))
    return t


TEMPLATES = _templates()
TEMPLATES_BY_NAME = {t.name: t for t in TEMPLATES}

_CABINET_KINDS = {"cabinet_closed", "cabinet_protruding", "cabinet_open_drawer"}
_BUILDERS = {
    "cabinet_closed": _obj_cabinet_closed,
    "cabinet_protruding": _obj_cabinet_protruding,
    "cabinet_open_drawer": _obj_cabinet_open_drawer,
    "basket_with_ball": _obj_basket_with_ball,
    "bin_with_block": _obj_bin_with_block,
    "bowl": _obj_bowl,
    "bottle": _obj_bottle,
}

# Small objects are sampled denser than the cabinets so that even a
# single-object scene clears the 2000-point floor after dedup.
_SPACING_MULT = {
    "cabinet_closed": 1.15,
    "cabinet_protruding": 1.15,
    "cabinet_open_drawer": 1.15,
    "basket_with_ball": 0.75,
    "bin_with_block": 0.75,
    "bowl": 0.65,
    "bottle": 0.60,
}


def build_object(kind: str, point_spacing: float, role: str = "target") -> ObjectModel:
    """Sample an object; distractors are coarser to keep multi-object scenes lean."""
    mult = _SPACING_MULT[kind] if role == "target" else 1.35
    return _BUILDERS[kind](point_spacing * mult)


# Placement radii from a coarse build (geometry is spacing-independent).
_BOUND_RADII = {kind: _xy_radius(builder(0.02).points) for kind, builder in _BUILDERS.items()}


# ---------------------------------------------------------------------------
# Scene assembly


def label_interaction_point(keyframes: list, threshold: float = GRIPPER_CHANGE_THRESHOLD):
    """First keyframe whose finger separation jumps by more than ``threshold``.

    Falls back to the middle keyframe for gripper-neutral tasks (pushes).
    Returns (index, position).
    """
    if not keyframes:
        raise ValueError("need at least one keyframe")
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    for i in range(1, len(keyframes)):
        if abs(keyframes[i].proprio.g_w - keyframes[i - 1].proprio.g_w) > threshold:
            return i, keyframes[i].position.copy()
    mid = len(keyframes) // 2
    return mid, keyframes[mid].position.copy()


def _view_origins(center, distance=1.0, elevation=np.pi / 4, n_views=3):
    out = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        d = distance
        out.append(center + d * np.array([
            np.cos(az) * np.cos(elevation),
            np.sin(az) * np.cos(elevation),
            np.sin(elevation),
        ]))
    return out


def _cull_and_aggregate(points, normals, colors, view_origins):
    """Hidden-surface removal per view by normal test, then union of views."""
    pieces, views = [], []
    for vid, origin in enumerate(view_origins):
        facing = np.einsum("ij,ij->i", normals, origin[None, :] - points) > 1e-9
        pieces.append((points[facing], colors[facing]))
        views.append(np.full(int(facing.sum()), vid, dtype=np.int32))
    pos = np.concatenate([p for p, _ in pieces])
    col = np.concatenate([c for _, c in pieces])
    return PointCloud(pos, col, np.concatenate(views))


def _sample_table(bounds: WorkspaceBounds, spacing: float):
    lo, hi = np.asarray(bounds.lo), np.asarray(bounds.hi)
    margin = 0.03
    pts, nrm = _rect_grid(
        ((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, 0.0),
        (1.0, 0, 0), (0, 1.0, 0),
        (hi[0] - lo[0]) / 2 + margin, (hi[1] - lo[1]) / 2 + margin,
        (0, 0, 1.0), spacing,
    )
    col = np.tile(np.asarray(PALETTE["table"]), (pts.shape[0], 1))
    return pts, nrm, col


def _transform_obb(center, half, yaw_local, place_xy, place_yaw):
    c = rotate_points_z(np.asarray(center, dtype=np.float64), place_yaw, (0, 0, 0))
    c = c + np.array([place_xy[0], place_xy[1], 0.0])
    return {"center": c.tolist(), "half_extents": list(map(float, half)),
            "yaw": float(yaw_local + place_yaw)}


def obb_contains(obb: dict, point, margin: float = 0.0) -> bool:
    """Point-in-oriented-box test for part volumes stored in episode metadata."""
    c = np.asarray(obb["center"], dtype=np.float64)
    rel = np.asarray(point, dtype=np.float64) - c
    rel = rotate_points_z(rel, -obb["yaw"], (0, 0, 0))
    half = np.asarray(obb["half_extents"], dtype=np.float64) + margin
    return bool(np.all(np.abs(rel) <= half))


def _place_objects(rng, target_radius, distractor_kinds, bounds, n_attempts=100):
    """Rejection-sample non-overlapping xy placements; target drawn first."""
    lo, hi = np.asarray(bounds.lo), np.asarray(bounds.hi)
    placed = []

    def try_place(radius):
        if lo[0] + radius >= hi[0] - radius or lo[1] + radius >= hi[1] - radius:
            raise PlacementError(
                f"object of radius {radius:.3f} cannot fit inside the workspace at all"
            )
        for _ in range(n_attempts):
            x = rng.uniform(lo[0] + radius, hi[0] - radius)
            y = rng.uniform(lo[1] + radius, hi[1] - radius)
            if all(np.hypot(x - px, y - py) >= radius + pr + 0.01 for px, py, pr in placed):
                placed.append((x, y, radius))
                return x, y
        raise PlacementError(
            f"could not place object of radius {radius:.3f} after {n_attempts} attempts"
        )

    target_xy = try_place(target_radius)
    distractor_xy = [try_place(_BOUND_RADII[k]) for k in distractor_kinds]
    return target_xy, distractor_xy


def generate_scene(template: TaskTemplate, seed: int, n_distractors: int = 0,
                   workspace_bounds: WorkspaceBounds = WorkspaceBounds(),
                   point_spacing: float = 0.009, table_spacing: float = 0.015,
                   n_views: int = 3) -> Demonstration:
    """Deterministic synthetic episode for one task template."""
    if n_distractors < 0:
        raise ValueError("n_distractors must be >= 0")
    rng = np.random.default_rng(seed)
    command = str(rng.choice(template.language_variants))

    # Distractor kinds: other templates' objects; at most one cabinet per
    # scene (and none when the target is a cabinet) to keep commands
    # unambiguous and placement feasible.
    target_model = build_object(template.object_kind, point_spacing)
    kinds = []
    cabinet_used = target_model.kind in _CABINET_KINDS
    for _ in range(n_distractors):
        options = [k for k in _BUILDERS
                   if k != target_model.kind and not (cabinet_used and k in _CABINET_KINDS)]
        kind = str(rng.choice(sorted(options)))
        if kind in _CABINET_KINDS:
            cabinet_used = True
        kinds.append(kind)

    target_xy, distractor_xy = _place_objects(rng, target_model.bound_radius, kinds, workspace_bounds)
    target_yaw = float(rng.uniform(-np.pi, np.pi))

    table_p, table_n, table_c = _sample_table(workspace_bounds, table_spacing)
    all_p, all_n, all_c = [table_p], [table_n], [table_c]

    def add_object(model, xy, yaw, anchor_local=None):
        p = rotate_points_z(model.points, yaw, (0, 0, 0)) + np.array([xy[0], xy[1], 0.0])
        n = rotate_points_z(model.normals, yaw, (0, 0, 0))
        c = model.colors
        if anchor_local is not None:
            a = rotate_points_z(np.asarray(anchor_local, dtype=np.float64), yaw, (0, 0, 0))
            a = a + np.array([xy[0], xy[1], 0.0])
            # Contact point becomes a sampled surface point (upward normal so
            # the elevated views keep it): guarantees the label snaps into P.
            p = np.concatenate([p, a[None, :]])
            n = np.concatenate([n, [[0.0, 0.0, 1.0]]])
            c = np.concatenate([c, c[-1:]])
            return p, n, c, a
        return p, n, c, None

    p, n, c, anchor_world = add_object(target_model, target_xy, target_yaw, template.anchor_local)
    all_p.append(p), all_n.append(n), all_c.append(c)

    distractor_meta = []
    for kind, xy in zip(kinds, distractor_xy):
        model = build_object(kind, point_spacing, role="distractor")
        yaw = float(rng.uniform(-np.pi, np.pi))
        p, n, c, _ = add_object(model, xy, yaw)
        all_p.append(p), all_n.append(n), all_c.append(c)
        bb_c, bb_h = _aabb(model.points, margin=0.005)
        distractor_meta.append({
            "kind": kind, "xy": [float(xy[0]), float(xy[1])], "yaw": yaw,
            "bbox": _transform_obb(bb_c, bb_h, 0.0, xy, yaw),
        })

    origins = _view_origins(workspace_bounds.center + np.array([0, 0, 0.1]), n_views=n_views)
    raw = _cull_and_aggregate(np.concatenate(all_p), np.concatenate(all_n),
                              np.concatenate(all_c), origins)
    cloud = dedup_voxelize(raw, 0.001)

    local_keyframes, initial = template.program(np.asarray(template.anchor_local, dtype=np.float64))
    q_place = UnitQuaternion.from_z_rotation(target_yaw)
    keyframes = []
    for ts, (pos, q, g, post) in enumerate(local_keyframes):
        wp = rotate_points_z(np.asarray(pos, dtype=np.float64), target_yaw, (0, 0, 0))
        wp = wp + np.array([target_xy[0], target_xy[1], 0.0])
        keyframes.append(Keyframe(wp, q_place.compose(q), g, ProprioState(post[0], post[1], ts)))

    idx, p_int = label_interaction_point(keyframes)
    if not np.allclose(p_int, anchor_world, atol=1e-12):
        raise AssertionError("interaction keyframe drifted from the injected contact point")

    bb_c, bb_h = _aabb(target_model.points, margin=0.005)
    part_c, part_h = target_model.parts[template.part_name]
    meta = {
        "template": template.name,
        "task_id": template.task_id,
        "seed": int(seed),
        "n_distractors": int(n_distractors),
        "initial_proprio": [initial[0], initial[1]],
        "workspace_center": workspace_bounds.center.tolist(),
        "workspace": {"lo": list(workspace_bounds.lo), "hi": list(workspace_bounds.hi)},
        "target": {
            "kind": target_model.kind,
            "xy": [float(target_xy[0]), float(target_xy[1])],
            "yaw": target_yaw,
            "bbox": _transform_obb(bb_c, bb_h, 0.0, target_xy, target_yaw),
        },
        "target_part": dict(
            _transform_obb(part_c, part_h, 0.0, target_xy, target_yaw), name=template.part_name,
        ),
        "distractors": distractor_meta,
        "n_views": int(n_views),
    }
    return Demonstration(cloud, command, keyframes, idx, p_int, meta)
