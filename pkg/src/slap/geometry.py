"""Point-cloud containers, voxel operations, rigid transforms and quaternions.

Everything operates in meters in the robot base frame. Voxel keys are
``floor(position / resolution)`` per axis on raw coordinates, and voxel
representatives are member centroids, so both voxelizations are idempotent
and independent of input ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from slap.errors import EmptyCloud

SLPC_MAGIC = b"SLPC"
SLPC_VERSION = 1


@dataclass
class PointCloud:
    """Positions plus RGB features, optionally tagged with a per-point view index."""

    positions: np.ndarray
    colors: np.ndarray
    source_view: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape[0] != self.colors.shape[0]:
            raise ValueError(
                f"positions ({self.positions.shape[0]}) and colors ({self.colors.shape[0]}) differ in length"
            )
        if self.positions.size and not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite coordinates")
        if self.colors.size and not np.all(np.isfinite(self.colors)):
            raise ValueError("colors contain non-finite values")
        if self.source_view is not None:
            self.source_view = np.asarray(self.source_view, dtype=np.int32).reshape(-1)
            if self.source_view.shape[0] != self.positions.shape[0]:
                raise ValueError("source_view length does not match positions")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def select(self, mask_or_idx) -> "PointCloud":
        view = None if self.source_view is None else self.source_view[mask_or_idx]
        return PointCloud(self.positions[mask_or_idx], self.colors[mask_or_idx], view)

    def translated(self, offset) -> "PointCloud":
        offset = np.asarray(offset, dtype=np.float64)
        view = None if self.source_view is None else self.source_view.copy()
        return PointCloud(self.positions + offset, self.colors.copy(), view)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z), canonicalized to the w >= 0 hemisphere."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise ValueError("quaternion has near-zero norm")
        q = q / n
        # Resolve the double cover: flip so w >= 0, breaking w == 0 ties by
        # the first nonzero component so serialization round-trips bitwise.
        if q[0] < 0 or (q[0] == 0 and _first_nonzero_sign(q[1:]) < 0):
            q = -q
        object.__setattr__(self, "w", float(q[0]))
        object.__setattr__(self, "x", float(q[1]))
        object.__setattr__(self, "y", float(q[2]))
        object.__setattr__(self, "z", float(q[3]))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "UnitQuaternion":
        q = np.asarray(q, dtype=np.float64).reshape(4)
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "UnitQuaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise ValueError("rotation axis has near-zero norm")
        axis = axis / n
        h = 0.5 * float(angle)
        s = np.sin(h)
        return cls(np.cos(h), axis[0] * s, axis[1] * s, axis[2] * s)

    @classmethod
    def from_z_rotation(cls, angle: float) -> "UnitQuaternion":
        return cls.from_axis_angle((0.0, 0.0, 1.0), angle)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def compose(self, other: "UnitQuaternion") -> "UnitQuaternion":
        """Hamilton product self * other (apply ``other`` first, then ``self``)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate one vector or an (N, 3) stack."""
        v = np.asarray(vectors, dtype=np.float64)
        single = v.ndim == 1
        v = v.reshape(-1, 3)
        q = np.array([self.x, self.y, self.z])
        t = 2.0 * np.cross(q, v)
        out = v + self.w * t + np.cross(q, t)
        return out[0] if single else out


def quat_angle(q1: UnitQuaternion, q2: UnitQuaternion) -> float:
    """Rotation angle in [0, pi] between two unit quaternions.

    Uses cos(theta) = 2 <q1, q2>^2 - 1, which is invariant under a sign
    flip of either argument.
    """
    d = float(np.dot(q1.as_array(), q2.as_array()))
    c = np.clip(2.0 * d * d - 1.0, -1.0, 1.0)
    return float(np.arccos(c))


@dataclass
class Action:
    """Relative keyframe action: offset from the interaction point, absolute orientation, gripper bit."""

    delta_p: np.ndarray
    q: UnitQuaternion
    g: int

    def __post_init__(self):
        self.delta_p = np.asarray(self.delta_p, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.delta_p)):
            raise ValueError("delta_p is non-finite")
        if float(np.linalg.norm(self.delta_p)) > 0.5:
            raise ValueError(f"|delta_p| = {np.linalg.norm(self.delta_p):.3f} m exceeds the 0.5 m workspace bound")
        if self.g not in (0, 1):
            raise ValueError(f"gripper command must be 0 or 1, got {self.g}")
        self.g = int(self.g)


# ---------------------------------------------------------------------------
# Voxel operations


def voxel_keys(positions: np.ndarray, resolution: float) -> np.ndarray:
    """Integer voxel coordinates floor(position / resolution), shape (N, 3)."""
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    return np.floor(np.asarray(positions, dtype=np.float64) / resolution).astype(np.int64)


def voxel_groups(positions: np.ndarray, resolution: float):
    """Group points by voxel, deterministically.

    Returns ``(order, starts, keys)``: ``order`` sorts points by
    (voxel key, position) lexicographically, groups are
    ``order[starts[g]:starts[g+1]]``, and ``keys[g]`` is group ``g``'s voxel
    key. Sorting by position inside each voxel makes downstream centroids
    independent of input ordering, bit for bit.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    keys = voxel_keys(positions, resolution)
    if positions.shape[0] == 0:
        return np.zeros(0, np.int64), np.zeros(1, np.int64), np.zeros((0, 3), np.int64)
    order = np.lexsort((
        positions[:, 2], positions[:, 1], positions[:, 0],
        keys[:, 2], keys[:, 1], keys[:, 0],
    ))
    sk = keys[order]
    change = np.nonzero(np.any(sk[1:] != sk[:-1], axis=1))[0] + 1
    starts = np.concatenate(([0], change, [order.shape[0]])).astype(np.int64)
    return order.astype(np.int64), starts, sk[starts[:-1]]


def _centroid_downsample(cloud: PointCloud, resolution: float) -> PointCloud:
    if len(cloud) == 0:
        return PointCloud.empty()
    order, starts, _ = voxel_groups(cloud.positions, resolution)
    counts = np.diff(starts).astype(np.float64)[:, None]
    pos = np.add.reduceat(cloud.positions[order], starts[:-1], axis=0) / counts
    col = np.add.reduceat(cloud.colors[order], starts[:-1], axis=0) / counts
    return PointCloud(pos, col)


def dedup_voxelize(cloud: PointCloud, resolution: float = 0.001) -> PointCloud:
    """Collapse duplicate points from overlapping views: one centroid per occupied voxel."""
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    return _centroid_downsample(cloud, resolution)


def grid_downsample(cloud: PointCloud, resolution: float = 0.005) -> PointCloud:
    """Coarser voxel downsample producing the token point set."""
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    return _centroid_downsample(cloud, resolution)


def crop_sphere(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Points with ||pos - center|| <= radius, input order preserved."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if len(cloud) == 0:
        return PointCloud.empty()
    center = np.asarray(center, dtype=np.float64).reshape(3)
    d2 = np.sum((cloud.positions - center) ** 2, axis=1)
    return cloud.select(d2 <= radius * radius)


def rotate_z(cloud: PointCloud, angle: float, pivot) -> PointCloud:
    """Rotate positions about the vertical axis through ``pivot``; colors untouched."""
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    pos = rotate_points_z(cloud.positions, angle, pivot)
    view = None if cloud.source_view is None else cloud.source_view.copy()
    return PointCloud(pos, cloud.colors.copy(), view)


def rotate_points_z(points: np.ndarray, angle: float, pivot) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    c, s = np.cos(angle), np.sin(angle)
    rel = points.reshape(-1, 3) - pivot
    out = np.empty_like(rel)
    out[:, 0] = c * rel[:, 0] - s * rel[:, 1]
    out[:, 1] = s * rel[:, 0] + c * rel[:, 1]
    out[:, 2] = rel[:, 2]
    out += pivot
    return out.reshape(points.shape)


def nearest_point_index(points: np.ndarray, target) -> int:
    """Index of the point nearest to ``target``; ties break to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyCloud("cannot snap to an empty point set")
    target = np.asarray(target, dtype=np.float64).reshape(3)
    d2 = np.sum((points - target) ** 2, axis=1)
    return int(np.argmin(d2))


# ---------------------------------------------------------------------------
# Serialization: SLPC binary clouds and ASCII PLY interchange


def write_slpc(cloud: PointCloud, path) -> None:
    """Write the columnar binary cloud format (see read_slpc)."""
    Path(path).write_bytes(slpc_bytes(cloud))


def slpc_bytes(cloud: PointCloud) -> bytes:
    """Serialize: magic 'SLPC', u32 version, u64 count, u32 flags (bit 0 =
    per-point view indices appended), float32-LE xyz triplets, float32-LE
    rgb triplets, then optional int32-LE view indices."""
    flags = 1 if cloud.source_view is not None else 0
    head = SLPC_MAGIC + struct.pack("<IQI", SLPC_VERSION, len(cloud), flags)
    pos = cloud.positions.astype("<f4").tobytes()
    col = cloud.colors.astype("<f4").tobytes()
    tail = cloud.source_view.astype("<i4").tobytes() if flags else b""
    return head + pos + col + tail


def read_slpc(path) -> PointCloud:
    return slpc_from_bytes(Path(path).read_bytes())


def slpc_from_bytes(blob: bytes) -> PointCloud:
    if blob[:4] != SLPC_MAGIC:
        raise ValueError("not an SLPC blob (bad magic)")
    version, count, flags = struct.unpack_from("<IQI", blob, 4)
    if version != SLPC_VERSION:
        raise ValueError(f"unsupported SLPC version {version}")
    off = 4 + struct.calcsize("<IQI")
    pos = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=off).reshape(count, 3)
    off += count * 12
    col = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=off).reshape(count, 3)
    off += count * 12
    view = None
    if flags & 1:
        view = np.frombuffer(blob, dtype="<i4", count=count, offset=off)
    return PointCloud(pos.astype(np.float64), col.astype(np.float64), view)


def write_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY export (xyz float + rgb uchar) for visualization interchange."""
    n = len(cloud)
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(cloud.positions, rgb):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    """Read ASCII PLY files produced by write_ply (xyz + uchar rgb)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    body_at = None
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if line.strip() == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    rows = [text[body_at + i].split() for i in range(n)]
    pos = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64).reshape(n, 3)
    col = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.float64).reshape(n, 3) / 255.0
    return PointCloud(pos, col)


def _first_nonzero_sign(v: np.ndarray) -> float:
    for x in v:
        if x != 0:
            return float(np.sign(x))
    return 1.0
