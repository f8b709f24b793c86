"""Dataset serialization: episode files, manifest, vocabulary, hashing.

A dataset directory holds ``manifest.json`` (versioned, self-describing),
``vocab.txt`` (one token per line, frozen at build time) and one binary
episode file per demonstration. Episode files are fixed-layout little-endian:

    magic 'SLEP' | u32 version | u32 n_keyframes
    per keyframe: 3xf64 position | 4xf64 quaternion wxyz | u8 gripper
                  | u8 g_act | f64 g_w | u32 ts
    u32 interaction_index | 3xf64 interaction_point
    u32 command length | utf-8 command
    u32 meta length | canonical JSON metadata
    u64 cloud length | SLPC cloud bytes

All JSON is written with sorted keys so identical inputs produce identical
bytes; the dataset hash is the SHA-256 over the manifest plus every episode
file in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from slap.errors import DatasetError, PlacementError
from slap.geometry import UnitQuaternion, slpc_bytes, slpc_from_bytes
from slap.scenegen import (
    TEMPLATES_BY_NAME,
    Demonstration,
    Keyframe,
    ProprioState,
    WorkspaceBounds,
    generate_scene,
)

EPISODE_MAGIC = b"SLEP"
EPISODE_VERSION = 1
MANIFEST_VERSION = 1

_KF_STRUCT = struct.Struct("<3d4dBBdI")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def episode_bytes(demo: Demonstration) -> bytes:
    out = [EPISODE_MAGIC, struct.pack("<II", EPISODE_VERSION, len(demo.keyframes))]
    for kf in demo.keyframes:
        q = kf.orientation.as_array()
        out.append(_KF_STRUCT.pack(
            *kf.position, *q, kf.gripper,
            kf.proprio.g_act, kf.proprio.g_w, kf.proprio.ts,
        ))
    out.append(struct.pack("<I", demo.interaction_index))
    out.append(struct.pack("<3d", *demo.interaction_point))
    cmd = demo.command.encode()
    out.append(struct.pack("<I", len(cmd)) + cmd)
    meta = _canonical_json(demo.meta)
    out.append(struct.pack("<I", len(meta)) + meta)
    cloud = slpc_bytes(demo.cloud)
    out.append(struct.pack("<Q", len(cloud)) + cloud)
    return b"".join(out)


def episode_from_bytes(blob: bytes) -> Demonstration:
    if blob[:4] != EPISODE_MAGIC:
        raise DatasetError("not an episode blob (bad magic)")
    version, n_kf = struct.unpack_from("<II", blob, 4)
    if version != EPISODE_VERSION:
        raise DatasetError(f"unsupported episode version {version}")
    off = 12
    keyframes = []
    for k in range(n_kf):
        vals = _KF_STRUCT.unpack_from(blob, off)
        off += _KF_STRUCT.size
        keyframes.append(Keyframe(
            np.array(vals[0:3]),
            UnitQuaternion.from_array(vals[3:7]),
            int(vals[7]),
            ProprioState(int(vals[8]), float(vals[9]), int(vals[10])),
        ))
    (idx,) = struct.unpack_from("<I", blob, off)
    off += 4
    p_int = np.array(struct.unpack_from("<3d", blob, off))
    off += 24
    (cmd_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    command = blob[off:off + cmd_len].decode()
    off += cmd_len
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + meta_len])
    off += meta_len
    (cloud_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    cloud = slpc_from_bytes(blob[off:off + cloud_len])
    return Demonstration(cloud, command, keyframes, int(idx), p_int, meta)


def write_episode(demo: Demonstration, path) -> None:
    try:
        Path(path).write_bytes(episode_bytes(demo))
    except OSError as exc:
        raise DatasetError(f"failed to write episode {path}: {exc}") from exc


def read_episode(path) -> Demonstration:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"failed to read episode {path}: {exc}") from exc
    return episode_from_bytes(blob)


# ---------------------------------------------------------------------------
# Vocabulary


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(command: str) -> list:
    """Lowercase, strip punctuation, split on whitespace."""
    return command.lower().translate(_PUNCT_TABLE).split()


@dataclass
class Vocabulary:
    """Word -> id mapping with id 0 reserved for unknown words."""

    tokens: list

    def __post_init__(self):
        self._index = {tok: i + 1 for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_commands(cls, commands) -> "Vocabulary":
        words = sorted({w for c in commands for w in tokenize(c)})
        return cls(words)

    @property
    def size(self) -> int:
        """Embedding-table size: all known words plus the unknown slot."""
        return len(self.tokens) + 1

    def encode(self, command: str) -> list:
        return [self._index.get(w, 0) for w in tokenize(command)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


# ---------------------------------------------------------------------------
# Dataset build / load


@dataclass
class EpisodeRecord:
    file: str
    task_id: int
    template: str
    seed: int
    split: str
    command: str


@dataclass
class SlapDataset:
    """Loaded dataset: demonstrations plus split bookkeeping and vocab."""

    train: list
    val: list
    vocab: Vocabulary
    records: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    dataset_hash: str = ""
    root: str = ""

    @classmethod
    def from_demos(cls, train, val, vocab=None) -> "SlapDataset":
        """In-memory dataset (tests and toy problems)."""
        commands = [d.command for d in list(train) + list(val)]
        vocab = vocab or Vocabulary.from_commands(commands)
        blob = b"".join(episode_bytes(d) for d in list(train) + list(val))
        return cls(list(train), list(val), vocab,
                   dataset_hash=hashlib.sha256(blob).hexdigest())

    def sample_id(self, split: str, i: int) -> str:
        recs = [r for r in self.records if r.split == split]
        if recs:
            return recs[i].file
        return f"{split}[{i}]"


def build_dataset(templates, demos_per_task: int = 12, seed: int = 0, out_dir=None,
                  n_val_per_task: int = None, distractors=(1, 2),
                  workspace: WorkspaceBounds = WorkspaceBounds(),
                  point_spacing: float = 0.009, table_spacing: float = 0.015,
                  n_views: int = 3) -> dict:
    """Generate episodes for the given templates and write a dataset directory.

    Per-episode seeds are derived from (seed, task, index); placement
    failures retry with a bumped derivation so the manifest always records
    the seed that actually produced each episode. Returns the manifest.
    """
    if not templates:
        raise DatasetError("no templates given")
    if out_dir is None:
        raise DatasetError("out_dir is required")
    if n_val_per_task is None:
        n_val_per_task = max(1, demos_per_task // 6)
    if n_val_per_task >= demos_per_task:
        raise DatasetError("validation split would leave no training episodes")

    out = Path(out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)

    episodes = []
    commands = []
    for template in templates:
        commands.extend(template.language_variants)
        for i in range(demos_per_task):
            demo = None
            for bump in range(16):
                ep_seed = int(np.random.SeedSequence(
                    entropy=(seed, template.task_id, i, bump)).generate_state(1)[0])
                rng = np.random.default_rng(ep_seed)
                nd = int(rng.integers(distractors[0], distractors[1] + 1))
                try:
                    demo = generate_scene(template, ep_seed, nd, workspace,
                                          point_spacing, table_spacing, n_views)
                    break
                except PlacementError:
                    continue
            if demo is None:
                raise DatasetError(
                    f"placement failed persistently for {template.name} demo {i}")
            split = "train" if i < demos_per_task - n_val_per_task else "val"
            fname = f"episodes/ep_{template.task_id:02d}_{i:02d}.slep"
            write_episode(demo, out / fname)
            episodes.append({
                "file": fname, "task_id": template.task_id, "template": template.name,
                "seed": int(demo.meta["seed"]), "split": split, "command": demo.command,
            })

    vocab = Vocabulary.from_commands(commands)
    vocab.save(out / "vocab.txt")
    manifest = {
        "format": "slap-dataset",
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "demos_per_task": int(demos_per_task),
        "n_val_per_task": int(n_val_per_task),
        "distractors": list(distractors),
        "templates": [t.name for t in templates],
        "workspace": {"lo": list(workspace.lo), "hi": list(workspace.hi)},
        "point_spacing": point_spacing,
        "table_spacing": table_spacing,
        "n_views": int(n_views),
        "vocab_file": "vocab.txt",
        "episodes": episodes,
    }
    (out / "manifest.json").write_bytes(_canonical_json(manifest))
    return manifest


def load_dataset(root) -> SlapDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_bytes())
    if manifest.get("format") != "slap-dataset" or manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{root}: unsupported manifest")
    vocab = Vocabulary.load(root / manifest["vocab_file"])

    hasher = hashlib.sha256(manifest_path.read_bytes())
    train, val, records = [], [], []
    for ep in manifest["episodes"]:
        blob = (root / ep["file"]).read_bytes()
        hasher.update(blob)
        demo = episode_from_bytes(blob)
        records.append(EpisodeRecord(ep["file"], ep["task_id"], ep["template"],
                                     ep["seed"], ep["split"], ep["command"]))
        if ep["split"] == "train":
            train.append(demo)
        elif ep["split"] == "val":
            val.append(demo)
        else:
            raise DatasetError(f"{root}: unknown split {ep['split']!r}")
    return SlapDataset(train, val, vocab, records, manifest,
                       hasher.hexdigest(), str(root))


def dataset_hash(root) -> str:
    return load_dataset(root).dataset_hash


def templates_from_names(names) -> list:
    if isinstance(names, str):
        if names == "all":
            from slap.scenegen import TEMPLATES
            return list(TEMPLATES)
        names = [n.strip() for n in names.split(",") if n.strip()]
    try:
        return [TEMPLATES_BY_NAME[n] for n in names]
    except KeyError as exc:
        raise DatasetError(f"unknown template {exc.args[0]!r}") from exc
