"""Versioned checkpoint container: named parameter tensors plus a config hash.

Layout: magic 'SLCK' | u64 header length | canonical-JSON header | raw
little-endian tensor bytes. The header records kind, the full model config,
its hash, and per-tensor name/shape/dtype/offset. Loading refuses a
checkpoint whose config hash differs from the expected one, so a model can
never silently come up with mismatched shapes or vocabulary.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from slap.config import config_hash
from slap.errors import ConfigMismatch

CHECKPOINT_MAGIC = b"SLCK"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, kind: str, model_config: dict, state: dict, extra: dict = None) -> None:
    """``state`` maps parameter names to numpy arrays or torch tensors."""
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name]
        if hasattr(arr, "detach"):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name}")
        blob = arr.astype(_DTYPES[dtype]).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": model_config,
        "config_hash": config_hash(model_config),
        "tensors": tensors,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: dict = None):
    """-> (state dict of numpy arrays, header dict)."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigMismatch(f"{path}: not a checkpoint (bad magic)")
    (head_len,) = struct.unpack_from("<Q", blob, 4)
    header = json.loads(blob[12:12 + head_len])
    if header["version"] != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"{path}: unsupported checkpoint version {header['version']}")
    if expected_config is not None:
        want = config_hash(expected_config)
        if want != header["config_hash"]:
            raise ConfigMismatch(
                f"{path}: config hash {header['config_hash'][:12]}... does not match "
                f"expected {want[:12]}...; refusing to load"
            )
    base = 12 + head_len
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(blob, dtype=_DTYPES[t["dtype"]],
                            count=int(np.prod(t["shape"])) if t["shape"] else 1,
                            offset=base + t["offset"])
        state[t["name"]] = arr.reshape(t["shape"]).astype(t["dtype"])
    return state, header
