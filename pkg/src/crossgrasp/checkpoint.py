"""Binary checkpoint container.

Layout: magic ``DXFM``, format version (u32), tensor count (u32), then per
tensor: name length (u32), UTF-8 name, rank (u32), dims (u32 each), raw
float32 little-endian values.  Tensor order is preserved, so a save/load/save
round trip is byte-identical.

A policy checkpoint carries one extra ``meta`` tensor encoding the network
kind and its architecture numbers, so a file is self-describing.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes
from .policy import (
    RecurrentPolicy,
    RecurrentPolicyConfig,
    StudentPolicy,
    StudentConfig,
    TransformerPolicy,
    TransformerPolicyConfig,
)

MAGIC = b"DXFM"
FORMAT_VERSION = 1

_KIND_CODES = {"transformer": 0, "gru": 1, "lstm": 2, "student": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def write_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def read_tensors(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    version, count = struct.unpack_from("<II", view, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, off)
        off += 4
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", view, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", view, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.astype(np.float32)
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, write_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return read_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# policy <-> checkpoint
# ---------------------------------------------------------------------------

def _meta_for(policy) -> np.ndarray:
    cfg = policy.cfg
    if isinstance(policy, TransformerPolicy):
        vals = [0, cfg.obs_dim, cfg.action_dim, cfg.history, cfg.layers,
                cfg.width, cfg.heads, cfg.feedforward, cfg.head_hidden]
    elif isinstance(policy, RecurrentPolicy):
        vals = [_KIND_CODES[policy.kind], cfg.obs_dim, cfg.action_dim, 1,
                cfg.layers, cfg.hidden, 0, 0, cfg.head_hidden]
    elif isinstance(policy, StudentPolicy):
        vals = [3, cfg.obs_dim, cfg.action_dim, 1, len(cfg.hidden),
                cfg.hidden[0], cfg.hidden[1] if len(cfg.hidden) > 1 else 0, 0, 0]
    else:
        raise CheckpointError(f"unknown policy type {type(policy).__name__}")
    return np.asarray(vals, dtype=np.float32)


def save_policy(path, policy) -> None:
    tensors = {"meta": _meta_for(policy)}
    tensors.update(policy.params.state_dict())
    save_tensors(path, tensors)


def load_policy(path):
    tensors = load_tensors(path)
    if "meta" not in tensors:
        raise CheckpointError("checkpoint has no meta tensor")
    meta = tensors.pop("meta").astype(int).tolist()
    kind = _KIND_NAMES.get(meta[0])
    if kind == "transformer":
        cfg = TransformerPolicyConfig(obs_dim=meta[1], action_dim=meta[2],
                                      history=meta[3], layers=meta[4], width=meta[5],
                                      heads=meta[6], feedforward=meta[7],
                                      head_hidden=meta[8])
        policy = TransformerPolicy(cfg, seed=0)
    elif kind in ("gru", "lstm"):
        cfg = RecurrentPolicyConfig(kind=kind, obs_dim=meta[1], action_dim=meta[2],
                                    layers=meta[4], hidden=meta[5], head_hidden=meta[8])
        policy = RecurrentPolicy(cfg, seed=0)
    elif kind == "student":
        cfg = StudentConfig(obs_dim=meta[1], hidden=tuple(v for v in meta[5:7] if v),
                            action_dim=meta[2])
        policy = StudentPolicy(cfg, seed=0)
    else:
        raise CheckpointError(f"unknown policy kind code {meta[0]}")
    try:
        policy.params.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"incompatible checkpoint: {exc}") from exc
    return policy
