"""Binary checkpoints.

Layout (little endian)::

    b"BAIMCKPT"  u16 version  32-byte sha256 config hash  u32 blob count
    per blob:    u16 name length, utf-8 name, u8 ndim, u32 x ndim shape, float32 data
    trailer:     u32 length, utf-8 JSON metadata

The metadata carries the model config, so ``load_checkpoint`` can rebuild the
network. Saving the same parameters and metadata twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigError, ParseError
from .model import KTModel, ModelConfig

MAGIC = b"BAIMCKPT"
VERSION = 1


def _pack_blob(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", array.ndim)]
    parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
    parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(state: dict, config: ModelConfig, metadata: dict | None = None) -> bytes:
    meta = dict(metadata or {})
    meta["model_config"] = config.to_dict()
    meta["config_hash"] = config.config_hash()
    header = MAGIC + struct.pack("<H", VERSION) + bytes.fromhex(meta["config_hash"])
    blobs = [_pack_blob(name, t.detach().cpu().numpy()) for name, t in state.items()]
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
    return b"".join([header, struct.pack("<I", len(blobs)), *blobs,
                     struct.pack("<I", len(trailer)), trailer])


def save_checkpoint(path, model: KTModel, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(model.state_dict(), model.config, metadata))
    return path


def decode_checkpoint(raw: bytes):
    """Returns (state dict of float32 tensors, metadata, header config hash)."""
    if raw[:8] != MAGIC:
        raise ParseError("not a BAIM checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 8)
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    config_hash = raw[10:42].hex()
    pos = 42
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            state[name] = torch.from_numpy(arr.copy())
        (tlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        metadata = json.loads(raw[pos:pos + tlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise ParseError(f"corrupt checkpoint: {exc}") from exc
    if pos + tlen != len(raw):
        raise ParseError("trailing bytes after checkpoint metadata")
    return state, metadata, config_hash


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Load a checkpoint; returns (model, metadata).

    Raises ``ConfigError`` if the stored config hash does not match the stored
    config, or does not match ``expected_config`` when one is given.
    """
    state, metadata, config_hash = decode_checkpoint(Path(path).read_bytes())
    config = ModelConfig.from_dict(metadata["model_config"])
    if config.config_hash() != config_hash:
        raise ConfigError("checkpoint config hash does not match its stored config")
    if expected_config is not None and expected_config.config_hash() != config_hash:
        diffs = _diff(expected_config.to_dict(), config.to_dict())
        raise ConfigError(f"checkpoint was written for a different config: {diffs}")
    model = KTModel(config)
    model.load_state_dict(state)
    model.eval()
    return model, metadata


def _diff(a: dict, b: dict, prefix="") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(_diff(va, vb, f"{prefix}{key}."))
        elif va != vb:
            out.append(f"{prefix}{key}: expected {va!r}, found {vb!r}")
    return out
