"""SQFT binary checkpoints.

Layout, all little-endian::

    b"SQFT" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | ndim u8 | dims u32 * ndim | f32 payload
    CRC32 (u32) of every preceding byte
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import re
import struct
import zlib
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .nn import ArchMeta, ModelState
from .numerics import Tensor

MAGIC = b"SQFT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint bytes."""


def encode_params(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an SQFT checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC32 mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * size
    if pos != len(body):
        raise CheckpointError("trailing bytes before CRC")
    return out


def save(path: str | os.PathLike, params: Mapping[str, Tensor | np.ndarray]) -> str:
    """Write atomically; returns the sha256 of the file bytes."""
    blob = encode_params(params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f"{path.suffix}.{os.getpid()}.tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


def params_hash(params: Mapping[str, Tensor | np.ndarray]) -> str:
    return hashlib.sha256(encode_params(params)).hexdigest()


def infer_meta(params: Mapping[str, np.ndarray], activation: str = "gelu") -> ArchMeta:
    """Recover the architecture from parameter names and shapes."""
    width, patch_dim = params["encoder.patch_embed.weight"].shape
    blocks = {int(m.group(1)) for k in params if (m := re.match(r"encoder\.blocks\.(\d+)\.", k))}
    depth = max(blocks) + 1 if blocks else 0
    token_mixing = "encoder.blocks.0.token_fc1.weight" in params
    dec = sorted(int(m.group(1)) for k in params if (m := re.match(r"decoder\.(\d+)\.weight", k)))
    decoder_widths = tuple(params[f"decoder.{i}.weight"].shape[0] // 4 for i in dec)
    tokens = params["encoder.blocks.0.token_fc1.weight"].shape[1] if token_mixing else None
    patch = 2 ** len(decoder_widths)
    in_channels = patch_dim // (patch * patch)
    grid = int(round(np.sqrt(tokens))) if tokens else None
    return ArchMeta(
        image_size=grid * patch if grid else 32,
        in_channels=in_channels,
        patch_size=patch,
        width=width,
        depth=depth,
        channel_hidden=params["encoder.blocks.0.channel_fc1.weight"].shape[0] if depth else 64,
        token_hidden=params["encoder.blocks.0.token_fc1.weight"].shape[0] if token_mixing else 32,
        decoder_widths=decoder_widths,
        classes=params["seg_head.weight"].shape[0],
        token_mixing=token_mixing,
        use_norm="encoder.norm.weight" in params,
        activation=activation,
        use_bias="encoder.patch_embed.bias" in params,
    )


def save_model(path, model: ModelState) -> str:
    return save(path, model.params)


def load_model(path, meta: ArchMeta | None = None) -> ModelState:
    """Load a model; a given ``meta`` takes its class count from the stored seg head."""
    raw = load(path)
    if meta is None:
        meta = infer_meta(raw)
    elif "seg_head.weight" in raw:
        meta = dataclasses.replace(meta, classes=raw["seg_head.weight"].shape[0])
    return ModelState(meta, {k: Tensor(v, name=k) for k, v in raw.items()})
