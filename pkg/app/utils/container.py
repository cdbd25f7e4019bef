"""
Named-array container
=====================
Binary checkpoint format shared by codec, prior, adapter, LoRA and
conditioning checkpoints.

Layout (all integers little-endian):
    magic  b"LAFR"
    u16    format version
    u32    array count
    per array:
        u16 name length, name bytes (utf-8)
        u8  element-type tag (0=f32, 1=i64, 2=u8)
        u8  rank
        u32 per dimension
        row-major payload
    u32    CRC32 of every preceding byte

Usage:
    from app.utils.container import save_arrays, load_arrays

    save_arrays(path, {"encoder.conv_in.weight": arr})
    arrays = load_arrays(path)
"""
import logging
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
import torch
from torch import nn

from app.utils.errors import ContainerError

logger = logging.getLogger(__name__)

MAGIC = b"LAFR"
FORMAT_VERSION = 1

# Tag 0 is the float32 payload; 1 and 2 carry counters and text metadata
DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<i8"): 1,
    np.dtype("u1"): 2,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}

PathLike = Union[str, Path]


def _normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f4")
    if arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        return np.ascontiguousarray(arr, dtype="<i8")
    if arr.dtype == np.uint8:
        return np.ascontiguousarray(arr)
    if arr.dtype == np.bool_:
        return np.ascontiguousarray(arr, dtype=np.uint8)
    raise ContainerError(f"Unsupported array dtype: {arr.dtype}")


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize an ordered name → array mapping to container bytes"""
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = _normalize(arr)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ContainerError(f"Array name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_arrays(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    """Parse container bytes, validating magic, CRC and name uniqueness"""
    if len(blob) < len(MAGIC) + 10 or blob[:4] != MAGIC:
        raise ContainerError("Not a LAFR container (bad magic)")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise ContainerError(f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    version, count = struct.unpack_from("<HI", body, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"Unsupported container version {version}")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 10
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, rank = struct.unpack_from("<BB", body, offset)
            offset += 2
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            if tag not in TAG_DTYPES:
                raise ContainerError(f"Unknown element-type tag {tag} for '{name}'")
            dtype = TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(body):
                raise ContainerError(f"Truncated payload for '{name}'")
            arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            offset += nbytes
            if name in arrays:
                raise ContainerError(f"Duplicate array name '{name}'")
            arrays[name] = arr.reshape(shape).copy()
    except struct.error as e:
        raise ContainerError(f"Truncated container: {e}") from e

    if offset != len(body):
        raise ContainerError("Trailing bytes after last array record")
    return arrays


def save_arrays(path: PathLike, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write a container atomically (temp file, fsync, rename)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_arrays(arrays)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with open(temp_path, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(temp_path, path)
    logger.debug(f"Saved {len(arrays)} arrays to {path}")
    return path


def load_arrays(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    with open(path, "rb") as f:
        return decode_arrays(f.read())


# ============================================
# torch module <-> container helpers
# ============================================

def module_to_arrays(module: nn.Module, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    """Flatten a module's state_dict into container arrays"""
    return OrderedDict(
        (f"{prefix}{name}", tensor.detach().cpu().numpy())
        for name, tensor in module.state_dict().items()
    )


def arrays_to_module(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True) -> nn.Module:
    """Load container arrays (optionally under a name prefix) into a module"""
    own_state = module.state_dict()
    state: Dict[str, torch.Tensor] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):]
        if key in own_state:
            state[key] = torch.from_numpy(np.array(arr)).to(own_state[key].dtype)
    missing = [key for key in own_state if key not in state]
    if strict and missing:
        raise ContainerError(f"Checkpoint is missing {len(missing)} tensors, e.g. '{missing[0]}'")
    module.load_state_dict(state, strict=strict)
    return module
