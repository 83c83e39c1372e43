"""
Binary checkpoints.

Layout (little-endian): magic ``MTPL``, version u32, entry count u32, then per
entry: name length u16, UTF-8 name, rank u8, extents as u64, float64 values.
"""

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from metriforge.autodiff.params import ModelParams
from metriforge.errors import ContractError

MAGIC = b"MTPL"
VERSION = 1


def dumps(params: ModelParams) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise ContractError("not a metriforge checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")

    offset = 12
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}Q", payload, offset)
        offset += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        entries[name] = values.reshape(shape).astype(np.float64)
    return entries


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path: Union[str, Path], into: ModelParams) -> ModelParams:
    """Copy checkpoint values into a registry with the same names and shapes."""
    entries = loads(Path(path).read_bytes())
    missing = set(into.names()) ^ set(entries)
    if missing:
        raise ContractError(f"checkpoint and model disagree on {sorted(missing)}")
    for name, value in entries.items():
        into.set(name, value)
    return into
