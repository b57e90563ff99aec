"""
backend/checkpoint.py
Binary checkpoints: network parameters, Adam moments and trainer state.

Layout (all integers little-endian):
    8 bytes   magic b"CSEGCKPT"
    uint32    format version
    uint32    header length N
    N bytes   UTF-8 JSON header (configs, trainer state, tensor table)
    ...       tensor payload, concatenated in table order
    uint32    crc32 of header + payload

Tensors are stored in the network's precision, so a float64 model comes
back bit-identical.
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from backend.errors import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
)
from backend.losses import TaskWeights
from backend.network import ModelParams
from backend.optim import Adam
from backend.tensorgrid import resolve_dtype
from schemas.config import NetConfig

logger = logging.getLogger(__name__)

MAGIC = b"CSEGCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_CRC = struct.Struct("<I")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: Adam
    weights: TaskWeights
    epoch: int = 0
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def _tensor_groups(ckpt: Checkpoint) -> List[tuple]:
    groups = [("param", name, arr) for name, arr in ckpt.params.arrays.items()]
    groups += [("adam_m", name, arr) for name, arr in ckpt.optimizer.m.items()]
    groups += [("adam_v", name, arr) for name, arr in ckpt.optimizer.v.items()]
    return groups


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    """Write ``ckpt`` atomically (temp file, then rename)."""
    path = Path(path)
    dtype = resolve_dtype(ckpt.params.config.precision).newbyteorder("<")
    table, chunks, offset = [], [], 0
    for group, name, arr in _tensor_groups(ckpt):
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    adam = {k: v for k, v in ckpt.optimizer.state_dict().items() if k not in ("m", "v")}
    header = {
        "net": ckpt.params.config.model_dump(),
        "dtype": dtype.str,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "weights": ckpt.weights.state_dict(),
        "adam": adam,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    crc = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(_CRC.pack(crc))
    tmp.replace(path)
    logger.info(f"Checkpoint written to {path}", extra={"epoch": ckpt.epoch, "step": ckpt.step})
    return path


def load_checkpoint(path: PathLike, expected: Optional[NetConfig] = None) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CorruptCheckpointError: truncated, unreadable or checksum mismatch
        CheckpointVersionError: written by another format version
        ConfigMismatchError: network config differs from ``expected``
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(blob) < _PREFIX.size + _CRC.size:
        raise CorruptCheckpointError(f"{path}: file too short ({len(blob)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")

    body = blob[_PREFIX.size:-_CRC.size]
    (crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if header_len > len(body) or zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or damaged)")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
        net = NetConfig.model_validate(header["net"])
    except (ValueError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc

    if expected is not None and net != expected:
        raise ConfigMismatchError(
            f"{path}: checkpoint network {net.model_dump()} does not match expected {expected.model_dump()}")

    payload = body[header_len:]
    dtype = np.dtype(header["dtype"])
    native = resolve_dtype(net.precision)
    tensors: Dict[str, "OrderedDict[str, np.ndarray]"] = {g: OrderedDict() for g in ("param", "adam_m", "adam_v")}
    for entry in header["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CorruptCheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[start:stop], dtype=dtype).reshape(entry["shape"]).astype(native)
        tensors[entry["group"]][entry["name"]] = arr

    params = ModelParams(net, tensors["param"])
    optimizer = Adam()
    optimizer.load_state_dict({**header["adam"], "m": tensors["adam_m"], "v": tensors["adam_v"]})
    return Checkpoint(
        params=params,
        optimizer=optimizer,
        weights=TaskWeights.from_state_dict(header["weights"]),
        epoch=int(header["epoch"]),
        step=int(header["step"]),
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
    )
