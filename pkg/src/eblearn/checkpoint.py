"""Binary container for parameters, optimizer state and run metadata.

Layout (all integers little-endian)::

    magic       8 bytes   b"EBLCKPT\\0"
    version     uint32
    header_len  uint32
    header      UTF-8 JSON (sorted keys): architecture, config, epoch, ...
    n_arrays    uint32
    per array:  name_len uint16, name, dtype tag uint8, ndim uint8,
                dims uint32 * ndim, little-endian data
    crc32       uint32 over every preceding byte

Writing is deterministic: the same content always gives the same bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import FormatError
from .model import Architecture, Parameters

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"EBLCKPT\0"
FORMAT_VERSION = 1
DTYPE_TAGS = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<f2"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""

    architecture: Architecture
    params: Parameters
    velocity: Optional[Parameters] = None
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _pack_array(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    if np.dtype(dtype) not in DTYPE_TAGS:
        raise FormatError(f"cannot store dtype {array.dtype} for {name}")
    encoded = name.encode()
    out = struct.pack("<H", len(encoded)) + encoded
    out += struct.pack("<BB", DTYPE_TAGS[np.dtype(dtype)], array.ndim)
    out += struct.pack(f"<{array.ndim}I", *array.shape)
    return out + np.ascontiguousarray(array, dtype=dtype).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "architecture": ckpt.architecture.to_dict(),
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "extra": ckpt.extra,
        "has_velocity": ckpt.velocity is not None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    arrays = list(ckpt.params.items())
    if ckpt.velocity is not None:
        arrays += [("v_" + name, a) for name, a in ckpt.velocity.items()]
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes
    body += struct.pack("<I", len(arrays))
    body += b"".join(_pack_array(name, a) for name, a in arrays)
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, architecture: Optional[Architecture] = None) -> Checkpoint:
    """Read a checkpoint, verifying its checksum and (optionally) its architecture."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch (corrupted file)")
    reader = _Reader(data[:-4])
    reader.take(len(MAGIC))
    version, hlen = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(reader.take(hlen).decode())
    arch = Architecture.from_dict(header["architecture"])
    if architecture is not None and arch != architecture:
        raise FormatError(f"checkpoint architecture {arch} does not match {architecture}")
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode()
        tag, ndim = reader.unpack("<BB")
        if tag not in TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.data):
        raise FormatError("trailing bytes after the last array")
    names = Parameters.zeros(arch).names()
    try:
        params = Parameters.from_arrays([arrays[n] for n in names])
        velocity = (Parameters.from_arrays([arrays["v_" + n] for n in names])
                    if header["has_velocity"] else None)
    except KeyError as err:
        raise FormatError(f"checkpoint lacks array {err}") from None
    params.check(arch)
    return Checkpoint(arch, params, velocity, header["step"], header["epoch"],
                      header["config"], header["extra"])
