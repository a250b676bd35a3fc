"""Versioned named-tensor checkpoint files.

Layout (version 1)::

    PMLM-CHECKPOINT 1\\n
    key=value\\n            (zero or more header lines, UTF-8)
    END\\n
    <uint32 record count>
    repeated per record:
        <uint32 name length> <name bytes, UTF-8>
        <uint32 rank> <rank x uint32 dims>
        <prod(dims) x float32>   row-major

All integers and floats are little-endian. Header values are strings; the
caller decides how to parse them. Tensors are stored as 32-bit floats
regardless of the in-memory dtype.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np
import torch

MAGIC = "PMLM-CHECKPOINT"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(
    path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], header: Mapping[str, object]
) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(f"{MAGIC} {VERSION}\n".encode())
        for key, value in header.items():
            text = str(value)
            if "\n" in key or "=" in key or "\n" in text:
                raise CheckpointError(f"header entry {key!r} cannot be stored on one line")
            f.write(f"{key}={text}\n".encode())
        f.write(b"END\n")
        f.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            raw = name.encode()
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    with open(path, "rb") as f:
        first = f.readline().decode().rstrip("\n")
        magic, _, version = first.partition(" ")
        if magic != MAGIC:
            raise CheckpointError(f"{os.fspath(path)}: not a checkpoint file")
        if version != str(VERSION):
            raise CheckpointError(f"{os.fspath(path)}: unsupported version {version}")
        header: dict[str, str] = {}
        while True:
            line = f.readline()
            if not line:
                raise CheckpointError("truncated checkpoint header")
            line = line.decode().rstrip("\n")
            if line == "END":
                break
            key, _, value = line.partition("=")
            header[key] = value
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{name} dims"))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(_read_exact(f, 4 * n, f"{name} data"), dtype="<f4").reshape(dims)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
        return header, tensors
