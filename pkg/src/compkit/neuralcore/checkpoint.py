"""
A flat binary container of named arrays.

Layout::

    COMPKIT-CKPT v1
    meta<TAB>key=value              (zero or more)
    array<TAB>name<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes   (zero or more)
    end
    <payload: raw little-endian bytes of every array, at the given offsets from the payload start>

shape is a comma-separated list of dimensions (empty for scalars); dtype is a numpy dtype string such as ``<f4``.
"""

import collections
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from ..errors import CheckpointError

__all__ = [
    "MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "state_arrays",
    "load_state_arrays",
]

MAGIC = "COMPKIT-CKPT v1"

_FORBIDDEN = ("\t", "\n", "\r")


def _check_text(what: str, s: str):
    if any(c in s for c in _FORBIDDEN):
        raise CheckpointError(f"Checkpoint {what} must not contain tabs or newlines: {s!r}")


def save_checkpoint(
    path: Union[str, Path],
    arrays: Mapping[str, np.ndarray],
    meta: Optional[Mapping[str, str]] = None,
):
    """
    Writes the arrays (in iteration order) and the string metadata to path; identical inputs produce identical
    bytes.
    """
    path = Path(path)
    header = [MAGIC]
    for key, value in (meta or {}).items():
        key, value = str(key), str(value)
        _check_text("meta key", key)
        _check_text("meta value", value)
        if "=" in key:
            raise CheckpointError(f"Checkpoint meta key must not contain '=': {key!r}")
        header.append(f"meta\t{key}={value}")

    payload = []
    offset = 0
    for name, arr in arrays.items():
        _check_text("array name", name)
        arr = np.asarray(arr)
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        header.append(f"array\t{name}\t{arr.dtype.str}\t{shape}\t{offset}\t{len(data)}")
        payload.append(data)
        offset += len(data)
    header.append("end")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for data in payload:
            f.write(data)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """
    :return: the arrays (in stored order) and the metadata.
    :raises FileNotFoundError: the file does not exist.
    :raises CheckpointError: the file is not a checkpoint of this version, or is truncated or malformed.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()

    meta: Dict[str, str] = {}
    entries = []
    pos = 0
    lineno = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        try:
            line = raw[pos:end].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: header is not text (not a compkit checkpoint?)") from None
        pos = end + 1
        lineno += 1

        if lineno == 1:
            if line != MAGIC:
                raise CheckpointError(f"{path}: bad magic line {line[:40]!r}, expected {MAGIC!r}")
            continue
        if line == "end":
            break

        fields = line.split("\t")
        try:
            if fields[0] == "meta" and len(fields) == 2:
                key, value = fields[1].split("=", 1)
                meta[key] = value
            elif fields[0] == "array" and len(fields) == 6:
                _, name, dtype, shape, offset, nbytes = fields
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                entries.append((name, np.dtype(dtype), dims, int(offset), int(nbytes)))
            else:
                raise ValueError(f"unknown record {fields[0]!r}")
        except (ValueError, TypeError) as e:
            raise CheckpointError(f"{path}: malformed header line {lineno}: {e}") from e

    payload = memoryview(raw)[pos:]
    arrays: Dict[str, np.ndarray] = collections.OrderedDict()
    for name, dtype, dims, offset, nbytes in entries:
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload of {name!r} is truncated")
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: size of {name!r} does not match its shape {dims} and dtype {dtype}")
        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(dims).copy()
    return arrays, meta


def state_arrays(module: nn.Module) -> Dict[str, np.ndarray]:
    return collections.OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in module.state_dict().items())


def load_state_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> nn.Module:
    """
    Copies the arrays into the module's parameters and buffers (converting dtypes).

    :raises CheckpointError: the names or shapes do not match the module.
    """
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"Checkpoint does not match the model: missing {missing}, unexpected {unexpected}")
    for name, value in state.items():
        if tuple(arrays[name].shape) != tuple(value.shape):
            raise CheckpointError(
                f"Checkpoint array {name!r} has shape {tuple(arrays[name].shape)}, model expects {tuple(value.shape)}"
            )
    module.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})
    return module
