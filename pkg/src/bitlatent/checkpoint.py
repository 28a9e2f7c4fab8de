"""Single-file checkpoint container.

Layout: one magic line, a text header of ``key = value`` lines, a ``---``
separator, then named tensor records. Each record is a text line
``tensor <name> <ndim> <dim0> <dim1> ...`` followed immediately by the raw
element bytes as little-endian 32-bit floats in C order.
"""

from __future__ import annotations

import numpy as np
import torch

MAGIC = b"bitlatent-checkpoint v1"
_SEP = b"---"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: dict, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        for key, value in header.items():
            key, value = str(key), str(value)
            if any(ch in key for ch in " =\n") or "\n" in value:
                raise CheckpointError(f"invalid header entry {key!r}")
            fh.write(f"{key} = {value}\n".encode())
        fh.write(_SEP + b"\n")
        for name, tensor in tensors.items():
            if any(ch.isspace() for ch in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            if torch.is_tensor(tensor):
                tensor = tensor.detach().cpu().numpy()
            arr = np.asarray(tensor, dtype="<f4")  # tobytes() yields C order
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"tensor {name} {arr.ndim}{' ' if dims else ''}{dims}\n".encode())
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; tensors come back as float32 torch tensors."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = data.find(b"\n")
    if pos < 0 or data[:pos] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos += 1
    header: dict[str, str] = {}
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:end]
        pos = end + 1
        if line == _SEP:
            break
        key, eq, value = line.decode().partition(" = ")
        if not eq:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        header[key] = value
    tensors: dict[str, torch.Tensor] = {}
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated record header")
        parts = data[pos:end].decode().split()
        pos = end + 1
        if len(parts) < 3 or parts[0] != "tensor":
            raise CheckpointError(f"{path}: malformed record {parts!r}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(d) for d in parts[3:3 + ndim])
        if len(shape) != ndim:
            raise CheckpointError(f"{path}: record {name} declares {ndim} dims, got {len(shape)}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: record {name} runs past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
        pos += nbytes
    return header, tensors
