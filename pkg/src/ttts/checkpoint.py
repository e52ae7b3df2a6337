"""Versioned checkpoint container.

Layout::

    b"TTTSCKPT" | u32 version | u64 header length | header JSON | tensor payload | sha256

The header lists every tensor entry (name, dtype, shape, offset, size) plus
arbitrary JSON metadata.  Payloads are raw little-endian bytes, so a
save/load round trip is bit-exact.  The trailing digest covers everything
before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"TTTSCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def write_container(path: str | Path, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    entries, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "entries": entries}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: content hash mismatch (corrupt or truncated)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = body[start + head_len:]
    tensors = {}
    for e in header.pop("entries"):
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: entry {e['name']} runs past the payload")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        native = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        tensors[e["name"]] = torch.from_numpy(native).to(_TORCH_DTYPES[e["dtype"]])
    return header, tensors


def flatten_optimizer_state(state_dict: dict) -> tuple[dict, dict[str, torch.Tensor]]:
    """Split an optimizer ``state_dict`` into JSON-able groups and named tensors."""
    tensors = {}
    scalars: dict[str, dict] = {}
    for idx, slots in state_dict["state"].items():
        for key, value in slots.items():
            if torch.is_tensor(value):
                tensors[f"optim/{idx}/{key}"] = value
            else:
                scalars.setdefault(str(idx), {})[key] = value
    groups = []
    for g in state_dict["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return {"param_groups": groups, "scalars": scalars}, tensors


def unflatten_optimizer_state(meta: dict, tensors: dict[str, torch.Tensor]) -> dict:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith("optim/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = value
    for idx, slots in meta.get("scalars", {}).items():
        state.setdefault(int(idx), {}).update(slots)
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}
