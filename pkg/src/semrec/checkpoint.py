"""Self-describing checkpoint container with bit-exact round trips.

Layout: magic, format version, JSON header (metadata plus a tensor
directory), raw little-endian tensor payload, then a SHA-256 digest of
everything before it. JSON keys are sorted and no timestamps are stored, so
save(load(x)) reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

MAGIC = b"SEMRECCK"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(meta: dict, tensors: dict[str, torch.Tensor], path: str) -> None:
    """Write metadata (JSON-able) and named tensors to one checksummed file."""
    directory = []
    payload = bytearray()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        arr = t.numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name}")
        blob = arr.tobytes()
        directory.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(blob),
        })
        payload.extend(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = MAGIC + struct.pack("<QQ", FORMAT_VERSION, len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_checkpoint(path: str) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read and verify one checkpoint; returns (meta, tensors)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 16 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch (corrupt or truncated): {path}")
    version, header_len = struct.unpack_from("<QQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} "
            f"(expected {FORMAT_VERSION}): {path}"
        )
    start = len(MAGIC) + 16
    header = json.loads(body[start : start + header_len].decode("utf-8"))
    payload = body[start + header_len :]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(
            payload, dtype=_DTYPES[entry["dtype"]],
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        ).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header["meta"], tensors
