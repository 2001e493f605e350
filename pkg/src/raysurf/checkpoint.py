"""Versioned binary checkpoint format for field parameters.

Layout: an 8-byte magic ``RSCKPT01``, an 8-byte little-endian header length,
a UTF-8 JSON header, then the raw little-endian tensor bytes concatenated in
header order. Writing the same parameters always produces the same bytes, so
round trips are bit-exact and same-seed runs produce identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .field import HashGridConfig, SurfaceField

MAGIC = b"RSCKPT01"
FORMAT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, field: SurfaceField, step: int = 0) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, param in sorted(field.state_dict().items()):
        arr = param.detach().cpu().numpy()
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "grid": dataclasses.asdict(field.config),
        "sdf_hidden": field.sdf_hidden,
        "color_hidden": field.color_hidden,
        "geo_feat_dim": field.geo_feat_dim,
        "dtype": str(field.dtype).replace("torch.", ""),
        "tensors": tensors,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[SurfaceField, int]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a field checkpoint (bad magic)")
    (hdr_len,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('format_version')}"
        )
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise CheckpointError(f"{path}: unknown dtype {header['dtype']}")
    field = SurfaceField(
        config=HashGridConfig(**header["grid"]),
        sdf_hidden=header["sdf_hidden"],
        color_hidden=header["color_hidden"],
        geo_feat_dim=header["geo_feat_dim"],
        dtype=dtype,
    )
    body = data[16 + hdr_len :]
    state = {}
    for spec in header["tensors"]:
        raw = body[spec["offset"] : spec["offset"] + spec["nbytes"]]
        if len(raw) != spec["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {spec['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
    try:
        field.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: state mismatch: {e}") from e
    return field, header["step"]
