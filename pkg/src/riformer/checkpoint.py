"""Bit-exact named-tensor checkpoint format.

Layout:  8-byte magic | u32 little-endian header length | JSON header |
float32 little-endian payload.  The header carries the model spec echo,
free-form metadata, the deploy flag, and a manifest of (name, shape, offset)
entries; offsets are byte positions into the payload. There is deliberately
no checksum: integrity is verified functionally by the equivalence tools.
"""
from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .models import ModelSpec, ModelWeights, build_model
from .tensor import Tensor

MAGIC = b"RIFCKPT1"


class CheckpointError(ValueError):
    """Corrupt or inconsistent checkpoint file."""


def save_checkpoint(model: ModelWeights, path: str,
                    meta: Optional[dict] = None) -> None:
    manifest = []
    payload = bytearray()
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({
        "spec": model.spec.to_dict(),
        "deploy": model.deploy,
        "meta": meta or {},
        "manifest": manifest,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def _deploy_skeleton(spec: ModelSpec) -> ModelWeights:
    model = build_model(spec, seed=0)
    model.deploy = True
    for stage_blocks in model.blocks:
        for bw in stage_blocks:
            bw.affine_s = None
            bw.affine_t = None
    return model


def read_header(path: str) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt header: {e}") from None
    for key in ("spec", "deploy", "meta", "manifest"):
        if key not in header:
            raise CheckpointError(f"header missing {key!r}")
    return header


def load_checkpoint(path: str) -> tuple[ModelWeights, dict]:
    """Rebuild the model; returns (model, meta). Round-trips bit-exactly."""
    header = read_header(path)
    with open(path, "rb") as f:
        f.seek(len(MAGIC))
        (hlen,) = struct.unpack("<I", f.read(4))
        f.seek(len(MAGIC) + 4 + hlen)
        payload = f.read()

    spec = ModelSpec.from_dict(header["spec"])
    deploy = bool(header["deploy"])
    model = _deploy_skeleton(spec) if deploy else build_model(spec, seed=0)
    params = dict(model.named_parameters())

    manifest = header["manifest"]
    if {e["name"] for e in manifest} != set(params):
        missing = set(params) - {e["name"] for e in manifest}
        extra = {e["name"] for e in manifest} - set(params)
        raise CheckpointError(f"manifest/spec mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    spans = []
    for entry in manifest:
        shape = tuple(entry["shape"])
        want = params[entry["name"]].shape
        if shape != want:
            raise CheckpointError(f"{entry['name']}: manifest shape {shape} "
                                  f"does not match spec shape {want}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        off = int(entry["offset"])
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{entry['name']}: offset out of bounds")
        spans.append((off, off + nbytes, entry["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"overlapping payload spans for {n0} and {n1}")

    for entry in manifest:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        off = int(entry["offset"])
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape)
        params[entry["name"]].data = arr.copy()
    return model, header["meta"]
