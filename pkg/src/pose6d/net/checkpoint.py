"""Single-file binary checkpoints.

Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
header (architecture, input shape, seed, Adam step, parameter names and
shapes), uint64 seed, then little-endian float32 arrays: all weights in
declaration order, then the first moments, then the second moments.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from pose6d.net.model import ArchitectureSpec, NetworkParams, build_architecture

MAGIC = b"P6DCKPT\x00"
VERSION = 1


def save_checkpoint(params: NetworkParams, path: Path) -> None:
    names = list(params.weights)
    header = {
        "spec": params.spec.to_json(),
        "input_shape": list(params.input_shape),
        "seed": int(params.seed),
        "step": int(params.step),
        "params": [[k, list(params.weights[k].shape)] for k in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", int(params.seed) & 0xFFFFFFFFFFFFFFFF))
        for group in (params.weights, params.m, params.v):
            for k in names:
                fh.write(np.ascontiguousarray(group[k], dtype="<f4").tobytes())


def load_checkpoint(path: Path, dtype=np.float32) -> NetworkParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen].decode())
    off += hlen + 8  # the uint64 seed duplicates header["seed"]
    spec = ArchitectureSpec.from_json(header["spec"])
    params = build_architecture(spec, tuple(header["input_shape"]), seed=header["seed"], dtype=dtype)
    expected = [[k, list(w.shape)] for k, w in params.weights.items()]
    if expected != header["params"]:
        raise ValueError(f"{path}: parameter layout does not match the architecture")
    for group in (params.weights, params.m, params.v):
        for k in group:
            n = group[k].size
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off)
            group[k] = arr.reshape(group[k].shape).astype(dtype)
            off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    params.step = int(header["step"])
    return params
