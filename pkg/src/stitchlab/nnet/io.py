"""Binary persistence for models and activation tensors.

Model file (little-endian)::

    b"MDL1" | version u16 | header length u32 | JSON header | f32 blobs

The header holds the spec, seed, training metadata and the name/shape of
every state tensor; blobs follow in that order.

Activation file::

    b"ACT1" | rank u8 | dims u32 * rank | f32 data (n, w, h, c) | checksum u64

The checksum is zlib's CRC-32 of the data bytes stored in a u64 field.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError
from .model import ActivationTensor, Model, Net
from .spec import NetworkSpec

MODEL_MAGIC = b"MDL1"
MODEL_VERSION = 1
ACT_MAGIC = b"ACT1"


def save_model(path, model: Model) -> None:
    state = model.net.state_dict()
    header = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "train_meta": model.train_meta,
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
                    for k, v in state.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_VERSION, len(raw)))
        fh.write(raw)
        for v in state.values():
            fh.write(v.detach().cpu().numpy().astype("<f4").tobytes())


def load_model(path) -> Model:
    blob = Path(path).read_bytes()
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    offset = 10
    header = json.loads(blob[offset:offset + hlen])
    offset += hlen
    spec = NetworkSpec.from_dict(header["spec"])
    net = Net(spec)
    state = {}
    for item in header["tensors"]:
        count = int(np.prod(item["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(item["shape"])
        offset += 4 * count
        state[item["name"]] = torch.from_numpy(arr.astype(np.float32)).to(getattr(torch, item["dtype"]))
    if offset != len(blob):
        raise FormatError(f"{path}: trailing or missing bytes")
    net.load_state_dict(state)
    return Model(spec, net, int(header["seed"]), header["train_meta"])


def save_activations(path, acts: ActivationTensor) -> None:
    data = np.ascontiguousarray(acts.data, dtype="<f4")
    payload = data.tobytes()
    with open(Path(path), "wb") as fh:
        fh.write(ACT_MAGIC)
        fh.write(struct.pack("<B", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(payload)
        fh.write(struct.pack("<Q", zlib.crc32(payload)))


def load_activations(path, layer: str = "", tap: str = "PostBN_PreReLU") -> ActivationTensor:
    blob = Path(path).read_bytes()
    if blob[:4] != ACT_MAGIC:
        raise FormatError(f"{path}: not an activation file")
    (rank,) = struct.unpack_from("<B", blob, 4)
    dims = struct.unpack_from(f"<{rank}I", blob, 5)
    start = 5 + 4 * rank
    size = 4 * int(np.prod(dims, dtype=np.int64))
    payload = blob[start:start + size]
    if len(blob) != start + size + 8:
        raise FormatError(f"{path}: truncated activation file")
    (crc,) = struct.unpack_from("<Q", blob, start + size)
    if crc != zlib.crc32(payload):
        raise FormatError(f"{path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return ActivationTensor(data, layer, tap)
