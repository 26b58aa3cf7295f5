"""Versioned checkpoint container.

Layout: ``b"CPK1"``, u32 container version, u64 header length, UTF-8 JSON
header, then the NDT1 blobs listed in ``header["tensors"]`` back to back.
Nested state (optimizer and RNG state) is stored in the header with every
tensor replaced by a reference into the tensor table.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FingerprintMismatchError, FormatError, TruncatedFileError, VersionMismatchError
from .tensorio import decode_ndt, encode_ndt

MAGIC = b"CPK1"
CONTAINER_VERSION = 1


@dataclass
class Checkpoint:
    stage: int
    epoch: int
    config: dict
    fingerprint: str
    tensors: dict = field(default_factory=dict)  # name -> torch.Tensor
    state: dict = field(default_factory=dict)  # JSON-able nested state, may reference tensors
    stage1_fingerprint: str | None = None

    def module_state(self, prefix):
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def tensor_hash(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()[:16]


def model_fingerprint(model, config_fingerprint):
    """Identity of a trained model: its config plus the exact parameter values."""
    return f"{config_fingerprint}-{tensor_hash(model.state_dict())}"


def pack_state(obj, tensors, prefix):
    """Replace tensors inside ``obj`` by references and collect them in ``tensors``."""
    if isinstance(obj, torch.Tensor):
        tensors[prefix] = obj.detach().clone()
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: pack_state(v, tensors, f"{prefix}/{k}") for k, v in obj.items()}
        return {"__items__": [[k, pack_state(v, tensors, f"{prefix}/{k}")] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [pack_state(v, tensors, f"{prefix}/{i}") for i, v in enumerate(obj)]}
    if isinstance(obj, list):
        return [pack_state(v, tensors, f"{prefix}/{i}") for i, v in enumerate(obj)]
    return obj


def unpack_state(obj, tensors):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]].clone()
        if "__items__" in obj:
            return {k: unpack_state(v, tensors) for k, v in obj["__items__"]}
        if "__tuple__" in obj:
            return tuple(unpack_state(v, tensors) for v in obj["__tuple__"])
        return {k: unpack_state(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [unpack_state(v, tensors) for v in obj]
    return obj


_TORCH_FOR_NUMPY = {np.dtype("float32"): torch.float32, np.dtype("float64"): torch.float64,
                    np.dtype("uint8"): torch.uint8, np.dtype("int64"): torch.int64}


def save_checkpoint(path, ckpt):
    names = sorted(ckpt.tensors)
    blobs = [encode_ndt(ckpt.tensors[n].detach().cpu().numpy()) for n in names]
    header = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "fingerprint": ckpt.fingerprint,
        "stage1_fingerprint": ckpt.stage1_fingerprint,
        "state": ckpt.state,
        "tensors": [[n, len(b)] for n, b in zip(names, blobs)],
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path, expect_stage=None, expect_stage1_fingerprint=None):
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise TruncatedFileError(f"{path}: too short for a checkpoint header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, head_len = struct.unpack_from("<IQ", buf, 4)
    if version != CONTAINER_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader handles {CONTAINER_VERSION}")
    if len(buf) < 16 + head_len:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(buf[16:16 + head_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    tensors = {}
    pos = 16 + head_len
    for name, nbytes in header["tensors"]:
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"{path}: tensor {name!r} truncated")
        arr = decode_ndt(buf[pos:pos + nbytes], name=f"{path}:{name}")
        tensors[name] = torch.from_numpy(arr).to(_TORCH_FOR_NUMPY[arr.dtype])
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    ckpt = Checkpoint(header["stage"], header["epoch"], header["config"], header["fingerprint"], tensors,
                      header["state"], header.get("stage1_fingerprint"))
    if expect_stage is not None and ckpt.stage != expect_stage:
        raise FingerprintMismatchError(f"{path}: stage-{ckpt.stage} checkpoint where stage {expect_stage} was expected")
    if expect_stage1_fingerprint is not None and ckpt.stage1_fingerprint != expect_stage1_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: trained against stage-one model {ckpt.stage1_fingerprint}, got {expect_stage1_fingerprint}"
        )
    return ckpt
