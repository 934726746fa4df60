"""Versioned binary checkpoints.

Layout (little-endian)::

    8 bytes   magic b"AFCKPT\\x00\\x01"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header: config, step, vocab hashes, RNG state,
              tensor table [{name, shape, dtype, offset, nbytes}],
              payload_sha256
    ...       raw tensor payload, tensors back to back in table order
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .model import AssetFormer, ModelConfig
from .pcg import PHRASE_VOCAB
from .tokenizer import VOCAB_HASH, phrase_vocab_hash

MAGIC = b"AFCKPT\x00\x01"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: AssetFormer
    step: int = 0
    rng_state: bytes | None = None

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    tensors = []
    chunks = []
    offset = 0
    for name, t in ckpt.model.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "vocab_hash": VOCAB_HASH,
        "phrase_vocab": list(PHRASE_VOCAB),
        "phrase_hash": phrase_vocab_hash(PHRASE_VOCAB),
        "rng_state": base64.b64encode(ckpt.rng_state).decode() if ckpt.rng_state else None,
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise CheckpointError("corrupt checkpoint: truncated prefix")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise CheckpointError("corrupt checkpoint: truncated header")
    try:
        return json.loads(hbytes)
    except json.JSONDecodeError as exc:
        raise CheckpointError("corrupt checkpoint: unreadable header") from exc


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    if header.get("vocab_hash") != VOCAB_HASH:
        raise CheckpointError("checkpoint vocabulary does not match this build")
    total = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != total:
        raise CheckpointError(f"corrupt checkpoint: payload has {len(payload)} bytes, expected {total}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("corrupt checkpoint: payload checksum mismatch")

    try:
        cfg = ModelConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
    model = AssetFormer(cfg)
    expected = model.state_dict()
    names = [t["name"] for t in header["tensors"]]
    if set(names) != set(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointError(f"config/tensor mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    state = {}
    dtype = None
    for t in header["tensors"]:
        if list(expected[t["name"]].shape) != t["shape"]:
            raise CheckpointError(
                f"config/tensor mismatch for {t['name']}: header config implies "
                f"{list(expected[t['name']].shape)}, tensor has {t['shape']}"
            )
        np_dtype = np.dtype(t["dtype"]).newbyteorder("<")
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(t["shape"]).astype(t["dtype"])
        state[t["name"]] = torch.from_numpy(arr.copy())
        dtype = _DTYPES[t["dtype"]]
    if dtype is not None:
        model = model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    rng = header.get("rng_state")
    return Checkpoint(model, int(header.get("step", 0)), base64.b64decode(rng) if rng else None)
