"""Binary checkpoint format for adapter weights (and optional optimizer moments).

Layout, all integers little-endian::

    b"DQLORA\\x00\\x01"           magic
    u32 version
    u32 n, n bytes JSON metadata   (iteration, config digest, ...)
    u32 tensor count
    per tensor: u32 name length, name (utf-8), u8 dtype tag, u8 ndim,
                u32 * ndim extents, row-major payload
    u32 CRC-32 of everything above

Tensors named ``<layer>.<site>.lora_A|lora_B`` are adapter weights;
optimizer moments use the ``optim/<tensor name>/exp_avg|exp_avg_sq`` names.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .lora import is_lora_name
from .numerics import bf16_decode, bf16_encode

MAGIC = b"DQLORA\x00\x01"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "bf16"}
_TAGS = {torch.float32: 0, torch.float64: 1, torch.bfloat16: 2}


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    adapters: dict[str, torch.Tensor]
    iteration: int = 0
    config_digest: str = ""
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer_step: int = 0
    meta: dict = field(default_factory=dict)


def _encode_tensor(name: str, t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    tag = _TAGS.get(t.dtype)
    if tag is None:
        raise TypeError(f"{name}: unsupported dtype {t.dtype}")
    if tag == 2:
        payload = bf16_encode(t.float().numpy()).astype("<u2").tobytes()
    else:
        payload = t.numpy().astype(_DTYPES[tag]).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", tag, t.dim())
    head += struct.pack(f"<{t.dim()}I", *t.shape)
    return head + payload


def save_checkpoint(
    path,
    adapters: dict[str, torch.Tensor],
    optimizer_state=None,
    iteration: int = 0,
    config_digest: str = "",
    extra_meta: dict | None = None,
) -> Path:
    """Atomically write adapter tensors (+ moments of ``optimizer_state``)."""
    bad = [k for k in adapters if not is_lora_name(k)]
    if bad:
        raise ValueError(f"not adapter tensors: {bad[:3]}")
    tensors = dict(sorted(adapters.items()))
    meta = {"iteration": int(iteration), "config": config_digest, **(extra_meta or {})}
    if optimizer_state is not None:
        meta["optimizer_step"] = int(optimizer_state.step)
        for name in sorted(optimizer_state.exp_avg):
            tensors[f"optim/{name}/exp_avg"] = optimizer_state.exp_avg[name]
            tensors[f"optim/{name}/exp_avg_sq"] = optimizer_state.exp_avg_sq[name]
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(meta_b)) + meta_b
    body += struct.pack("<I", len(tensors))
    body += b"".join(_encode_tensor(k, v) for k, v in tensors.items())
    body += struct.pack("<I", zlib.crc32(body))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("unexpected end of checkpoint data")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 16 or not buf.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic or too short)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version} (expected {VERSION})")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        numel = int(np.prod(shape)) if ndim else 1
        if tag == 2:
            raw = np.frombuffer(r.take(2 * numel), dtype="<u2")
            t = torch.from_numpy(bf16_decode(raw).copy()).to(torch.bfloat16)
        else:
            dt = np.dtype(_DTYPES[tag])
            t = torch.from_numpy(np.frombuffer(r.take(dt.itemsize * numel), dtype=dt).astype(dt.newbyteorder("=")))
        tensors[name] = t.reshape(shape)
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: trailing bytes after tensor table")

    adapters = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    optim = {k[len("optim/") :]: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(
        adapters=adapters,
        iteration=int(meta.get("iteration", 0)),
        config_digest=meta.get("config", ""),
        optimizer=optim,
        optimizer_step=int(meta.get("optimizer_step", 0)),
        meta=meta,
    )
