"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AEGN"  u32 version
    u32 n    n bytes of UTF-8 ``key = value`` metadata
    u32 count
    count x { u16 name_len, name, u8 ndim, ndim x u32 dim, f32 values }
    32 bytes SHA-256 of everything above

Tensor names are ``param/<name>``, ``buffer/<name>``, ``adam/<group>/m/<name>``
and ``adam/<group>/v/<name>``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AEGN"
VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    meta = "\n".join(f"{k} = {v}" for k, v in ckpt.metadata.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arr, dtype="<f4", order="C")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file body has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 8 or data[:4] != MAGIC:
        if len(data) < 4:
            raise TruncatedCheckpointError("checkpoint truncated: missing header")
        raise BadMagicError(f"not an AEGN checkpoint (magic {data[:4]!r})")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} unsupported (expected {VERSION})")
    if len(data) < 8 + _DIGEST:
        raise TruncatedCheckpointError("checkpoint truncated: missing checksum")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    reader = _Reader(body)
    reader.pos = 8
    try:
        (meta_len,) = reader.unpack("<I")
        meta_text = reader.take(meta_len).decode("utf-8")
        (count,) = reader.unpack("<I")
        tensors = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape)
            tensors[name] = arr.astype(np.float32)
    except UnicodeDecodeError as exc:
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumMismatchError("checkpoint checksum mismatch") from exc
        raise CheckpointError(f"corrupt checkpoint text: {exc}") from exc
    if reader.pos != len(body):
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumMismatchError("checkpoint checksum mismatch")
        raise CheckpointError(f"{len(body) - reader.pos} trailing bytes after tensor table")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatchError("checkpoint checksum mismatch: payload was modified")
    metadata = {}
    for line in meta_text.splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            metadata[k.strip()] = v.strip()
    return Checkpoint(metadata, tensors)


def write(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes())


# -- model + training state ---------------------------------------------------


def _network_config_from(meta: dict[str, str]):
    from .networks import NetworkConfig

    values = {}
    for f in dataclasses.fields(NetworkConfig):
        key = f"net.{f.name}"
        if key not in meta:
            raise CheckpointError(f"checkpoint metadata lacks {key}")
        values[f.name] = float(meta[key]) if f.name == "leaky_slope" else int(meta[key])
    return NetworkConfig(**values)


def state_to_checkpoint(model, state=None) -> Checkpoint:
    meta = {f"net.{k}": str(v) for k, v in dataclasses.asdict(model.cfg).items()}
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    for name, buf in model.named_buffers():
        tensors[f"buffer/{name}"] = buf
    if state is not None:
        meta.update(
            {"state.stage": state.stage, "state.epoch": str(state.epoch), "state.global_step": str(state.global_step)}
        )
        for group, opt in state.optimizers.items():
            s = opt.state
            meta[f"adam.{group}.step"] = str(s.step_count)
            meta[f"adam.{group}.lr"] = repr(s.learning_rate)
            meta[f"adam.{group}.betas"] = f"{s.beta1!r},{s.beta2!r},{s.epsilon!r}"
            for name, m, v in zip(opt.names, s.first_moment, s.second_moment):
                tensors[f"adam/{group}/m/{name}"] = m
                tensors[f"adam/{group}/v/{name}"] = v
    return Checkpoint(meta, tensors)


def save_checkpoint(model, state, path: str | os.PathLike) -> None:
    """Write every sub-network's parameters and buffers plus optimizer moments."""
    write(state_to_checkpoint(model, state), path)


def load_checkpoint(path: str | os.PathLike, model=None):
    """Return ``(model, state)``. A fresh model is built from the stored config unless one is given."""
    from .config import TrainState
    from .networks import AEGAN
    from .optim import Adam

    ckpt = read(path)
    meta, tensors = ckpt.metadata, ckpt.tensors
    cfg = _network_config_from(meta)
    if model is None:
        model = AEGAN(cfg)
    elif model.cfg != cfg:
        raise CheckpointError(f"checkpoint geometry {cfg} does not match model geometry {model.cfg}")
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tensors[key].shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {tensors[key].shape} != model {p.shape}")
        p.data = tensors[key].copy()
    for name, buf in model.named_buffers():
        key = f"buffer/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks buffer {name}")
        buf[...] = tensors[key]

    state = None
    if "state.stage" in meta:
        state = TrainState(
            stage=meta["state.stage"], epoch=int(meta["state.epoch"]), global_step=int(meta["state.global_step"])
        )
        # keep the saved group order so a reloaded state re-serializes identically
        groups = list(dict.fromkeys(k.split(".")[1] for k in meta if k.startswith("adam.")))
        for group in groups:
            sub = model.sub(group)
            opt = Adam(sub.named_parameters(f"{group}."), lr=float(meta[f"adam.{group}.lr"]))
            b1, b2, eps = (float(x) for x in meta[f"adam.{group}.betas"].split(","))
            opt.state.beta1, opt.state.beta2, opt.state.epsilon = b1, b2, eps
            opt.state.step_count = int(meta[f"adam.{group}.step"])
            for i, name in enumerate(opt.names):
                opt.state.first_moment[i] = tensors[f"adam/{group}/m/{name}"].copy()
                opt.state.second_moment[i] = tensors[f"adam/{group}/v/{name}"].copy()
            state.optimizers[group] = opt
    return model, state
