"""Binary checkpoint container.

Layout::

    b"DICC" | u32 version | u64 header length | header (UTF-8 JSON, sorted keys)
    | float32 payloads in header order | u64 CRC-64/XZ of all preceding bytes

All integers and floats are little-endian.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .nets import NetworkParams, build_discriminator, build_generator, config_from_dict, load_state
from .tensor import OptimizerState

MAGIC = b"DICC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    generator: NetworkParams
    discriminator: NetworkParams
    opt_g: OptimizerState
    opt_d: OptimizerState
    step: int = 0
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION


def crc64_xz(data: bytes) -> int:
    return crc64.xz(data)


def _opt_meta(opt: OptimizerState) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}


def _named_arrays(ckpt: Checkpoint) -> list:
    items = []
    for tag, net in (("g", ckpt.generator), ("d", ckpt.discriminator)):
        items += [(f"{tag}.param.{n}", t.data) for n, t in net.params.items()]
        items += [(f"{tag}.buffer.{n}", a) for n, a in net.buffers.items()]
    for tag, opt in (("opt_g", ckpt.opt_g), ("opt_d", ckpt.opt_d)):
        items += [(f"{tag}.m.{n}", a) for n, a in opt.m.items()]
        items += [(f"{tag}.v.{n}", a) for n, a in opt.v.items()]
    return items


def encode(ckpt: Checkpoint) -> bytes:
    arrays = _named_arrays(ckpt)
    header = {
        "config": ckpt.config,
        "discriminator": ckpt.discriminator.config_dict(),
        "generator": ckpt.generator.config_dict(),
        "optimizers": {"g": _opt_meta(ckpt.opt_g), "d": _opt_meta(ckpt.opt_d)},
        "rng_state": ckpt.rng_state,
        "step": ckpt.step,
        "tensors": [{"dtype": "f32", "name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, ckpt.version, len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays]
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64_xz(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a partial write never replaces an existing file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise IntegrityError("file too short for checkpoint prefix", len(blob))
    magic, version, head_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    head_end = _PREFIX.size + head_len
    if head_end + 8 > len(blob):
        raise IntegrityError("truncated header", len(blob))
    try:
        header = json.loads(blob[_PREFIX.size:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable header: {exc}", _PREFIX.size) from None
    try:
        sizes = [int(np.prod(t["shape"], dtype=np.int64)) * 4 for t in header["tensors"]]
        if any(s < 0 for s in sizes):
            raise ValueError("negative dimension")
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed tensor table: {exc}", _PREFIX.size) from None
    expected = head_end + sum(sizes) + 8
    if len(blob) != expected:
        raise IntegrityError(f"payload length mismatch: file has {len(blob)} bytes, header implies {expected}",
                             min(len(blob), expected))
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if crc64_xz(blob[:-8]) != stored:
        raise IntegrityError("checksum mismatch", len(blob) - 8)

    try:
        return _restore(blob, header, head_end, sizes, version)
    except (KeyError, TypeError, ValueError) as exc:
        # checksum passed, so the writer itself produced an inconsistent header
        raise IntegrityError(f"inconsistent header: {exc}", _PREFIX.size) from None


def _restore(blob: bytes, header: dict, head_end: int, sizes: list, version: int) -> Checkpoint:
    arrays = {}
    off = head_end
    for t, size in zip(header["tensors"], sizes):
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(t["shape"]).copy()
        off += size

    gen = build_generator(config_from_dict(header["generator"]), seed=0)
    disc = build_discriminator(config_from_dict(header["discriminator"]), seed=0)
    for tag, net in (("g", gen), ("d", disc)):
        params = {n[len(tag) + 7:]: a for n, a in arrays.items() if n.startswith(f"{tag}.param.")}
        buffers = {n[len(tag) + 8:]: a for n, a in arrays.items() if n.startswith(f"{tag}.buffer.")}
        load_state(net, params, buffers)
    opts = {}
    for tag in ("g", "d"):
        meta = header["optimizers"][tag]
        opt = OptimizerState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
                             step=meta["step"])
        pre = f"opt_{tag}."
        opt.m = {n[len(pre) + 2:]: a for n, a in arrays.items() if n.startswith(pre + "m.")}
        opt.v = {n[len(pre) + 2:]: a for n, a in arrays.items() if n.startswith(pre + "v.")}
        opts[tag] = opt
    return Checkpoint(gen, disc, opts["g"], opts["d"], step=header["step"], config=header["config"],
                      rng_state=header["rng_state"], version=version)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def read_header(path) -> dict:
    blob = Path(path).read_bytes()
    _, _, head_len = _PREFIX.unpack_from(blob, 0)
    return json.loads(blob[_PREFIX.size:_PREFIX.size + head_len])
