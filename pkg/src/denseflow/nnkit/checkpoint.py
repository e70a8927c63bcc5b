"""Binary checkpoint container for VelocityNet parameters.

Layout (little-endian):
    b"E2PC" | u32 version | 8-byte net-config digest | u32 step | u32 tensor count
    | u32 len + utf8 net-config JSON | u32 len + utf8 extra JSON
    | per tensor: u32 name len + utf8 name + DTF tensor block
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensorio import DTFError, decode_dtf, encode_dtf
from .net import NetConfig, VelocityNet

MAGIC = b"E2PC"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: NetConfig
    step: int
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)   # e.g. the trainer config that produced it

    def build(self) -> VelocityNet:
        net = VelocityNet(self.config)
        load_into(net, self)
        return net


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(net: VelocityNet, step: int = 0, extra: dict | None = None) -> bytes:
    cfg = net.config
    out = [MAGIC, struct.pack("<I", VERSION), cfg.digest(), struct.pack("<II", step, len(net.params)),
           _blob(cfg.to_json()), _blob(json.dumps(extra or {}, sort_keys=True))]
    for name in sorted(net.params):
        value = net.params[name]
        if not np.array_equal(value.astype(np.float32), value):
            # tensor blocks are float32; refuse rather than silently lose bits
            raise CheckpointError(f"{name} is not exactly representable in float32")
        out.append(_blob(name))
        # DTF has no rank-0 form; biases are rank 1 already
        out.append(encode_dtf(value))
    return b"".join(out)


def _read_blob(buf: bytes, pos: int) -> tuple[str, int]:
    if len(buf) < pos + 4:
        raise CorruptCheckpointError("truncated length field")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n:
        raise CorruptCheckpointError("truncated string")
    try:
        return buf[pos:pos + n].decode("utf-8"), pos + n
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError("invalid utf-8") from exc


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {buf[:4]!r}")
    if len(buf) < 24:
        raise CorruptCheckpointError("header truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    digest = buf[8:16]
    step, count = struct.unpack_from("<II", buf, 16)
    cfg_text, pos = _read_blob(buf, 24)
    extra_text, pos = _read_blob(buf, pos)
    try:
        config = NetConfig.from_json(cfg_text)
        extra = json.loads(extra_text)
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptCheckpointError(f"bad config block: {exc}") from exc
    if config.digest() != digest:
        raise HashMismatchError("stored config digest does not match the embedded config")
    params = {}
    for _ in range(count):
        name, pos = _read_blob(buf, pos)
        try:
            arr, pos = decode_dtf(buf, pos, expect_rank=None)
        except DTFError as exc:
            raise CorruptCheckpointError(f"tensor {name!r}: {exc}") from exc
        params[name] = arr
    if pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - pos} trailing bytes")
    return Checkpoint(config, step, params, extra)


def save_checkpoint(net: VelocityNet, path, step: int = 0, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(net, step, extra))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_into(net: VelocityNet, ckpt: Checkpoint) -> VelocityNet:
    """Copy checkpoint tensors into ``net``; config and every shape must agree."""
    if ckpt.config.digest() != net.config.digest():
        raise HashMismatchError("checkpoint was written for a different net config")
    expected = net.param_shapes()
    if set(expected) != set(ckpt.params):
        raise ShapeMismatchError(f"parameter names differ: {sorted(set(expected) ^ set(ckpt.params))}")
    for name, shape in expected.items():
        if ckpt.params[name].shape != shape:
            raise ShapeMismatchError(f"{name}: checkpoint {ckpt.params[name].shape}, net {shape}")
    for name in expected:
        net.params[name] = ckpt.params[name].astype(net.dtype)
    return net
