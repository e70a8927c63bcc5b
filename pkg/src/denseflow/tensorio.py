"""Dense tensor container, deterministic RNG and the DTF on-disk format.

A DTF file is::

    b"DTF1" | u32 version=1 | u32 rank | rank x u32 dims | u32 dtype (0=f32) | f32 LE payload

all little-endian, payload row-major. An optional ``<path>.meta`` sidecar
holds ``key=value`` lines (``task=``, ``range_lo=``, ``range_hi=`` and any
module-specific extras such as ``enc_p2=``).
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DTF1"
VERSION = 1
DTYPE_F32 = 0

UNIT = "unit"  # value_range tag for unit-vector fields


class DTFError(Exception):
    """Base class for container errors."""


class BadMagicError(DTFError):
    pass


class TruncatedPayloadError(DTFError):
    pass


class RankError(DTFError):
    pass


class EmptyTensorError(DTFError):
    pass


class Task(str, enum.Enum):
    DEPTH = "depth"
    NORMAL = "normal"
    MATTING = "matting"
    RGB = "rgb"
    LATENT = "latent"


@dataclass(frozen=True)
class DenseMap:
    """Image-like tensor of shape (height, width, channels).

    ``value_range`` is either a ``(lo, hi)`` interval, the string ``"unit"``
    for unit-vector fields, or ``None`` when undeclared.
    """

    data: np.ndarray
    task: Task = Task.LATENT
    value_range: tuple[float, float] | str | None = None
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise RankError(f"DenseMap needs rank 3, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def validate(self, atol: float = 1e-6) -> None:
        """Raise ValueError if the declared range or task invariants are violated."""
        d = self.data
        if d.size == 0:
            raise EmptyTensorError("zero-sized DenseMap")
        if self.channels not in (1, 3) and self.task is not Task.LATENT:
            raise ValueError(f"{self.task.value} maps need 1 or 3 channels")
        if self.value_range == UNIT:
            norms = np.linalg.norm(d.astype(np.float64), axis=-1)
            if np.max(np.abs(norms - 1.0)) > 1e-5:
                raise ValueError("unit-range map has non-unit pixel vectors")
        elif isinstance(self.value_range, tuple):
            lo, hi = self.value_range
            if d.min() < lo - atol or d.max() > hi + atol:
                raise ValueError(f"values escape declared range [{lo}, {hi}]")


# ---------------------------------------------------------------- RNG


class SeededRng:
    """Counter-based generator (Philox 4x64) keyed by ``(seed, stream)``.

    Uniforms take the top 53 bits of each raw 64-bit word, so the stream is
    identical on every platform numpy supports.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def child(self, stream: int) -> "SeededRng":
        """Independent stream derived from this generator's seed."""
        mixed = (self.stream * 0x9E3779B97F4A7C15 + int(stream) + 1) & 0xFFFFFFFFFFFFFFFF
        return SeededRng(self.seed, mixed)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform on [low, high)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Integers on [low, high)."""
        u = self.uniform(size)
        out = np.floor(np.asarray(u) * (high - low)).astype(np.int64) + low
        out = np.minimum(out, high - 1)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def normal(self, size) -> np.ndarray:
        """Standard normal draws by Box-Muller on pairs of uniforms."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        bits = self.raw(2 * m) >> np.uint64(11)
        scale = 1.0 / 9007199254740992.0
        u1 = (bits[0::2].astype(np.float64) + 1.0) * scale  # (0, 1]
        u2 = bits[1::2].astype(np.float64) * scale
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(size)


def gaussian_noise(rng: SeededRng, shape, dtype=np.float64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape must be positive, got {shape}")
    return rng.normal(shape).astype(dtype)


# ---------------------------------------------------------------- DTF


def encode_dtf(array) -> bytes:
    arr = np.asarray(array)
    if arr.size == 0 or 0 in arr.shape:
        raise EmptyTensorError(f"cannot serialise zero-sized tensor {arr.shape}")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", DTYPE_F32)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + payload


def decode_dtf(buf: bytes, offset: int = 0, expect_rank: int | None = 3) -> tuple[np.ndarray, int]:
    """Parse one tensor block starting at ``offset``; return (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[offset:offset + 4]!r}")
    if len(buf) < offset + 12:
        raise TruncatedPayloadError("header truncated")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise DTFError(f"unsupported DTF version {version}")
    if expect_rank is not None and rank != expect_rank:
        raise RankError(f"expected rank {expect_rank}, file has rank {rank}")
    pos = offset + 12
    if len(buf) < pos + 4 * rank + 4:
        raise TruncatedPayloadError("dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    (dtype,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if dtype != DTYPE_F32:
        raise DTFError(f"unsupported dtype code {dtype}")
    n = int(np.prod(dims)) if rank else 1
    end = pos + 4 * n
    if len(buf) < end:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} bytes, need {4 * n}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
    return arr, end


def write_meta(path, meta: Mapping[str, object]) -> None:
    lines = [f"{k}={v}" for k, v in meta.items()]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    p = Path(str(path) + ".meta")
    if not p.exists():
        return {}
    out = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_dtf(dense: DenseMap | np.ndarray, path, extra_meta: Mapping[str, object] | None = None) -> None:
    if not isinstance(dense, DenseMap):
        dense = DenseMap(np.asarray(dense))
    Path(path).write_bytes(encode_dtf(dense.data))
    meta: dict[str, object] = {"task": dense.task.value}
    if dense.value_range == UNIT:
        meta["range"] = UNIT
    elif isinstance(dense.value_range, tuple):
        meta["range_lo"] = repr(float(dense.value_range[0]))
        meta["range_hi"] = repr(float(dense.value_range[1]))
    meta.update(dense.meta)
    if extra_meta:
        meta.update(extra_meta)
    write_meta(path, meta)


def read_dtf(path) -> DenseMap:
    buf = Path(path).read_bytes()
    arr, end = decode_dtf(buf)
    if end != len(buf):
        raise DTFError(f"{len(buf) - end} trailing bytes after payload")
    meta = read_meta(path)
    task = Task(meta.pop("task", Task.LATENT.value))
    value_range: tuple[float, float] | str | None = None
    if meta.get("range") == UNIT:
        meta.pop("range")
        value_range = UNIT
    elif "range_lo" in meta and "range_hi" in meta:
        value_range = (float(meta.pop("range_lo")), float(meta.pop("range_hi")))
    return DenseMap(arr, task=task, value_range=value_range, meta=meta)
