"""Task encoders between physical supervision maps and the 3-channel [-1, 1] representation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import SQRT, Mapping
from .tensorio import DenseMap


class DegenerateRangeError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


def _hw1(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def replicate3(x: np.ndarray) -> np.ndarray:
    return np.repeat(_hw1(x)[:, :, :1], 3, axis=2)


# ---------------------------------------------------------------- depth


@dataclass(frozen=True)
class DepthEncoding:
    """Percentile bounds of the mapped depth, plus the mapping that produced them."""

    p_lo: float
    p_hi: float
    mapping: Mapping = SQRT

    def __post_init__(self):
        if not self.p_hi > self.p_lo:
            raise DegenerateRangeError(f"p_hi ({self.p_hi}) must exceed p_lo ({self.p_lo})")

    def to_meta(self) -> dict[str, str]:
        return {"enc_p2": repr(self.p_lo), "enc_p98": repr(self.p_hi), "enc_mapping": self.mapping.label}

    @classmethod
    def from_meta(cls, meta) -> "DepthEncoding":
        mapping = Mapping.parse(meta.get("enc_mapping", "sqrt"))
        return cls(float(meta["enc_p2"]), float(meta["enc_p98"]), mapping)


def depth_validity(y) -> np.ndarray:
    y = _hw1(y)[:, :, 0]
    return np.isfinite(y) & (y > 0)


def depth_encode(y, mask=None, mapping: Mapping = SQRT, clamp: bool = True,
                 percentiles: tuple[float, float] = (2.0, 98.0)) -> tuple[np.ndarray, DepthEncoding]:
    """Map depth (meters) to a 3-channel [-1, 1] tensor.

    Percentiles of the mapped depth are taken over valid pixels only. Invalid
    pixels are written as -1.
    """
    y = _hw1(y)[:, :, 0]
    valid = depth_validity(y)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).reshape(y.shape)
    if valid.sum() < 2:
        raise DegenerateRangeError("need at least two valid depth pixels")
    z = np.zeros_like(y)
    z[valid] = mapping.forward(y[valid])
    p_lo, p_hi = np.percentile(z[valid], percentiles)
    if not p_hi > p_lo:
        raise DegenerateRangeError(f"percentiles coincide at {p_lo}")
    enc = DepthEncoding(float(p_lo), float(p_hi), mapping)
    norm = ((z - p_lo) / (p_hi - p_lo) - 0.5) * 2.0
    if clamp:
        norm = np.clip(norm, -1.0, 1.0)
    norm[~valid] = -1.0
    return replicate3(norm), enc


def _depth_mapped(m, enc: DepthEncoding) -> np.ndarray:
    mean = _hw1(m).mean(axis=2)
    return (mean / 2.0 + 0.5) * (enc.p_hi - enc.p_lo) + enc.p_lo


def depth_decode(m, enc: DepthEncoding) -> np.ndarray:
    """Channel mean, undo the percentile normalisation, invert the mapping. Returns (H, W, 1)."""
    return enc.mapping.inverse(_depth_mapped(m, enc))[:, :, None]


def depth_decode_vjp(m, enc: DepthEncoding, grad_depth) -> np.ndarray:
    """Pull a gradient w.r.t. decoded depth back onto the 3-channel code ``m``."""
    z = _depth_mapped(m, enc)
    dz = enc.mapping.inverse_derivative(z) * _hw1(grad_depth)[:, :, 0]
    per_channel = dz * (enc.p_hi - enc.p_lo) / 2.0 / _hw1(m).shape[2]
    return np.repeat(per_channel[:, :, None], _hw1(m).shape[2], axis=2)


# ---------------------------------------------------------------- normals


def normal_encode(n, mask=None) -> np.ndarray:
    """Unit-normalise each pixel vector. Masked-out pixels become (0, 0, 1)."""
    n = np.asarray(n, dtype=np.float64)
    norms = np.linalg.norm(n, axis=-1)
    valid = np.ones(norms.shape, bool) if mask is None else np.asarray(mask, bool).reshape(norms.shape)
    if np.any(valid & ~(norms > 0)):
        raise ZeroNormError("zero-length normal on a valid pixel")
    out = np.zeros_like(n)
    out[..., 2] = 1.0
    out[valid] = n[valid] / norms[valid][:, None]
    return out


# ---------------------------------------------------------------- matting


def matting_encode(alpha) -> np.ndarray:
    a = _hw1(alpha)[:, :, 0]
    if a.min() < 0 or a.max() > 1:
        raise ValueError("alpha must lie in [0, 1]")
    return replicate3((a > 0.5).astype(np.float64) * 2.0 - 1.0)


def matting_decode(m, clip: bool = True) -> np.ndarray:
    a = (_hw1(m).mean(axis=2) + 1.0) / 2.0
    if clip:
        a = np.clip(a, 0.0, 1.0)
    return a[:, :, None]


# ---------------------------------------------------------------- rgb


def rgb_normalize(x, value_range: tuple[float, float] | None = None) -> np.ndarray:
    """Affine map of the declared input range onto [-1, 1]."""
    if value_range is None and isinstance(x, DenseMap):
        value_range = x.value_range if isinstance(x.value_range, tuple) else None
    if value_range is None:
        raise ValueError("rgb_normalize needs a declared input range, e.g. (0, 255) or (0, 1)")
    lo, hi = (float(v) for v in value_range)
    if not hi > lo:
        raise ValueError(f"bad range {value_range}")
    arr = np.asarray(x, dtype=np.float64)
    return (arr - lo) / (hi - lo) * 2.0 - 1.0


def rgb_denormalize(x, value_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    lo, hi = value_range
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo


# ---------------------------------------------------------------- point prompts


@dataclass(frozen=True)
class PointPrompt:
    points: tuple[tuple[int, int], ...]
    sigma: float = 8.0

    def validate(self, h: int, w: int) -> None:
        if not self.points:
            raise ValueError("point prompt needs at least one point")
        if len(self.points) > 10:
            raise ValueError("at most 10 prompt points")
        for r, c in self.points:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"prompt point ({r}, {c}) outside {h}x{w} image")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def to_meta(self) -> dict[str, str]:
        return {"points": ";".join(f"{r}:{c}" for r, c in self.points), "sigma": repr(self.sigma)}

    @classmethod
    def from_meta(cls, meta) -> "PointPrompt":
        pts = tuple(tuple(int(v) for v in item.split(":")) for item in meta["points"].split(";") if item)
        return cls(pts, float(meta.get("sigma", 8.0)))


def point_prompt_mask(prompt: PointPrompt, h: int, w: int) -> np.ndarray:
    """Max of Gaussian bumps at the prompt points, mapped to [-1, 1]. Shape (h, w, 1)."""
    prompt.validate(h, w)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    mask = np.zeros((h, w))
    for r, c in prompt.points:
        bump = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * prompt.sigma ** 2))
        np.maximum(mask, bump, out=mask)
    return (mask * 2.0 - 1.0)[:, :, None]


def sample_point_prompt(rng, alpha, max_points: int = 10, threshold: float = 0.9,
                        sigma: float = 8.0) -> PointPrompt | None:
    """Draw 1..max_points distinct foreground pixels uniformly; None when there is no foreground."""
    a = _hw1(alpha)[:, :, 0]
    rows, cols = np.nonzero(a > threshold)
    if rows.size == 0:
        return None
    k = min(rng.integers(1, max_points + 1), rows.size)
    pick = rng.permutation(rows.size)[:k]
    return PointPrompt(tuple((int(rows[i]), int(cols[i])) for i in sorted(pick)), sigma)
