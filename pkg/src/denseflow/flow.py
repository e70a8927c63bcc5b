"""Rectified-flow path, annealed pyramid noise and the Euler sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensorio import SeededRng, gaussian_noise

VelocityFn = Callable[[np.ndarray, Sequence[np.ndarray], float], np.ndarray]


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def interpolate(z0, z1, t: float) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    _same_shape(z0, z1)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t_arr) * z0 + t_arr * z1


def velocity_target(z0, z1) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    _same_shape(z0, z1)
    return z1 - z0


def one_step_estimate(z_t, v, t) -> np.ndarray:
    """Endpoint reached by following ``v`` from ``z_t`` for the remaining 1 - t."""
    return np.asarray(z_t, dtype=np.float64) + (1.0 - np.asarray(t, dtype=np.float64)) * np.asarray(v, dtype=np.float64)


@dataclass
class FlowState:
    z_t: np.ndarray
    t: float
    z0_seed: int
    conditioning: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")


# ---------------------------------------------------------------- pyramid noise


@dataclass(frozen=True)
class NoiseSchedule:
    levels: int = 4
    persistence0: float = 0.7

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 <= self.persistence0 < 1.0:
            raise ValueError("persistence0 must lie in [0, 1)")

    def persistence(self, t: float) -> float:
        return self.persistence0 * (1.0 - t)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights, edge-clamped."""
    if n_in == 1:
        return np.ones((n_out, 1))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


class PyramidNoise:
    """Octave components for one generator and shape; evaluate at any t.

    Octave 0 is drawn first from ``rng`` so that with a single active octave
    the result equals :func:`gaussian_noise` on the same generator. The sum
    is divided by its exact pooled standard deviation, which follows from
    the interpolation weights.
    """

    def __init__(self, rng: SeededRng, shape, schedule: NoiseSchedule = NoiseSchedule()):
        h, w, c = (int(s) for s in shape)
        self.schedule = schedule
        self.octaves = [gaussian_noise(rng, (h, w, c))]
        self.octave_var = [1.0]
        for k in range(1, schedule.levels):
            hk = max(1, math.ceil(h / 2 ** k))
            wk = max(1, math.ceil(w / 2 ** k))
            up_r = bilinear_matrix(h, hk)
            up_c = bilinear_matrix(w, wk)
            octave = gaussian_noise(rng, (hk, wk, c))
            self.octaves.append(np.einsum("ri,ijc,sj->rsc", up_r, octave, up_c, optimize=True))
            self.octave_var.append(float(np.outer((up_r ** 2).sum(1), (up_c ** 2).sum(1)).mean()))

    def __call__(self, t: float) -> np.ndarray:
        pers = self.schedule.persistence(t)
        if len(self.octaves) == 1 or pers == 0.0:
            return self.octaves[0]
        noise = self.octaves[0].copy()
        variance = 1.0
        for k in range(1, len(self.octaves)):
            weight = pers ** k
            noise += weight * self.octaves[k]
            variance += weight ** 2 * self.octave_var[k]
        return noise / math.sqrt(variance)


def multires_noise(rng: SeededRng, shape, schedule: NoiseSchedule = NoiseSchedule(), t: float = 0.0) -> np.ndarray:
    """Sum of bilinearly upsampled white-noise octaves weighted by persistence(t)**k, unit variance."""
    if schedule.levels == 1 or schedule.persistence(t) == 0.0:
        return gaussian_noise(rng, shape)
    return PyramidNoise(rng, shape, schedule)(t)


# ---------------------------------------------------------------- sampler


def euler_sample(model: VelocityFn, z0, conditioning: Sequence[np.ndarray] = (), steps: int = 1) -> np.ndarray:
    """Integrate dz/dt = v(z, cond, t) from t=0 to 1 on a uniform grid.

    With ``steps=1`` this is exactly ``z0 + v(z0, cond, 0)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.asarray(z0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        v = np.asarray(model(z, conditioning, k / steps), dtype=np.float64)
        if v.shape != z.shape:
            raise ValueError(f"model returned shape {v.shape}, expected {z.shape}")
        z = z + dt * v
    return z
