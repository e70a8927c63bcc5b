"""Evaluation metrics for depth, normals and matting, plus average-rank aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .encoding import ZeroNormError
from .losses import fit_scale_shift


def _valid(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, bool)
    return np.broadcast_to(np.asarray(mask, bool).reshape(shape), shape)


# ---------------------------------------------------------------- depth


def align_depth(y_hat, y, mask=None) -> np.ndarray:
    """Least-squares scale/shift alignment of a raw prediction onto ``y``."""
    return fit_scale_shift(y_hat, y, mask).apply(y_hat)


def absrel(y_hat, y, mask=None, align: bool = False) -> float:
    """Mean |y_hat - y| / y over valid pixels (absolute value; see README)."""
    y_hat = np.asarray(y_hat, np.float64)
    y = np.asarray(y, np.float64)
    valid = _valid(mask, y.shape) & (y > 0)
    if not valid.any():
        raise ValueError("no valid pixels")
    if align:
        y_hat = align_depth(y_hat, y, valid)
    return float(np.mean(np.abs(y_hat[valid] - y[valid]) / y[valid]))


def delta1(y_hat_align, y, mask=None, threshold: float = 1.25) -> float:
    """Fraction of valid pixels with max(y_hat / y, y / y_hat) strictly below 1.25."""
    p = np.asarray(y_hat_align, np.float64)
    y = np.asarray(y, np.float64)
    valid = _valid(mask, y.shape)
    p, y = p[valid], y[valid]
    if p.size == 0:
        raise ValueError("no valid pixels")
    if np.any(p <= 0) or np.any(y <= 0):
        raise ValueError("delta1 needs positive depths")
    ratio = np.maximum(p / y, y / p)
    return float(np.mean(ratio < threshold))


def depth_metrics(y_hat_raw, y, mask=None, clip_range: tuple[float, float] | None = None) -> dict[str, float]:
    """Align, optionally clip into the valid depth range, then AbsRel and delta1."""
    y = np.asarray(y, np.float64)
    valid = _valid(mask, y.shape) & (y > 0)
    aligned = align_depth(y_hat_raw, y, valid)
    if clip_range is not None:
        aligned = np.clip(aligned, *clip_range)
    else:
        aligned = np.maximum(aligned, 1e-6)
    return {"absrel": absrel(aligned, y, valid), "delta1": delta1(aligned, y, valid)}


# ---------------------------------------------------------------- normals


def normal_metrics(n_hat, n, mask=None, threshold_deg: float = 11.25) -> tuple[float, float]:
    """(mean angular error in degrees, fraction of pixels below ``threshold_deg``)."""
    p = np.asarray(n_hat, np.float64)
    q = np.asarray(n, np.float64)
    valid = _valid(mask, p.shape[:-1])
    p, q = p[valid], q[valid]
    if p.size == 0:
        raise ValueError("no valid pixels")
    pn = np.linalg.norm(p, axis=-1)
    qn = np.linalg.norm(q, axis=-1)
    if np.any(pn == 0) or np.any(qn == 0):
        raise ZeroNormError("zero-length normal")
    p = p / pn[:, None]
    q = q / qn[:, None]
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(p, q), axis=-1), np.sum(p * q, axis=-1)))
    return float(ang.mean()), float(np.mean(ang < threshold_deg))


# ---------------------------------------------------------------- matting


def _gauss(x, sigma):
    return np.exp(-x ** 2 / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))


def gauss_gradient(im: np.ndarray, sigma: float = 1.4) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-derivative image gradients with the kernel used by common matting benchmarks."""
    eps = 1e-2
    half = int(math.ceil(sigma * math.sqrt(-2 * math.log(math.sqrt(2 * math.pi) * sigma * eps))))
    u = np.arange(-half, half + 1, dtype=np.float64)
    hx = _gauss(u, sigma)[:, None] * (-u * _gauss(u, sigma) / sigma ** 2)[None, :]
    hx /= np.sqrt(np.sum(hx * hx))
    gx = ndimage.convolve(im, hx, mode="nearest")
    gy = ndimage.convolve(im, hx.T, mode="nearest")
    return gx, gy


def _largest_component(binary: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(binary)  # 4-connectivity
    if count == 0:
        return np.zeros_like(binary, bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


def connectivity_error(pred: np.ndarray, gt: np.ndarray, region: np.ndarray, step: float = 0.1) -> float:
    thresholds = np.arange(0.0, 1.0 + step / 2, step)
    level = np.full(pred.shape, -1.0)
    for i in range(1, len(thresholds)):
        omega = _largest_component((pred >= thresholds[i]) & (gt >= thresholds[i]))
        flag = (level == -1) & ~omega
        level[flag] = thresholds[i - 1]
    level[level == -1] = 1.0
    pred_d = pred - level
    gt_d = gt - level
    pred_phi = 1 - pred_d * (pred_d >= 0.15)
    gt_phi = 1 - gt_d * (gt_d >= 0.15)
    return float(np.sum(np.abs(pred_phi - gt_phi)[region]))


def matting_metrics(a_hat, a, region=None) -> dict[str, float]:
    """MSE and MAD as pixel means; SAD, Grad and Conn as sums scaled by 1e-3.

    ``region`` restricts evaluation (e.g. to the trimap's unknown band);
    None evaluates every pixel.
    """
    p = np.asarray(a_hat, np.float64)
    g = np.asarray(a, np.float64)
    if p.ndim == 3:
        p, g = p[..., 0], g[..., 0]
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.min() < 0 or p.max() > 1 or g.min() < 0 or g.max() > 1:
        raise ValueError("alpha values must lie in [0, 1]")
    reg = _valid(None if region is None else np.asarray(region, bool).reshape(p.shape), p.shape)
    n = int(reg.sum())
    if n == 0:
        raise ValueError("empty evaluation region")
    diff = (p - g)[reg]
    px, py = gauss_gradient(p)
    gx, gy = gauss_gradient(g)
    amp_err = (np.hypot(px, py) - np.hypot(gx, gy)) ** 2
    return {
        "mse": float(np.mean(diff ** 2)),
        "mad": float(np.mean(np.abs(diff))),
        "sad": float(np.sum(np.abs(diff)) / 1000.0),
        "grad": float(np.sum(amp_err[reg]) / 1000.0),
        "conn": connectivity_error(p, g, reg) / 1000.0,
    }


# ---------------------------------------------------------------- ranking


LOWER_IS_BETTER = {"absrel": True, "delta1": False, "mean_angle_deg": True, "pct_11_25": False,
                   "mse": True, "mad": True, "sad": True, "grad": True, "conn": True}


def avg_rank(table: dict[str, dict[str, float | None]], lower_is_better: dict[str, bool] | None = None) -> dict[str, float]:
    """Average per-column rank of each method (1 = best, ties share the mean rank).

    Missing or NaN entries rank below every present entry of that column.
    """
    methods = list(table)
    if len(methods) < 2:
        raise ValueError("ranking needs at least two methods")
    columns = sorted({c for row in table.values() for c in row})
    directions = {**LOWER_IS_BETTER, **(lower_is_better or {})}
    ranks = {m: [] for m in methods}
    for col in columns:
        lower = directions.get(col, True)
        keyed = []
        for m in methods:
            v = table[m].get(col)
            missing = v is None or (isinstance(v, float) and math.isnan(v))
            keyed.append(math.inf if missing else (v if lower else -v))
        for m, r in zip(methods, rankdata(keyed, method="average")):
            ranks[m].append(float(r))
    return {m: float(np.mean(r)) for m, r in ranks.items()}


# ---------------------------------------------------------------- results


@dataclass
class EvalResult:
    task: str
    metrics: dict[str, float]
    count: int
    per_image: list[dict[str, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        keys = list(self.metrics)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image"] + keys)
        for i, row in enumerate(self.per_image):
            writer.writerow([i] + [repr(float(row[k])) for k in keys])
        writer.writerow(["mean"] + [repr(float(self.metrics[k])) for k in keys])
        return buf.getvalue()

    def table(self, title: str = "") -> str:
        keys = list(self.metrics)
        head = " | ".join(f"{k:>14}" for k in keys)
        vals = " | ".join(f"{self.metrics[k]:>14.6f}" for k in keys)
        lines = [title] if title else []
        lines += [f"{self.task} (n={self.count})", head, vals]
        return "\n".join(lines)


def aggregate(task: str, rows: list[dict[str, float]]) -> EvalResult:
    if not rows:
        raise ValueError("nothing to aggregate")
    keys = list(rows[0])
    return EvalResult(task, {k: float(np.mean([r[k] for r in rows])) for k in keys}, len(rows), rows)
