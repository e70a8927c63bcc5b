"""Flow-matching and pixel-space consistency losses with explicit gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction argument. L1 subgradients at zero are taken as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .encoding import ZeroNormError


class DegenerateFitError(ValueError):
    pass


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def _mask_like(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.broadcast_to(np.asarray(mask, dtype=bool).reshape(shape), shape)


# ---------------------------------------------------------------- flow matching


def fm_loss(v_pred, v_true) -> tuple[float, np.ndarray]:
    v_pred = np.asarray(v_pred, dtype=np.float64)
    v_true = np.asarray(v_true, dtype=np.float64)
    _check_shapes(v_pred, v_true)
    diff = v_pred - v_true
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- depth


@dataclass(frozen=True)
class AlignmentFit:
    s: float
    t_shift: float

    def apply(self, pred):
        return self.s * np.asarray(pred, dtype=np.float64) + self.t_shift


def fit_scale_shift(pred, gt, mask=None) -> AlignmentFit:
    """Least-squares (s, t) minimising sum (s*pred + t - gt)^2 over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    valid = _mask_like(mask, pred.shape)
    a, y = pred[valid], gt[valid]
    if a.size < 2:
        raise DegenerateFitError("alignment needs at least two valid pixels")
    da = a - a.mean()
    sxx = float(np.dot(da, da))
    if sxx <= 1e-300 or np.ptp(a) == 0:
        raise DegenerateFitError("prediction is constant over the valid pixels")
    s = float(np.dot(da, y - y.mean())) / sxx
    return AlignmentFit(s, float(y.mean() - s * a.mean()))


def ssi_l1_depth(y_hat, y, mask=None, fit_grad: str = "full") -> tuple[float, np.ndarray]:
    """Mean |y - (s*y_hat + t)| after the least-squares scale/shift fit.

    ``fit_grad="full"`` differentiates through the closed-form (s, t);
    ``"const"`` treats the fit as a constant.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_shapes(y_hat, y)
    valid = _mask_like(mask, y_hat.shape)
    fit = fit_scale_shift(y_hat, y, valid)
    a, g = y_hat[valid], y[valid]
    n = a.size
    resid = g - fit.s * a - fit.t_shift
    value = float(np.mean(np.abs(resid)))

    sgn = np.sign(resid)
    if fit_grad == "const":
        grad_valid = -fit.s * sgn / n
    elif fit_grad == "full":
        da = a - a.mean()
        dg = g - g.mean()
        sxx = float(np.dot(da, da))
        ds = (dg - 2.0 * fit.s * da) / sxx          # d s / d a_k
        grad_valid = (-fit.s * (sgn - sgn.sum() / n) - ds * float(np.dot(sgn, da))) / n
    else:
        raise ValueError(f"unknown fit_grad mode {fit_grad!r}")
    grad = np.zeros_like(y_hat)
    grad[valid] = grad_valid
    return value, grad


# ---------------------------------------------------------------- normals


def _unit(v: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError(f"zero-length {what} vector")
    return v / norms, norms


def angular_loss(n_hat, n, mask=None) -> tuple[float, np.ndarray]:
    """Mean atan2(|n x n_hat|, n . n_hat) over valid pixels.

    ``n_hat`` is renormalised internally and the gradient is taken w.r.t.
    the raw input, so it stays bounded even for (anti)parallel vectors.
    """
    n_hat = np.asarray(n_hat, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    _check_shapes(n_hat, n)
    valid = _mask_like(mask, n_hat.shape[:-1])
    p, q = n_hat[valid], n[valid]
    u, r = _unit(p, "prediction")
    q, _ = _unit(q, "target")

    cross = np.cross(q, u)
    sin = np.linalg.norm(cross, axis=-1)
    cos = np.sum(q * u, axis=-1)
    theta = np.arctan2(sin, cos)
    count = theta.size

    safe = sin > 0
    dsin = np.zeros_like(u)
    dsin[safe] = np.cross(cross[safe], q[safe]) / sin[safe][:, None]
    denom = (sin ** 2 + cos ** 2)[:, None]
    dtheta_du = (cos[:, None] * dsin - sin[:, None] * q) / denom
    # project through u = p / |p|
    radial = np.sum(dtheta_du * u, axis=-1, keepdims=True)
    dtheta_dp = (dtheta_du - radial * u) / r

    grad = np.zeros_like(n_hat)
    grad[valid] = dtheta_dp / count
    return float(theta.mean()), grad


def arccos_loss_reference(n_hat, n, mask=None) -> tuple[float, np.ndarray]:
    """Naive mean arccos(n . n_hat); the gradient blows up near collinearity."""
    n_hat = np.asarray(n_hat, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    _check_shapes(n_hat, n)
    valid = _mask_like(mask, n_hat.shape[:-1])
    p, q = n_hat[valid], n[valid]
    dot = np.clip(np.sum(p * q, axis=-1), -1.0, 1.0)
    count = dot.size
    with np.errstate(divide="ignore"):
        factor = -1.0 / np.sqrt(1.0 - dot ** 2)
    grad = np.zeros_like(n_hat)
    grad[valid] = factor[:, None] * q / count
    return float(np.arccos(dot).mean()), grad


# ---------------------------------------------------------------- matting


@dataclass(frozen=True)
class RegionBreakdown:
    unknown: float | None
    known: float | None

    @property
    def flags(self) -> tuple[str, ...]:
        out = []
        if self.unknown is None:
            out.append("empty_unknown")
        if self.known is None:
            out.append("empty_known")
        return tuple(out)


def matting_region_l1(a_hat, a, unknown) -> tuple[float, np.ndarray, RegionBreakdown]:
    """Mean L1 over the unknown band plus mean L1 over the known pixels.

    ``unknown`` is a boolean mask (True = transition region). An empty
    region contributes nothing and is reported as None in the breakdown.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_shapes(a_hat, a)
    u_mask = _mask_like(unknown, a_hat.shape)
    diff = a_hat - a
    grad = np.zeros_like(a_hat)
    terms = {}
    for name, region in (("unknown", u_mask), ("known", ~u_mask)):
        count = int(region.sum())
        if count == 0:
            terms[name] = None
            continue
        terms[name] = float(np.abs(diff[region]).mean())
        grad[region] = np.sign(diff[region]) / count
    value = sum(v for v in terms.values() if v is not None)
    return float(value), grad, RegionBreakdown(**terms)


def trimap_from_alpha(alpha, dilation_radius: int = 3) -> np.ndarray:
    """Boolean unknown-region mask around the 0.5 iso-contour of ``alpha``.

    Boundary pixels are those with a 4-neighbour on the other side of the
    threshold; the band adds every pixel closer than ``dilation_radius`` to
    a boundary pixel. Radius 0 and 1 both give the boundary pixels alone.
    """
    a = np.asarray(alpha, dtype=np.float64)
    squeeze = a.ndim == 3
    if squeeze:
        a = a[:, :, 0]
    fg = a > 0.5
    boundary = np.zeros_like(fg)
    boundary[:-1, :] |= fg[:-1, :] != fg[1:, :]
    boundary[1:, :] |= fg[1:, :] != fg[:-1, :]
    boundary[:, :-1] |= fg[:, :-1] != fg[:, 1:]
    boundary[:, 1:] |= fg[:, 1:] != fg[:, :-1]
    if not boundary.any() or dilation_radius <= 1:
        band = boundary
    else:
        dist = ndimage.distance_transform_edt(~boundary)
        band = dist < dilation_radius
    return band[:, :, None] if squeeze else band


# ---------------------------------------------------------------- curriculum weight


def adaptive_lambda(l_fm: float, l_cons: float, step: int, n_step: int, eps: float = 1e-3,
                    cap: float | None = None) -> float:
    """Loss-ratio weight, zero through the first ``n_step`` steps then ramping linearly.

    Inputs are plain floats, so no gradient can reach the ratio.
    """
    if n_step < 1:
        raise ValueError("n_step must be >= 1")
    ramp = max(0.0, step / n_step - 1.0)
    lam = abs(float(l_fm)) / (abs(float(l_cons)) + eps) * ramp
    if cap is not None:
        lam = min(lam, cap)
    return lam


def angle_degrees(n_hat, n) -> np.ndarray:
    """Per-pixel angle between vector fields in degrees (atan2 form)."""
    p = np.asarray(n_hat, dtype=np.float64)
    q = np.asarray(n, dtype=np.float64)
    cross = np.linalg.norm(np.cross(p, q), axis=-1)
    dot = np.sum(p * q, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


__all__ = [
    "AlignmentFit", "DegenerateFitError", "LossReport", "RegionBreakdown", "ZeroNormError",
    "adaptive_lambda", "angle_degrees", "angular_loss", "arccos_loss_reference",
    "fit_scale_shift", "fm_loss", "matting_region_l1", "ssi_l1_depth", "trimap_from_alpha",
]


@dataclass
class LossReport:
    step: int
    l_fm: float
    l_cons: float
    lam: float
    total: float
    task: str = "depth"
    region_breakdown: RegionBreakdown | None = None

    CSV_HEADER = "step,l_fm,l_cons,lambda,total"

    def csv_row(self) -> str:
        return f"{self.step},{self.l_fm!r},{self.l_cons!r},{self.lam!r},{self.total!r}"
