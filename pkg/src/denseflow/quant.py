"""bfloat16 rounding and relative-error analysis of depth mappings.

The analytic error of a mapping ``g`` over ``[y_min, y_max]`` is

    E(g) = 1 / (512 (y_max - y_min)) * integral (g(y_max) - g(y_min)) / (y g'(y)) dy

i.e. the worst-case bf16 step 1/256 on (-1, 1), scaled back through the
[-1, 1] normalisation (half-width) and the mapping derivative, averaged
over the range. Errors are reported as fractions; ``*_pp`` fields are
percentage points.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

BF16_MANTISSA_BITS = 7
BF16_MIN_NORMAL = 2.0 ** -126
BF16_MAX = (2.0 - 2.0 ** -7) * 2.0 ** 127


def bf16_round(x):
    """Round to the nearest bfloat16 value, ties to even.

    Works on scalars and arrays of any float dtype without an intermediate
    float32 rounding. Subnormal results flush to signed zero.
    """
    arr = np.asarray(x, dtype=np.float64)
    mant, expo = np.frexp(arr)  # arr = mant * 2**expo, |mant| in [0.5, 1)
    scale = 2.0 ** (BF16_MANTISSA_BITS + 1)
    out = np.ldexp(np.rint(mant * scale), expo - (BF16_MANTISSA_BITS + 1))
    out = np.where(np.abs(out) < BF16_MIN_NORMAL, np.copysign(0.0, arr), out)
    with np.errstate(over="ignore"):
        # anything that rounds above the largest finite bf16 becomes inf
        out = np.where(np.abs(out) > BF16_MAX, np.copysign(np.inf, arr), out)
    if np.ndim(x) == 0:
        return float(out)
    return out


def bf16_bits(x) -> np.ndarray:
    """16-bit encoding of a float32 value, round-to-nearest-even on the bit pattern."""
    f = np.asarray(x, dtype=np.float32)
    u = f.view(np.uint32).astype(np.uint64)
    lsb = (u >> np.uint64(16)) & np.uint64(1)
    rounded = (u + np.uint64(0x7FFF) + lsb) >> np.uint64(16)
    return rounded.astype(np.uint16)


def bf16_from_bits(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return b.view(np.float32).astype(np.float64)


def quant_step(d: float) -> float:
    """Spacing between bf16(d) and its successor (d > 0, normal range)."""
    if d <= 0:
        raise ValueError("quant_step is defined for positive values")
    _, e = math.frexp(bf16_round(d))
    return 2.0 ** (e - 1 - BF16_MANTISSA_BITS)


def max_quant_step_unit_interval() -> float:
    """Largest gap between consecutive bf16 values inside (-1, 1)."""
    bits = np.arange(0x0080, 0x3F81, dtype=np.uint16)  # positive normals up to 1.0
    values = bf16_from_bits(bits)
    return float(np.max(np.diff(values)))


# ---------------------------------------------------------------- mappings


class MappingKind(str, enum.Enum):
    UNIFORM = "uni"
    SQRT = "sqrt"
    LOG = "log"
    POWER = "power"


@dataclass(frozen=True)
class Mapping:
    kind: MappingKind
    p: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "Mapping":
        """Parse ``uni``, ``sqrt``, ``log`` or ``power:P``."""
        text = text.strip().lower()
        if text.startswith("power:"):
            p = float(text.split(":", 1)[1])
            if p <= 0:
                raise ValueError("power mapping needs p > 0")
            return cls(MappingKind.POWER, p)
        aliases = {"uni": "uni", "uniform": "uni", "sqrt": "sqrt", "log": "log"}
        if text not in aliases:
            raise ValueError(f"unknown mapping {text!r}")
        return cls(MappingKind(aliases[text]))

    @property
    def label(self) -> str:
        if self.kind is MappingKind.POWER:
            return f"power:{self.p:g}"
        return self.kind.value

    def forward(self, y):
        y = np.asarray(y, dtype=np.float64)
        k = self.kind
        if k is MappingKind.UNIFORM:
            return y
        if k is MappingKind.SQRT:
            return np.sqrt(y)
        if k is MappingKind.LOG:
            return np.log(y)
        return y ** self.p

    def derivative(self, y):
        y = np.asarray(y, dtype=np.float64)
        k = self.kind
        if k is MappingKind.UNIFORM:
            return np.ones_like(y)
        if k is MappingKind.SQRT:
            return 0.5 / np.sqrt(y)
        if k is MappingKind.LOG:
            return 1.0 / y
        return self.p * y ** (self.p - 1.0)

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        k = self.kind
        if k is MappingKind.UNIFORM:
            return z
        if k is MappingKind.SQRT:
            return np.maximum(z, 0.0) ** 2
        if k is MappingKind.LOG:
            return np.exp(z)
        return np.maximum(z, 0.0) ** (1.0 / self.p)

    def inverse_derivative(self, z):
        """d inverse / dz, used when backpropagating through depth decoding."""
        z = np.asarray(z, dtype=np.float64)
        k = self.kind
        if k is MappingKind.UNIFORM:
            return np.ones_like(z)
        if k is MappingKind.SQRT:
            return 2.0 * np.maximum(z, 0.0)
        if k is MappingKind.LOG:
            return np.exp(z)
        zp = np.maximum(z, 0.0)
        return (1.0 / self.p) * zp ** (1.0 / self.p - 1.0)


UNIFORM = Mapping(MappingKind.UNIFORM)
SQRT = Mapping(MappingKind.SQRT)
LOG = Mapping(MappingKind.LOG)


def power(p: float) -> Mapping:
    return Mapping(MappingKind.POWER, float(p))


# ---------------------------------------------------------------- analytic error


def _check_range(y_min: float, y_max: float) -> None:
    if not (0 < y_min < y_max) or not math.isfinite(y_max):
        raise ValueError(f"degenerate depth range [{y_min}, {y_max}]")


def simpson(values: np.ndarray, h: float) -> float:
    """Composite Simpson rule on an odd number of equally spaced samples."""
    n = values.shape[0] - 1
    if n < 2 or n % 2:
        raise ValueError("Simpson needs an even number of intervals")
    return h / 3.0 * (values[0] + values[-1] + 4.0 * values[1:-1:2].sum() + 2.0 * values[2:-1:2].sum())


def analytic_error(mapping: Mapping, y_min: float, y_max: float, n_quad: int = 100_000) -> float:
    """Mean relative depth error implied by the worst-case bf16 step.

    Integrates in ``u = ln y`` so the 1/y factor does not concentrate the
    error at the near end of wide ranges.
    """
    _check_range(y_min, y_max)
    if n_quad < 1000:
        raise ValueError("n_quad must be at least 1000")
    n = n_quad + (n_quad % 2)
    u = np.linspace(math.log(y_min), math.log(y_max), n + 1)
    y = np.exp(u)
    span = float(mapping.forward(y_max) - mapping.forward(y_min))
    deriv = mapping.derivative(y)
    if span <= 0 or not np.all(np.isfinite(deriv)) or np.any(deriv <= 0):
        raise ValueError(f"mapping {mapping.label} is not increasing on [{y_min}, {y_max}]")
    # dy = y du, and the integrand carries 1/y, which cancels
    integrand = span / deriv
    integral = simpson(integrand, (u[-1] - u[0]) / n)
    return integral / (512.0 * (y_max - y_min))


def analytic_error_closed_form(mapping: Mapping, y_min: float, y_max: float) -> float:
    """Closed-form value of :func:`analytic_error` for uniform, sqrt and power maps."""
    _check_range(y_min, y_max)
    width = 512.0 * (y_max - y_min)
    if mapping.kind is MappingKind.UNIFORM:
        return math.log(y_max / y_min) / 512.0
    if mapping.kind is MappingKind.SQRT:
        d = math.sqrt(y_max) - math.sqrt(y_min)
        return 4.0 * d * d / width
    if mapping.kind is MappingKind.LOG:
        return math.log(y_max / y_min) / 512.0
    p = mapping.p
    span = y_max ** p - y_min ** p
    if p == 1.0:
        return span * math.log(y_max / y_min) / width
    return span * (y_max ** (1 - p) - y_min ** (1 - p)) / (p * (1 - p)) / width


def optimality_scan(power_grid, y_min: float, y_max: float, n_quad: int = 100_000, rtol: float = 1e-12):
    """Exponent in ``power_grid`` with the smallest analytic error.

    Values within ``rtol`` of the minimum count as ties and resolve to the
    grid point nearest 0.5.
    Returns ``(best_p, errors)`` with errors aligned to the grid.
    """
    grid = [float(p) for p in power_grid]
    errors = np.array([analytic_error(power(p), y_min, y_max, n_quad) for p in grid])
    best = errors.min()
    tied = [p for p, e in zip(grid, errors) if e <= best * (1 + rtol)]
    return min(tied, key=lambda p: abs(p - 0.5)), errors


# ---------------------------------------------------------------- empirical pipeline


def percentile_bounds(z: np.ndarray, lo: float = 2.0, hi: float = 98.0) -> tuple[float, float]:
    p_lo, p_hi = np.percentile(z, [lo, hi])
    return float(p_lo), float(p_hi)


def empirical_pipeline_error(mapping: Mapping, depth_samples) -> float:
    """Mean |y_rec - y| / y after map -> percentile-normalise -> bf16 -> invert.

    No clamping is applied here: values beyond the 2nd/98th percentiles keep
    their (coarser) bf16 step instead of saturating.
    """
    y = np.asarray(depth_samples, dtype=np.float64).ravel()
    if y.size == 0 or np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise ValueError("depth samples must be finite and positive")
    z = mapping.forward(y)
    z_lo, z_hi = percentile_bounds(z)
    if z_hi <= z_lo:
        # degenerate spread: fall back to the sample extremes
        z_lo, z_hi = float(z.min()), float(z.max())
    if z_hi <= z_lo:
        d = np.zeros_like(z)
        rec = z
    else:
        d = ((z - z_lo) / (z_hi - z_lo) - 0.5) * 2.0
        q = bf16_round(d)
        rec = (q / 2.0 + 0.5) * (z_hi - z_lo) + z_lo
    y_rec = mapping.inverse(rec)
    return float(np.mean(np.abs(y_rec - y) / y))


@dataclass(frozen=True)
class QuantReport:
    mapping: str
    y_min: float
    y_max: float
    analytic_error: float
    empirical_error: float | None
    improvement_vs_uniform: float  # percentage points of relative error

    HEADER = ("mapping", "range", "analytic", "empirical", "improvement_pp")

    def row(self) -> tuple[str, ...]:
        emp = "-" if self.empirical_error is None else f"{100 * self.empirical_error:.4f}%"
        return (
            self.mapping,
            f"[{self.y_min:g},{self.y_max:g}]",
            f"{100 * self.analytic_error:.4f}%",
            emp,
            f"{self.improvement_vs_uniform:.4f}",
        )


def quant_report(mapping: Mapping, y_min: float, y_max: float, samples=None, n_quad: int = 100_000) -> QuantReport:
    a = analytic_error(mapping, y_min, y_max, n_quad)
    a_uni = analytic_error(UNIFORM, y_min, y_max, n_quad)
    emp = None if samples is None else empirical_pipeline_error(mapping, samples)
    improvement = 0.0 if mapping.kind is MappingKind.UNIFORM else 100.0 * (a_uni - a)
    return QuantReport(mapping.label, y_min, y_max, a, emp, improvement)


def format_table(reports) -> str:
    rows = [QuantReport.HEADER] + [r.row() for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
