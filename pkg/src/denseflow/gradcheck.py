"""Finite-difference verification of every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoding, losses
from .nnkit import autodiff as ad
from .nnkit.net import NetConfig, VelocityNet
from .quant import SQRT
from .tensorio import SeededRng


@dataclass(frozen=True)
class GradCheck:
    name: str
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_error <= self.tol)

    def row(self) -> str:
        return f"{self.name:<24} {self.rel_error:10.3e}  tol {self.tol:.0e}  {'PASS' if self.passed else 'FAIL'}"


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, coords, eps: float = 1e-6) -> np.ndarray:
    """d f / d x at the flat indices ``coords``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + eps
        up = f(x)
        flat[i] = keep - eps
        down = f(x)
        flat[i] = keep
        out[j] = (up - down) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over the checked coordinates, relative to the largest |n|."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _coords(rng: SeededRng, size: int, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:limit])


def check(name: str, f: Callable[[np.ndarray], float], grad: np.ndarray, x: np.ndarray,
          rng: SeededRng, tol: float = 1e-4, limit: int = 48, eps: float = 1e-6) -> GradCheck:
    idx = _coords(rng, x.size, limit)
    numeric = central_difference(f, x, idx, eps)
    return GradCheck(name, relative_error(np.asarray(grad).reshape(-1)[idx], numeric), tol)


# ---------------------------------------------------------------- primitives


def _primitive_cases(rng: SeededRng):
    """(name, builder(tape, leaves) -> node, input arrays)."""
    n = lambda *s: rng.normal(s)  # noqa: E731
    away = lambda *s: (np.abs(rng.normal(s)) + 0.2) * np.sign(rng.normal(s) + 1e-12)  # noqa: E731
    return [
        ("add", lambda t, a, b: ad.add(t, a, b), [n(3, 4), n(1, 4)]),
        ("mul", lambda t, a, b: ad.mul(t, a, b), [n(3, 4), n(3, 4)]),
        ("matmul", lambda t, a, b: ad.matmul(t, a, b), [n(3, 5), n(5, 2)]),
        ("linear", lambda t, x, w, b: ad.linear(t, x, w, b), [n(2, 3, 3, 4), n(4, 2), n(2)]),
        ("sum", lambda t, a: ad.sum_(t, a), [n(3, 4)]),
        ("mean", lambda t, a: ad.mean(t, a), [n(3, 4)]),
        ("square", lambda t, a: ad.square(t, a), [n(3, 4)]),
        ("silu", lambda t, a: ad.silu(t, a), [n(3, 4)]),
        ("tanh", lambda t, a: ad.tanh(t, a), [n(3, 4)]),
        ("relu", lambda t, a: ad.relu(t, a), [away(3, 4)]),
        ("concat", lambda t, a, b: ad.concat(t, [a, b]), [n(2, 4, 4, 2), n(2, 4, 4, 3)]),
        ("conv3x3", lambda t, x, w, b: ad.conv3x3(t, x, w, b), [n(2, 6, 6, 3), n(3, 3, 3, 4), n(4)]),
        ("avgpool2", lambda t, a: ad.avgpool2(t, a), [n(2, 6, 6, 3)]),
        ("upsample2", lambda t, a: ad.upsample2(t, a), [n(2, 3, 3, 2)]),
    ]


def primitive_checks(seed: int = 0, tol: float = 1e-4) -> list[GradCheck]:
    rng = SeededRng(seed, stream=0x6743)
    out = []
    for name, build, inputs in _primitive_cases(rng):
        probe = build(ad.Tape(), *[ad.Tape().leaf(v) for v in inputs]).value
        weights = rng.normal(np.shape(probe))

        def scalar(arrays):
            tape = ad.Tape()
            leaves = [tape.leaf(v, requires_grad=True) for v in arrays]
            node = build(tape, *leaves)
            return tape, leaves, node, float(np.sum(node.value * weights))

        tape, leaves, node, _ = scalar(inputs)
        tape.backward(node, seed=weights)
        errs = []
        for k, leaf in enumerate(leaves):
            def f(x, k=k):
                arrays = list(inputs)
                arrays[k] = x
                return scalar(arrays)[3]
            errs.append(check(name, f, leaf.grad, inputs[k], rng, tol).rel_error)
        out.append(GradCheck(f"op:{name}", max(errs), tol))
    return out


# ---------------------------------------------------------------- losses


def loss_checks(seed: int = 0, tol: float = 1e-4) -> list[GradCheck]:
    rng = SeededRng(seed, stream=0x6C6F)
    out = []

    v_pred, v_true = rng.normal((4, 4, 3)), rng.normal((4, 4, 3))
    out.append(check("loss:fm", lambda x: losses.fm_loss(x, v_true)[0], losses.fm_loss(v_pred, v_true)[1],
                     v_pred, rng, tol))

    y = np.exp(rng.uniform((6, 6, 1), np.log(0.5), np.log(20.0)))
    mask = rng.uniform((6, 6, 1)) > 0.2
    y_hat = y * 0.3 + 1.0 + rng.normal((6, 6, 1))
    for mode in ("full", "const"):
        if mode == "const":
            # the constant-fit gradient only equals the true derivative when the fit is frozen
            fit = losses.fit_scale_shift(y_hat, y, mask)
            valid = np.asarray(mask, bool)
            f = lambda x: float(np.mean(np.abs(y[valid] - fit.apply(x)[valid])))  # noqa: E731
        else:
            f = lambda x: losses.ssi_l1_depth(x, y, mask, "full")[0]  # noqa: E731
        out.append(check(f"loss:ssi_l1[{mode}]", f, losses.ssi_l1_depth(y_hat, y, mask, mode)[1], y_hat, rng, tol))

    n_true = encoding.normal_encode(rng.normal((4, 4, 3)))
    n_hat = 1.7 * rng.normal((4, 4, 3))
    out.append(check("loss:angular_atan2", lambda x: losses.angular_loss(x, n_true)[0],
                     losses.angular_loss(n_hat, n_true)[1], n_hat, rng, tol))
    # the arccos reference differentiates the raw dot product, so probe it with unit predictions
    n_unit = encoding.normal_encode(rng.normal((4, 4, 3)))
    out.append(check("loss:angular_arccos", lambda x: losses.arccos_loss_reference(x, n_true)[0],
                     losses.arccos_loss_reference(n_unit, n_true)[1], n_unit, rng, tol))

    alpha = rng.uniform((6, 6, 1))
    unknown = rng.uniform((6, 6)) > 0.5
    a_hat = alpha + 0.3 * rng.normal((6, 6, 1))
    out.append(check("loss:matting_region_l1", lambda x: losses.matting_region_l1(x, alpha, unknown)[0],
                     losses.matting_region_l1(a_hat, alpha, unknown)[1], a_hat, rng, tol))

    enc = encoding.DepthEncoding(0.5, 20.0, SQRT)
    m = rng.uniform((4, 4, 3), -0.9, 0.9)
    w = rng.normal((4, 4, 1))
    out.append(check("decode:depth_vjp", lambda x: float(np.sum(encoding.depth_decode(x, enc) * w)),
                     encoding.depth_decode_vjp(m, enc, w), m, rng, tol))
    return out


def net_check(seed: int = 0, tol: float = 1e-3) -> GradCheck:
    """Every parameter of a downsized float64 net against finite differences."""
    rng = SeededRng(seed, stream=0x6E65)
    cfg = NetConfig(cond_channels=3, widths=(4, 4), dtype="float64")
    net = VelocityNet(cfg, seed=seed, zero_final=False)
    z_t, cond, t = rng.normal((2, 8, 8, 3)), [rng.uniform((2, 8, 8, 3), -1, 1)], rng.uniform(2)
    target = rng.normal((2, 8, 8, 3))
    v, _ = net.gradients(z_t, cond, t, np.zeros_like(target))
    _, grad_out = losses.fm_loss(v, target)
    _, grads = net.gradients(z_t, cond, t, grad_out)
    worst = 0.0
    for name in sorted(net.params):
        base = net.params[name].copy()

        def f(x, name=name):
            net.params[name] = x
            return losses.fm_loss(net(z_t, cond, t), target)[0]

        worst = max(worst, check(name, f, grads[name], base, rng, tol, limit=12).rel_error)
        net.params[name] = base
    return GradCheck("net:velocity", worst, tol)


def all_checks(seeds=range(3)) -> list[GradCheck]:
    out = []
    for s in seeds:
        out += [GradCheck(f"{c.name}#{s}", c.rel_error, c.tol) for c in primitive_checks(s) + loss_checks(s)]
        c = net_check(s)
        out.append(GradCheck(f"{c.name}#{s}", c.rel_error, c.tol))
    return out


# ---------------------------------------------------------------- stability contrast


def gradient_contrast(exponents=range(4, 10)) -> list[tuple[float, float, float, float, float]]:
    """Rows (1 - dot, |grad atan2|, |grad arccos|, loss atan2, loss arccos) for dot = 1 - 10**-k."""
    target = np.array([[[0.0, 0.0, 1.0]]])
    rows = []
    for k in exponents:
        gap = 10.0 ** -k
        dot = 1.0 - gap
        pred = np.array([[[np.sqrt(1.0 - dot * dot), 0.0, dot]]])
        la, ga = losses.angular_loss(pred, target)
        lc, gc = losses.arccos_loss_reference(pred, target)
        rows.append((gap, float(np.linalg.norm(ga)), float(np.linalg.norm(gc)), la, lc))
    return rows
