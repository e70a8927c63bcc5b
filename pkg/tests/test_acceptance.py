"""One test per acceptance criterion; each prints a single pass/fail line."""

import math
import time

import numpy as np
import pytest

from denseflow import cli, experiments, flow, gradcheck, losses, metrics, quant
from denseflow.nnkit.net import NetConfig, VelocityNet
from denseflow.quant import SQRT, UNIFORM
from denseflow.tensorio import SeededRng, gaussian_noise

ABLATION_SEEDS = (0, 1, 2, 3)   # default seed first, then three alternates
ABLATION_CONFIGS = (("sqrt", True), ("uni", True), ("sqrt", False))
SWEEP_STEPS = (1, 2, 4, 10, 25)


def test_criterion_1_quantization_values(acceptance, capsys):
    start = time.perf_counter()
    assert cli.main(["quant-analyze"]) == 0
    seconds = time.perf_counter() - start
    capsys.readouterr()
    uni10, sq10 = quant.analytic_error(UNIFORM, 0.1, 10.0), quant.analytic_error(SQRT, 0.1, 10.0)
    uni80, sq80 = quant.analytic_error(UNIFORM, 0.1, 80.0), quant.analytic_error(SQRT, 0.1, 80.0)
    imp10, imp80 = 100 * (uni10 - sq10), 100 * (uni80 - sq80)
    ok = (abs(100 * uni10 - 0.8995) < 1e-3 and abs(100 * sq10 - 0.6393) < 1e-3
          and abs(imp10 - 0.26) <= 0.01 and abs(imp80 - 0.58) <= 0.05 and seconds < 1.0)
    acceptance(1, ok, f"uni {100 * uni10:.4f}% sqrt {100 * sq10:.4f}% gain {imp10:.4f} pp [0.1,10]; "
                      f"gain {imp80:.4f} pp [0.1,80]; {seconds:.2f} s")
    assert ok


def test_criterion_2_power_optimality(acceptance):
    grid = np.round(np.arange(0.25, 1.0001, 0.05), 2)
    ratios = np.geomspace(2.0, 1000.0, 20)
    lows = np.geomspace(0.05, 5.0, 20)
    start = time.perf_counter()
    picks = [quant.optimality_scan(grid, lo, lo * r)[0] for lo, r in zip(lows, ratios)]
    seconds = time.perf_counter() - start
    ok = all(p == 0.5 for p in picks) and seconds < 5.0
    acceptance(2, ok, f"argmin p over 20 ranges (ratio 2..1000): {sorted(set(picks))}; {seconds:.2f} s")
    assert ok


def test_criterion_3_empirical_vs_analytic(acceptance):
    parts, ok = [], True
    for lo, hi in ((0.1, 10.0), (0.1, 80.0)):
        y = np.random.default_rng(7).uniform(lo, hi, 1_000_000)
        emp = {m.label: quant.empirical_pipeline_error(m, y) for m in (UNIFORM, SQRT)}
        ana = {m.label: quant.analytic_error(m, lo, hi) for m in (UNIFORM, SQRT)}
        ok &= all(emp[k] <= ana[k] for k in emp) and emp["sqrt"] < emp["uni"]
        parts.append(f"[{lo},{hi}] emp uni {100 * emp['uni']:.4f}% sqrt {100 * emp['sqrt']:.4f}%")
    acceptance(3, ok, "; ".join(parts))
    assert ok


def test_criterion_4_gradient_stability(acceptance):
    rows = gradcheck.gradient_contrast(range(4, 10))
    atan2_sup = max(r[1] for r in rows)
    arccos_sup = max(r[2] for r in rows)
    worst_gap = 0.0
    rng = SeededRng(4)
    for dot in np.linspace(-0.999, 0.999, 41):
        q = rng.normal((8, 3))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        w = rng.normal((8, 3))
        w -= np.sum(w * q, 1, keepdims=True) * q
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        p = dot * q + math.sqrt(1 - dot * dot) * w
        gap = abs(losses.angular_loss(p[None], q[None])[0] - losses.arccos_loss_reference(p[None], q[None])[0])
        worst_gap = max(worst_gap, gap)
    ok = atan2_sup < 10 and arccos_sup > 1e3 and worst_gap <= 1e-6
    acceptance(4, ok, f"sup |grad| atan2 {atan2_sup:.3g} arccos {arccos_sup:.3g}; max loss gap {worst_gap:.2e}")
    assert ok


def test_criterion_5_loss_correctness(acceptance):
    checks = []
    for seed in range(10):
        checks += gradcheck.loss_checks(seed) + [gradcheck.net_check(seed)]
    failed = [c.name for c in checks if not c.passed]
    worst_loss = max(c.rel_error for c in checks if c.name.startswith(("loss", "decode")))
    worst_net = max(c.rel_error for c in checks if c.name.startswith("net"))

    rng = SeededRng(5)
    y = rng.uniform((8, 8), 1, 20)
    raw = y + rng.normal((8, 8))
    base = losses.ssi_l1_depth(raw, y)[0]
    affine = all(losses.ssi_l1_depth(a * raw + b, y)[0] == pytest.approx(base, rel=1e-9)
                 for a, b in zip(rng.uniform(100, 0.1, 10), rng.uniform(100, -10, 10)))

    lam_ok = all(losses.adaptive_lambda(0.7, 0.3, s, 50) == 0.0 for s in range(51))
    for step, l_fm, l_cons in ((75, 0.7, 0.3), (120, 2.0, 0.0), (51, 0.1, 5.0)):
        hand = l_fm / (l_cons + 1e-3) * (step / 50 - 1)
        lam_ok &= abs(losses.adaptive_lambda(l_fm, l_cons, step, 50) - hand) <= 1e-9
    ok = not failed and affine and lam_ok
    acceptance(5, ok, f"{len(checks)} grad checks, worst loss {worst_loss:.1e} net {worst_net:.1e}, "
                      f"failed {failed}; affine invariance {affine}; lambda {lam_ok}")
    assert ok


def test_criterion_6_flow_identities(acceptance):
    z0 = gaussian_noise(SeededRng(1), (16, 16, 3), dtype=np.float32).astype(np.float64)
    z1 = quant.bf16_round(SeededRng(2).uniform((16, 16, 3), -1, 1)).astype(np.float32).astype(np.float64)
    v = z1 - z0
    oracle = lambda z, c, t: v  # noqa: E731
    exact = np.array_equal(flow.euler_sample(oracle, z0, (), 1), z1)
    err25 = float(np.max(np.abs(flow.euler_sample(oracle, z0, (), 25) - z1)))

    net = VelocityNet(NetConfig(widths=(4, 8)), seed=3, zero_final=False)
    cond = [SeededRng(4).uniform((16, 16, 3), -1, 1)]
    runs = []
    for _ in range(2):
        start = flow.multires_noise(SeededRng(2024), (16, 16, 3))
        runs.append((start.tobytes(), flow.euler_sample(net, start, cond, 4).tobytes()))
    identical = runs[0] == runs[1]
    ok = exact and err25 < 1e-6 and identical
    acceptance(6, ok, f"steps=1 exact {exact}; steps=25 max err {err25:.1e}; seeded z0/sampler identical {identical}")
    assert ok


@pytest.fixture(scope="module")
def ablation():
    runs = {}
    for seed in ABLATION_SEEDS:
        for mapping, use_cons in ABLATION_CONFIGS:
            runs[seed, mapping, use_cons] = experiments.depth_run(mapping=mapping, use_cons=use_cons, seed=seed)
    return runs


@pytest.mark.slow
def test_criterion_7_toy_ablation(acceptance, ablation):
    held, parts = {}, []
    for seed in ABLATION_SEEDS:
        sq, uni, fm = (ablation[seed, m, c].metrics["absrel"] for m, c in ABLATION_CONFIGS)
        held[seed] = sq < uni and sq <= fm
        parts.append(f"seed {seed}: sqrt {sq:.3f} uni {uni:.3f} fm-only {fm:.3f} {'ok' if held[seed] else 'x'}")
    slowest = max(r.seconds for r in ablation.values())
    alternates = sum(held[s] for s in ABLATION_SEEDS[1:])
    ok = held[ABLATION_SEEDS[0]] and alternates >= 2 and slowest < 15 * 60
    acceptance(7, ok, "; ".join(parts) + f"; slowest run {slowest:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_8_steps_sweep(acceptance, ablation):
    run = ablation[ABLATION_SEEDS[0], "sqrt", True]
    table = experiments.steps_sweep(run.trainer.net, run.val, run.config, SWEEP_STEPS, run.depth_range)
    absrel = {n: r.metrics["absrel"] for n, r in table}
    best = min(absrel.values())
    complete = [n for n, _ in table] == list(SWEEP_STEPS) and all(math.isfinite(v) for v in absrel.values())
    ok = complete and absrel[1] <= 1.2 * best
    acceptance(8, ok, "AbsRel " + " ".join(f"{n}:{v:.3f}" for n, v in absrel.items())
               + f"; steps=1 is {100 * (absrel[1] / best - 1):.1f}% above best")
    assert ok


def test_criterion_9_metrics_oracle(acceptance):
    tol = 1e-9
    checks = {
        "delta1": abs(metrics.delta1(np.array([[1.0, 1.3]]), np.array([[1.0, 1.0]])) - 0.5) <= tol,
        "absrel": abs(metrics.absrel(np.array([[1.1]]), np.array([[1.0]])) - 0.1) <= tol,
    }
    up = np.array([0.0, 0.0, 1.0])
    angles = np.radians([[5.0, 20.0], [5.0, 20.0]])
    n_hat = np.stack([np.zeros_like(angles), np.sin(angles), np.cos(angles)], -1)
    mean, pct = metrics.normal_metrics(n_hat, np.broadcast_to(up, n_hat.shape))
    checks["angular"] = abs(mean - 12.5) <= tol and pct == 0.5
    right = np.broadcast_to(np.array([0.0, 1.0, 0.0]), (2, 2, 3))
    mean, pct = metrics.normal_metrics(right, np.broadcast_to(up, (2, 2, 3)))
    checks["angular_90"] = abs(mean - 90.0) <= tol and pct == 0.0
    a = np.full((10, 10), 0.5)
    m = metrics.matting_metrics(a + 0.1, a)
    checks["matting"] = abs(m["mse"] - 0.01) <= tol and abs(m["mad"] - 0.1) <= tol and abs(m["sad"] - 0.01) <= tol
    table = {
        "A": {"absrel": 0.1, "delta1": 0.9, "mse": 0.02, "mad": None},
        "B": {"absrel": 0.2, "delta1": 0.9, "mse": 0.01, "mad": 0.05},
        "C": {"absrel": 0.3, "delta1": 0.8, "mse": 0.03, "mad": 0.04},
    }
    ranks = metrics.avg_rank(table)
    checks["avg_rank"] = all(abs(ranks[k] - v) <= tol for k, v in {"A": 1.875, "B": 1.625, "C": 2.5}.items())
    ok = all(checks.values())
    acceptance(9, ok, " ".join(f"{k}={'ok' if v else 'x'}" for k, v in checks.items()))
    assert ok
