import numpy as np
import pytest

from denseflow import synth
from denseflow.quant import bf16_round
from denseflow.flow import interpolate, one_step_estimate, velocity_target
from denseflow.nnkit import train as T
from denseflow.tensorio import SeededRng

PARAMS = synth.SplitParams(resolution=16, n_objects=(1, 3))


def _examples(task="depth", n=8, **kw):
    cfg = T.TrainerConfig(task=task, batch=4, widths=(4, 8), lr=2e-3, **kw)
    samples = [synth.sample_for_index(0, i, PARAMS) for i in range(n)]
    return cfg, T.examples_from_samples(samples, cfg)


def test_lambda_zero_through_first_epoch():
    cfg, ex = _examples()
    tr = T.Trainer(cfg, ex)
    hist = tr.run(epochs=3)
    assert tr.n_step == 2
    assert all(r.lam == 0.0 for r in hist[:2])
    assert all(r.lam > 0.0 for r in hist[2:])
    for r in hist:
        assert r.total == pytest.approx(r.l_fm + r.lam * r.l_cons, abs=1e-7)


def test_same_seed_same_trajectory():
    runs = []
    for _ in range(2):
        cfg, ex = _examples(epochs=25)
        runs.append([(r.l_fm, r.l_cons, r.total) for r in T.Trainer(cfg, ex).run()])
    assert len(runs[0]) == 50 and runs[0] == runs[1]


def test_zero_lr_is_null_update():
    cfg, ex = _examples()
    cfg.lr = 0.0
    tr = T.Trainer(cfg, ex)
    before = {k: v.copy() for k, v in tr.net.params.items()}
    totals = [tr.train_step(ex[:4], 1).total for _ in range(4)]
    assert len(set(totals)) == 1
    assert all(np.array_equal(before[k], tr.net.params[k]) for k in before)


def test_divergence_guard():
    cfg, ex = _examples(divergence_limit=1e-9)
    with pytest.raises(T.DivergenceError):
        T.Trainer(cfg, ex).train_step(ex[:2], 1)


def test_estimator_identity_under_oracle():
    rng = SeededRng(3)
    z0, z1 = rng.normal((8, 8, 3)), rng.uniform((8, 8, 3), -1, 1)
    # float32-valued endpoints and dyadic t keep every intermediate exact in float64
    a, b = z0.astype(np.float32).astype(np.float64), z1.astype(np.float32).astype(np.float64)
    for t in (0.0, 0.25, 0.5, 0.75, 0.125):
        assert np.array_equal(one_step_estimate(interpolate(a, b, t), velocity_target(a, b), t), b)
    for t in rng.uniform(20):
        est = one_step_estimate(interpolate(z0, z1, t), velocity_target(z0, z1), t)
        assert np.max(np.abs(est - z1)) < 1e-14


@pytest.mark.parametrize("task", ["depth", "normal", "matting"])
def test_consistency_gradient_matches_finite_difference(task):
    cfg, ex = _examples(task)
    e = ex[0]
    z = e.target + 0.1 * SeededRng(4).normal(e.target.shape)
    value, g, _ = T.consistency_loss(z, e, task)
    eps = 1e-6
    for idx in [(1, 2, 0), (7, 7, 1), (12, 3, 2)]:
        up, dn = z.copy(), z.copy()
        up[idx] += eps
        dn[idx] -= eps
        fd = (T.consistency_loss(up, e, task)[0] - T.consistency_loss(dn, e, task)[0]) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("task", ["normal", "matting"])
def test_other_tasks_train(task):
    cfg, ex = _examples(task, epochs=2)
    hist = T.Trainer(cfg, ex).run()
    assert all(np.isfinite(r.total) for r in hist)
    z = T.predict(T.Trainer(cfg, ex).net, ex, steps=2)
    res = T.evaluate(z, ex, task)
    assert res.count == len(ex)


def test_prepare_example_bf16_codec():
    s = synth.sample_for_index(0, 0, PARAMS)
    ex = T.prepare_example(s.rgb, s.depth, "depth")
    assert np.array_equal(ex.cond, bf16_round(ex.cond)) and np.array_equal(ex.target, bf16_round(ex.target))
    raw = T.prepare_example(s.rgb, s.depth, "depth", bf16_codec=False)
    assert not np.array_equal(raw.cond, ex.cond)
    with pytest.raises(ValueError):
        T.prepare_example(s.rgb, s.alpha, "matting")


def test_predict_is_deterministic_and_zero_net_returns_noise():
    cfg, ex = _examples()
    net = T.Trainer(cfg, ex).net
    a = T.predict(net, ex, steps=4)
    assert a.tobytes() == T.predict(net, ex, steps=4).tobytes()
    assert np.array_equal(a[0], a[1])  # zero-initialised net leaves z0 untouched


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainerConfig(task="segmentation")
    with pytest.raises(ValueError):
        T.TrainerConfig(batch=0)
    with pytest.raises(ValueError):
        T.TrainerConfig(mapping="cube")
