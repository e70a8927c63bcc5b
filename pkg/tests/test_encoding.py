import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from denseflow import encoding as E
from denseflow.quant import SQRT, UNIFORM, bf16_round
from denseflow.tensorio import DenseMap, SeededRng, Task


def _sqrt_percentiles_1_and_3():
    # 50 pixels at sqrt(y)=1, one at 2, 49 at 3: the 2nd/98th percentiles land exactly on 1 and 3
    y = np.array([1.0] * 50 + [4.0] + [9.0] * 49).reshape(10, 10)
    return y, 50


def test_encode_example_midpoint():
    y, idx = _sqrt_percentiles_1_and_3()
    m, enc = E.depth_encode(y)
    assert (enc.p_lo, enc.p_hi) == (1.0, 3.0)
    assert m.shape == (10, 10, 3)
    assert m.reshape(-1, 3)[idx].tolist() == [0.0, 0.0, 0.0]
    assert m.reshape(-1, 3)[0, 0] == -1.0 and m.reshape(-1, 3)[-1, 0] == 1.0


def test_decode_examples():
    enc = E.DepthEncoding(1.0, 3.0, SQRT)
    assert E.depth_decode(np.zeros((1, 1, 3)), enc)[0, 0, 0] == pytest.approx(4.0, rel=1e-12)
    assert np.allclose(E.depth_decode(-np.ones((2, 2, 3)), enc), 1.0)


def test_constant_depth_is_degenerate():
    with pytest.raises(E.DegenerateRangeError):
        E.depth_encode(np.full((4, 4), 4.0))
    with pytest.raises(E.DegenerateRangeError):
        E.depth_encode(np.array([[1.0, 0.0], [0.0, 0.0]]))


@pytest.mark.parametrize("mapping", [SQRT, UNIFORM], ids=["sqrt", "uni"])
def test_round_trip_inside_percentiles(mapping):
    y = SeededRng(1).uniform((16, 16), 0.5, 9.5)
    m, enc = E.depth_encode(y, mapping=mapping)
    back = E.depth_decode(m, enc)[:, :, 0]
    z = mapping.forward(y)
    inside = (z > enc.p_lo) & (z < enc.p_hi)
    assert inside.sum() > 200
    assert np.max(np.abs(back[inside] - y[inside]) / y[inside]) < 1e-4


def test_mask_excludes_pixels_from_percentiles():
    y = SeededRng(2).uniform((8, 8), 1.0, 4.0)
    y2 = y.copy()
    y2[0, 0] = 1e6
    mask = np.ones((8, 8), bool)
    mask[0, 0] = False
    m1, e1 = E.depth_encode(y)
    m2, e2 = E.depth_encode(y2, mask)
    assert m2[0, 0, 0] == -1.0
    assert e2.p_hi <= math.sqrt(4.0)


@given(hnp.arrays(np.float64, (6, 6), elements=st.floats(0.1, 80.0)))
def test_encoding_monotone_and_channels_equal(y):
    if np.ptp(np.sqrt(y)) < 1e-6:
        return
    try:
        m, _ = E.depth_encode(y)
    except E.DegenerateRangeError:
        return
    assert np.array_equal(m[..., 0], m[..., 1]) and np.array_equal(m[..., 1], m[..., 2])
    order = np.argsort(y.ravel(), kind="stable")
    assert np.all(np.diff(m[..., 0].ravel()[order]) >= 0)


def test_bf16_round_trip_prefers_sqrt():
    y = SeededRng(3).uniform((64, 64), 0.1, 80.0)
    errs = {}
    for mapping in (SQRT, UNIFORM):
        m, enc = E.depth_encode(y, mapping=mapping, clamp=False)
        back = E.depth_decode(bf16_round(m), enc)[:, :, 0]
        errs[mapping.label] = float(np.mean(np.abs(back - y) / y))
    assert errs["sqrt"] < errs["uni"]


def test_decode_vjp_matches_finite_difference():
    enc = E.DepthEncoding(0.7, 2.9, SQRT)
    m = SeededRng(4).uniform((3, 3, 3), -0.9, 0.9)
    w = SeededRng(5).normal((3, 3, 1))
    g = E.depth_decode_vjp(m, enc, w)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)]:
        up, dn = m.copy(), m.copy()
        up[idx] += eps
        dn[idx] -= eps
        fd = (np.sum(E.depth_decode(up, enc) * w) - np.sum(E.depth_decode(dn, enc) * w)) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


def test_encoding_meta_round_trip():
    enc = E.DepthEncoding(0.31, 8.9, SQRT)
    assert E.DepthEncoding.from_meta(enc.to_meta()) == enc
    with pytest.raises(E.DegenerateRangeError):
        E.DepthEncoding(1.0, 1.0)


# ---------------------------------------------------------------- normals / matting / rgb


def test_normal_encode_examples():
    n = np.array([[[0, 0, 2.0], [1, 1, 1.0]]])
    out = E.normal_encode(n)
    assert out[0, 0].tolist() == [0, 0, 1]
    assert np.allclose(out[0, 1], np.ones(3) / math.sqrt(3), atol=1e-15)
    assert np.allclose(E.normal_encode(out), out, atol=1e-7)


def test_normal_encode_zero_vectors():
    n = np.zeros((1, 2, 3))
    n[0, 0] = (1, 0, 0)
    with pytest.raises(E.ZeroNormError):
        E.normal_encode(n)
    out = E.normal_encode(n, mask=np.array([[True, False]]))
    assert out[0, 1].tolist() == [0, 0, 1]


def test_matting_threshold():
    a = np.array([[0.7, 0.2, 0.5, 0.0]])
    m = E.matting_encode(a)
    assert m[..., 0].tolist() == [[1.0, -1.0, -1.0, -1.0]]
    assert m.shape == (1, 4, 3)
    assert np.all(E.matting_encode(np.zeros((3, 3))) == -1.0)
    with pytest.raises(ValueError):
        E.matting_encode(np.array([[1.2]]))
    assert E.matting_decode(m)[..., 0].tolist() == [[1.0, 0.0, 0.0, 0.0]]


def test_rgb_normalize_examples():
    assert E.rgb_normalize(np.array([0.0, 255.0, 127.5]), (0, 255)).tolist() == [-1.0, 1.0, 0.0]
    assert E.rgb_normalize(np.array([0.25]), (0, 1)).tolist() == [-0.5]
    x = SeededRng(6).uniform((4, 4, 3))
    assert np.allclose(E.rgb_denormalize(E.rgb_normalize(x, (0, 1))), x, atol=1e-15)
    assert E.rgb_normalize(DenseMap(np.full((1, 1, 3), 255.0), Task.RGB, (0.0, 255.0)))[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        E.rgb_normalize(np.zeros(3))


# ---------------------------------------------------------------- prompts


def test_prompt_mask_peak_and_distance():
    p = E.PointPrompt(((5, 5),), sigma=2.0)
    mask = E.point_prompt_mask(p, 16, 16)
    assert mask[5, 5, 0] == 1.0
    assert mask[5, 11, 0] == pytest.approx(2 * math.exp(-4.5) - 1, abs=1e-12)
    assert round(float(mask[5, 11, 0]), 3) == -0.978
    twice = E.PointPrompt(((5, 5), (5, 5)), sigma=2.0)
    assert np.array_equal(E.point_prompt_mask(twice, 16, 16), mask)


def test_prompt_validation_and_meta():
    with pytest.raises(ValueError):
        E.point_prompt_mask(E.PointPrompt(()), 8, 8)
    with pytest.raises(ValueError):
        E.point_prompt_mask(E.PointPrompt(((8, 0),)), 8, 8)
    p = E.PointPrompt(((1, 2), (3, 4)), 8.0)
    assert E.PointPrompt.from_meta(p.to_meta()) == p


def test_sample_point_prompt_inside_foreground():
    alpha = np.zeros((16, 16))
    alpha[4:8, 4:8] = 1.0
    for seed in range(20):
        p = E.sample_point_prompt(SeededRng(seed), alpha)
        assert 1 <= len(p.points) <= 10
        assert all(alpha[r, c] > 0.9 for r, c in p.points)
        assert len(set(p.points)) == len(p.points)
    assert E.sample_point_prompt(SeededRng(0), np.zeros((4, 4))) is None
