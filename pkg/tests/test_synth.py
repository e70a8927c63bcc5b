import math

import numpy as np
import pytest

from denseflow import synth as S
from denseflow.tensorio import SeededRng


def _angle_deg(a, b):
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.degrees(np.arctan2(cross, np.sum(a * b, axis=-1)))


def test_ground_only_scene():
    s = S.render(S.Scene(ground_depth=5.0), 32)
    assert np.all(s.depth == 5.0)
    assert np.all(s.normal == np.array([0.0, 0.0, 1.0]))
    assert not s.alpha.any()


def test_centered_sphere_matches_analytic_formulas():
    res, pitch, radius, top = 64, 0.05, 1.0, 2.0
    scene = S.Scene((S.Sphere(31.5, 31.5, top, radius),), ground_depth=10.0, pitch=pitch, depth_range=(0.1, 20.0))
    s = S.render(scene, res)
    r = (np.arange(res) + 0.5 - 32.0) * pitch
    rho2 = r[:, None] ** 2 + r[None, :] ** 2
    inside = rho2 < radius ** 2
    want = top + radius - np.sqrt(radius ** 2 - rho2[inside])
    assert np.max(np.abs(s.depth[..., 0][inside] - want)) < 1e-3
    assert s.depth[..., 0][inside].min() == pytest.approx(s.depth[31, 31, 0])
    # radial symmetry: a quarter turn of the image rotates the normal field
    n = s.normal
    rot = np.rot90(n, 1, axes=(0, 1))
    assert np.allclose(rot[..., 2], n[..., 2], atol=1e-12)
    assert np.allclose(np.hypot(n[..., 0], n[..., 1]), np.hypot(rot[..., 0], rot[..., 1]), atol=1e-12)


def test_normals_consistent_with_depth_gradient():
    for seed in range(5):
        s = S.generate(SeededRng(seed), 64, 4, (0.1, 80.0))
        d = s.depth[..., 0]
        gy, gx = np.gradient(d, s.scene.pitch)
        from_depth = np.stack([gx, gy, np.ones_like(d)], -1)
        from_depth /= np.linalg.norm(from_depth, axis=-1, keepdims=True)
        # compare on interiors: pixels whose 5x5 neighbourhood has a single smooth surface
        d2y, d2x = np.gradient(gy, axis=0), np.gradient(gx, axis=1)
        smooth = (np.abs(d2y) + np.abs(d2x)) * s.scene.pitch < 0.02
        from scipy import ndimage
        smooth = ndimage.binary_erosion(smooth, iterations=2)
        assert smooth.sum() > 500
        assert np.percentile(_angle_deg(from_depth[smooth], s.normal[smooth]), 95) < 2.0


@pytest.mark.parametrize("rng_", [(0.1, 10.0), (0.1, 80.0)])
def test_generated_invariants(rng_):
    for seed in range(6):
        s = S.generate(SeededRng(seed), 48, 1 + seed % 8, rng_)
        assert rng_[0] <= s.depth.min() and s.depth.max() <= rng_[1]
        assert np.allclose(np.linalg.norm(s.normal, axis=-1), 1.0, atol=1e-12)
        assert 0.0 <= s.alpha.min() and s.alpha.max() <= 1.0
        assert 0.0 <= s.rgb.min() and s.rgb.max() <= 1.0
        if s.prompt is not None:
            assert 1 <= len(s.prompt.points) <= 10
            assert all(s.alpha[r, c, 0] > 0.9 for r, c in s.prompt.points)


def test_alpha_interior_one_far_background_zero():
    scene = S.Scene((S.Box(10, 30, 10, 30, 1.0),), ground_depth=5.0, depth_range=(0.1, 10.0))
    a = S.render(scene, 40).alpha[..., 0]
    assert np.all(a[13:27, 13:27] == 1.0)
    assert a[0, 0] == 0.0 and a[35, 35] == 0.0
    assert 0.0 < a[10, 20] < 1.0


def test_generate_deterministic():
    a = S.generate(SeededRng(11), 32, 3).as_tuple()
    b = S.generate(SeededRng(11), 32, 3).as_tuple()
    for x, y in zip(a[:4], b[:4]):
        assert np.array_equal(x, y)
    assert a[4] == b[4]


def test_generate_validation():
    with pytest.raises(ValueError):
        S.generate(SeededRng(0), 8)
    with pytest.raises(ValueError):
        S.generate(SeededRng(0), 32, 9)
    with pytest.raises(ValueError):
        S.render(S.Scene(ground_depth=100.0), 16)


def test_sloped_ground_spans_log_range():
    scene = S.Scene(ground_depth=80.0, ground_near=0.5, ground_azimuth=0.0)
    d = S.ground_depth(scene, 16, 16)
    assert d[:, 0].tolist() == pytest.approx([0.5] * 16) and d[:, -1].tolist() == pytest.approx([80.0] * 16)
    assert np.allclose(np.diff(np.log(d[0])), math.log(160) / 15)


def test_make_split_layout_and_determinism(tmp_path):
    params = S.SplitParams(resolution=16, n_objects=(1, 2))
    S.make_split(5, 3, 2, tmp_path / "a", params)
    S.make_split(5, 3, 2, tmp_path / "b", params)
    for split, n in (("train", 3), ("val", 2)):
        manifest = (tmp_path / "a" / split / "manifest.txt").read_text().splitlines()
        assert len(manifest) == n and len(manifest[0].split()) == 5
        for d in S.SPLIT_DIRS:
            assert len(list((tmp_path / "a" / split / d).glob("*.dtf"))) == n
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with pytest.raises(FileExistsError):
        S.make_split(5, 1, 1, tmp_path / "a", params)


def test_train_and_val_scenes_differ(tmp_path):
    params = S.SplitParams(resolution=16)
    train = [S.sample_for_index(1, i, params).depth for i in range(20)]
    val = [S.sample_for_index(1, i, params, val=True).depth for i in range(20)]
    assert not any(np.array_equal(t, v) for t in train for v in val)


def test_read_split_round_trip(tmp_path):
    params = S.SplitParams(resolution=16, n_objects=(1, 3))
    S.make_split(2, 4, 1, tmp_path, params)
    back = S.read_split(tmp_path / "train")
    assert len(back) == 4
    for i, s in enumerate(back):
        ref = S.sample_for_index(2, i, params)
        assert np.array_equal(s.depth, ref.depth.astype(np.float32).astype(np.float64))
        assert s.prompt == ref.prompt
    with pytest.raises(FileNotFoundError):
        S.read_split(tmp_path / "missing")
