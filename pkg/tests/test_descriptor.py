import numpy as np
import pytest
from numpy.testing import assert_allclose

from geohead import synthetic as syn
from geohead.descriptor import (
    SENTINEL_COST, DaisyParams, ImageTooSmallError, compute_field, dissimilarity, dissimilarity_map, load_field,
    save_field,
)


SMALL = DaisyParams(radius=6.0, rings=2, histograms=4, orientations=8)


def textured(h=40, w=48, seed=0):
    return syn.value_noise(np.column_stack([np.tile(np.arange(w), h) / 10.0, np.repeat(np.arange(h), w) / 10.0,
                                            np.zeros(h * w)]), seed).reshape(h, w) * 200.0


def test_params_count():
    assert DaisyParams(radius=15, rings=3, histograms=8, orientations=8).S == 25
    assert len(SMALL.sample_layout()) == SMALL.S
    with pytest.raises(ValueError):
        DaisyParams(radius=0.0)
    with pytest.raises(ValueError):
        DaisyParams(rings=0)


def test_field_unit_norm_histograms():
    f = compute_field(textured(), SMALL)
    n = np.linalg.norm(f.data, axis=3)
    assert_allclose(n[~f.flat], 1.0, atol=1e-5)
    assert np.all(n[f.flat] == 0.0)
    assert f.data.shape == (40, 48, SMALL.S, 8)


def test_constant_image_is_flagged():
    f = compute_field(np.full((30, 30), 77.0), SMALL)
    assert f.flat.all()
    assert np.all(f.data == 0.0)


def test_offset_invariance():
    img = textured()
    a, b = compute_field(img, SMALL), compute_field(img + 50.0, SMALL)
    assert_allclose(a.data, b.data, atol=1e-6)
    qx, qy = np.meshgrid(np.arange(48) + 0.3, np.arange(40) + 0.6)
    qx, qy = np.minimum(qx, 47), np.minimum(qy, 39)
    assert np.max(np.abs(dissimilarity_map(a, a, qx, qy) - dissimilarity_map(b, b, qx, qy))) < 1e-6


def test_vertical_step_edge_center_histogram():
    img = np.zeros((32, 32))
    img[:, 16:] = 100.0
    f = compute_field(img, DaisyParams(radius=6.0, rings=2, histograms=4, orientations=8))
    h = f.data[16, 16, 0].astype(float)
    # bin 0 points along +x; the half-rectified projection also reaches the
    # two bins 45 degrees away, and nothing else
    assert np.argmax(h) == 0
    assert_allclose(h, [1.0, 0.5 ** 0.5, 0, 0, 0, 0, 0, 0.5 ** 0.5] / np.sqrt(2.0), atol=1e-6)
    mirrored = compute_field(img[:, ::-1], f.params).data[16, 15, 0]
    assert np.argmax(mirrored) == 4


def test_image_too_small():
    with pytest.raises(ImageTooSmallError):
        compute_field(np.zeros((10, 40)), SMALL)


def test_dissimilarity_same_point_zero():
    f = compute_field(textured(), SMALL)
    assert dissimilarity(f, (20, 17), f, (20, 17)) < 1e-12
    g = compute_field(textured(), SMALL)
    assert dissimilarity(f, (20, 17), g, (20.0, 17.0)) < 1e-6


def test_dissimilarity_bounds_and_sentinel():
    f = compute_field(textured(), SMALL)
    g = compute_field(textured(seed=3), SMALL)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.integers(0, [48, 40])
        q = rng.uniform(0, [47, 39])
        assert 0.0 <= dissimilarity(f, p, g, q) <= 2.0
    assert dissimilarity(f, (5, 5), g, (-0.5, 3.0)) == SENTINEL_COST
    assert dissimilarity(f, (5, 5), g, (3.0, 39.5)) == SENTINEL_COST


def test_dissimilarity_symmetric_at_integers():
    f = compute_field(textured(), SMALL)
    g = compute_field(textured(seed=3), SMALL)
    assert dissimilarity(f, (10, 12), g, (30, 20)) == pytest.approx(dissimilarity(g, (30, 20), f, (10, 12)), abs=1e-12)


def test_dissimilarity_lipschitz_in_histograms():
    f = compute_field(textured(), SMALL)
    g = compute_field(textured(), SMALL)
    eps = 0.01
    rng = np.random.default_rng(1)
    d = rng.normal(size=g.data[17, 20].shape)
    g.data[17, 20] += (eps * d / np.linalg.norm(d, axis=1, keepdims=True)).astype(np.float32)
    assert dissimilarity(f, (20, 17), g, (20, 17)) <= eps + 1e-6


def test_dissimilarity_map_matches_pointwise():
    f = compute_field(textured(), SMALL)
    g = compute_field(textured(seed=3), SMALL)
    rng = np.random.default_rng(2)
    qx = rng.uniform(-2, 50, (40, 48))
    qy = rng.uniform(-2, 42, (40, 48))
    m = dissimilarity_map(f, g, qx, qy)
    for y, x in [(0, 0), (10, 30), (39, 47), (20, 5)]:
        assert m[y, x] == pytest.approx(dissimilarity(f, (x, y), g, (qx[y, x], qy[y, x])), abs=1e-6)


def test_field_round_trip(tmp_path):
    f = compute_field(textured(), SMALL)
    save_field(f, tmp_path / "f.daisy")
    g = load_field(tmp_path / "f.daisy")
    assert np.array_equal(f.data, g.data)
    assert np.array_equal(f.flat, g.flat)
    assert g.params == SMALL


def test_true_correspondence_beats_epipolar_offset(rig_scene):
    scene, cams = rig_scene, rig_scene.cameras
    vi, vj = syn.render(scene, 0), syn.render(scene, 1)
    fi, fj = compute_field(vi.image), compute_field(vj.image)
    F = syn.derive_truth(scene, 0, 1).F
    ys, xs = np.nonzero((vi.owner >= 0) & ~fi.border)
    rng = np.random.default_rng(0)
    pick = rng.choice(len(xs), size=min(400, len(xs)), replace=False)
    X = vi.points[ys[pick], xs[pick]]
    ok = syn.visible(scene, 1, X)
    q, _ = cams[1].project(X[ok])
    p = np.column_stack([xs[pick], ys[pick]])[ok]
    wins = total = 0
    for pp, qq in zip(p, q):
        l = F @ np.append(pp, 1.0)
        d = np.array([l[1], -l[0]]) / np.hypot(l[0], l[1])
        for off in (qq + 10.0 * d, qq - 10.0 * d):
            c_off = dissimilarity(fi, pp, fj, off)
            if c_off == SENTINEL_COST:
                continue
            total += 1
            wins += dissimilarity(fi, pp, fj, qq) < c_off
    assert total >= 200
    assert wins / total >= 0.95
