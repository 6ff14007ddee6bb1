import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from geohead import synthetic as syn
from geohead.heightmap import HeightMap, LabelSet
from geohead.tracklets import (
    Detection, GroundChart, GroundPoint, GroundPoints, TrackletConfig, TrackletSet, filter_tracklets,
    find_peaks, find_peaks_and_cluster, match_detections, project_to_ground, step_tracklets, track_sequence,
)

LS = LabelSet()


def crowd_truth(crowd_views):
    scene, views, _, _ = crowd_views
    t = syn.derive_truth(scene, 0, 1)
    K = scene.cameras[0].intrinsics
    return scene, views[0], t, GroundChart.from_frame(t.frame_i, K)


def chart_xy(scene, chart, x, y):
    return chart.to_chart(scene.cameras[0].to_camera([[x, y, 0.0]]))[0, :2]


def labeled_heads(view, scene, band=10.0):
    """Height map that labels each head-top pixel with its rendered height rounded to the label grid."""
    lab = np.full(view.height.shape, LS.unknown)
    for k, p in enumerate(scene.pedestrians):
        m = (view.owner == k) & (view.height >= p.height - band)
        lab[m] = np.clip(np.rint((view.height[m] - LS.h_min) / LS.delta_h), 0, LS.n_heights - 1).astype(int)
    return HeightMap(labels=lab, energy=0.0, labelset=LS)


# ---------------------------------------------------------------------------
# ground projection


def test_project_all_unknown_is_empty(crowd_views):
    scene, view, t, chart = crowd_truth(crowd_views)
    hm = HeightMap(labels=np.full(view.height.shape, LS.unknown), energy=0.0, labelset=LS)
    pts = project_to_ground(hm, t.family, t.pose, scene.cameras[0].intrinsics, scene.cameras[1].intrinsics, chart)
    assert len(pts) == 0 and pts.skipped == 0


def test_project_head_centroid_near_truth(crowd_views):
    scene, view, t, chart = crowd_truth(crowd_views)
    hm = labeled_heads(view, scene)
    pts = project_to_ground(hm, t.family, t.pose, scene.cameras[0].intrinsics, scene.cameras[1].intrinsics, chart)
    assert len(pts) + pts.skipped == int((hm.labels != LS.unknown).sum())
    for k, p in enumerate(scene.pedestrians):
        mine = view.owner[pts.pixels[:, 1], pts.pixels[:, 0]] == k
        assert mine.sum() > 20
        c = pts.xy[mine].mean(axis=0)
        assert np.linalg.norm(c - chart_xy(scene, chart, p.x, p.y)) < 0.10
        # any two pixels of one head land within a head radius of each other
        spread = np.linalg.norm(pts.xy[mine][:, None] - pts.xy[mine][None], axis=2).max()
        assert spread < 2 * syn.HEAD_RADIUS


def test_chart_truth_camera_height(crowd_views):
    scene, _, t, chart = crowd_truth(crowd_views)
    cam = scene.cameras[0]
    assert chart.height == pytest.approx(cam.center[2], rel=1e-9)
    top = chart.to_chart(cam.to_camera([[0.3, 8.0, 1.7]]))[0]
    assert top[2] == pytest.approx(1.7, abs=1e-9)
    a, b = chart_xy(scene, chart, 0.0, 8.0), chart_xy(scene, chart, 1.0, 9.5)
    assert np.linalg.norm(a - b) == pytest.approx(np.hypot(1.0, 1.5), abs=1e-9)


# ---------------------------------------------------------------------------
# peaks and clusters


def points(xy, h):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    return GroundPoints(xy=xy, h=np.asarray(h, dtype=float), pixels=np.zeros((len(xy), 2), dtype=np.int64))


def test_cluster_empty_and_single():
    assert find_peaks_and_cluster(GroundPoints.empty()) == []
    c = find_peaks_and_cluster(GroundPoints.from_list([GroundPoint(1.0, 2.0, 170.0, (5, 6))]))
    assert len(c) == 1 and (c[0].x, c[0].y, c[0].h, c[0].size) == (1.0, 2.0, 170.0, 1)


def test_two_blobs_one_meter_apart():
    rng = np.random.default_rng(0)
    xy = np.concatenate([rng.normal([0.0, 0.0], 0.05, (80, 2)), rng.normal([1.0, 0.0], 0.05, (80, 2))])
    centers = np.array([[0.0, 0.0]] * 80 + [[1.0, 0.0]] * 80)
    h = 180.0 - 100.0 * np.linalg.norm(xy - centers, axis=1)
    c = find_peaks_and_cluster(points(xy, h), TrackletConfig(peak_radius=0.3))
    assert len(c) == 2
    assert_allclose([[k.x, k.y] for k in c], [[0.0, 0.0], [1.0, 0.0]], atol=0.03)
    assert sorted(k.size for k in c) == [80, 80]


def test_plateau_single_peak_lexicographic():
    xy = [[0.1, 0.0], [0.0, 0.1], [0.0, 0.0], [0.1, 0.1]]
    peaks = find_peaks(points(xy, [170.0] * 4), 0.3)
    assert list(peaks) == [2]
    assert len(find_peaks_and_cluster(points(xy, [170.0] * 4))) == 1


def test_cluster_height_is_member_max():
    c = find_peaks_and_cluster(points([[0, 0], [0.05, 0], [0.1, 0]], [160.0, 175.0, 170.0]))
    assert len(c) == 1 and c[0].h == 175.0 and c[0].peak == 1
    assert c[0].x == pytest.approx(0.05)


# ---------------------------------------------------------------------------
# tracklets


def walker(n, x0=0.0, y0=0.0, vx=0.1, vy=0.05, h=175.0):
    return [(x0 + vx * t, y0 + vy * t, h) for t in range(n)]


def test_constant_velocity_walker_single_tracklet():
    state, det = track_sequence([[c] for c in walker(10)])
    assert len(state.tracklets) == 1
    assert state.tracklets[0].length == 10
    assert state.tracklets[0].mean_height == pytest.approx(175.0, abs=1e-9)
    assert len(det) == 10


def test_far_centroid_starts_new_tracklet():
    state = TrackletSet()
    step_tracklets(state, [(0.0, 0.0, 170.0)])
    step_tracklets(state, [(0.5, 0.0, 170.0)])
    assert len(state.tracklets) == 2
    assert not state.tracklets[0].active and state.tracklets[1].active


def test_height_gate():
    state = TrackletSet()
    step_tracklets(state, [(0.0, 0.0, 150.0)])
    step_tracklets(state, [(0.05, 0.0, 170.0)])
    assert len(state.tracklets) == 2


def test_crossing_walkers_keep_identity():
    a = walker(12, x0=-0.6, vx=0.1, vy=0.0, h=160.0)
    b = walker(12, x0=0.5, y0=0.05, vx=-0.1, vy=0.0, h=185.0)
    state, _ = track_sequence([[p, q] for p, q in zip(a, b)], TrackletConfig(theta_l=0))
    assert len(state.tracklets) == 2
    for t in state.tracklets:
        hs = [c[2] for c in t.centroids]
        assert len(set(hs)) == 1 and t.length == 12


def test_step_conserves_centroids_and_permutation():
    rng = np.random.default_rng(3)
    frames = [rng.uniform(0, 2, (6, 2)) for _ in range(5)]
    frames = [np.column_stack([f, rng.uniform(150, 190, 6)]) for f in frames]
    s1, _ = track_sequence(frames, TrackletConfig(theta_d=0.5, theta_h=40.0))
    s2, _ = track_sequence([f[rng.permutation(6)] for f in frames], TrackletConfig(theta_d=0.5, theta_h=40.0))
    assert sum(t.length for t in s1.tracklets) == 30
    assert [(t.frames, t.centroids) for t in s1.tracklets] == [(t.frames, t.centroids) for t in s2.tracklets]


def test_filter_conventions():
    state, _ = track_sequence([[(0, 0, 170)], [(5, 5, 170)], [(9, 0, 170)]])
    assert all(t.length == 1 for t in state.tracklets)
    assert filter_tracklets(state, 1) == []
    assert len(filter_tracklets(state, 0)) == 3
    d = filter_tracklets(state, 0)[0]
    assert d == Detection(frame=0, tracklet=0, x=0.0, y=0.0, h=170.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.tuples(st.floats(0, 3), st.floats(0, 3), st.floats(140, 200)), max_size=5), max_size=8))
def test_filter_monotone_in_theta_l(frames):
    state, _ = track_sequence(frames, TrackletConfig(theta_d=0.5))
    counts = [len(filter_tracklets(state, k)) for k in range(5)]
    assert counts[0] == sum(len(f) for f in frames)
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_config_validation():
    for bad in (dict(theta_d=0.0), dict(theta_h=-1.0), dict(theta_l=-1), dict(peak_radius=0.0)):
        with pytest.raises(ValueError):
            TrackletConfig(**bad)


# ---------------------------------------------------------------------------
# evaluation matching


def test_match_perfect_and_empty():
    truth = [[0, 0], [1, 1], [2, 0]]
    s, m = match_detections(truth, truth)
    assert (s.tp, s.fp, s.fn, s.precision, s.recall) == (3, 0, 0, 1.0, 1.0)
    s, _ = match_detections([], truth)
    assert s.undefined_precision and s.precision == 1.0 and s.recall == 0.0 and s.fn == 3


def test_match_greedy_one_to_one():
    s, m = match_detections([[0.0, 0.0], [0.1, 0.0]], [[0.05, 0.0]], radius=0.3)
    assert (s.tp, s.fp, s.fn) == (1, 1, 0)
    s, m = match_detections([[0.0, 0.0]], [[0.31, 0.0]], radius=0.3)
    assert (s.tp, s.fp, s.fn) == (0, 1, 1)
    s, m = match_detections([[0.0, 0.0], [0.25, 0.0]], [[0.2, 0.0], [0.45, 0.0]], radius=0.3)
    assert m == [(1, 0)] and s.tp == 1
