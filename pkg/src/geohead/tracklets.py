"""Temporal filtering: height map to ground points, height peaks, tracklets and the length filter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .calibration import camera_height
from .geometry import (
    CameraIntrinsics,
    DegenerateRaysError,
    HomographyFamily,
    RelativePose,
    apply_h,
    triangulate,
)
from .heightmap import HeightMap


@dataclass(frozen=True)
class TrackletConfig:
    theta_d: float = 0.20  # m
    theta_h: float = 15.0  # cm
    theta_l: int = 1  # frames; tracklets of length <= theta_l are dropped, 0 keeps all
    peak_radius: float = 0.30  # m

    def __post_init__(self):
        if not (self.theta_d > 0 and self.theta_h > 0 and self.peak_radius > 0):
            raise ValueError("theta_d, theta_h and peak_radius must be positive")
        if self.theta_l < 0 or int(self.theta_l) != self.theta_l:
            raise ValueError("theta_l must be a non-negative integer")


# ----------------------------------------------------------------------------
# ground chart


@dataclass(frozen=True)
class GroundChart:
    """Metric ground coordinates attached to the reference camera.

    Origin at the foot of the camera, ``y`` along the optical axis projected
    on the ground, ``x`` to its right, heights upward.
    """

    down: np.ndarray  # unit vector in camera coordinates
    e1: np.ndarray
    e2: np.ndarray
    height: float  # camera center above the ground, m

    @classmethod
    def from_frame(cls, frame, intrinsics: CameraIntrinsics) -> "GroundChart":
        # the ground normal in camera coordinates is K^T l; with l oriented
        # positive on the ground side it points down
        n = intrinsics.K.T @ frame.l
        down = n / np.linalg.norm(n)
        z = np.array([0.0, 0.0, 1.0])
        e2 = z - (z @ down) * down
        if np.linalg.norm(e2) < 1e-9:  # camera looking straight down
            e2 = np.array([0.0, -1.0, 0.0]) - down[1] * down
        e2 /= np.linalg.norm(e2)
        e1 = np.cross(e2, -down)
        return cls(down=down, e1=e1, e2=e2, height=camera_height(frame))

    def to_chart(self, X) -> np.ndarray:
        """Camera-frame points (N, 3) to ``(x, y, h)`` with ``h`` in meters."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rel = X - self.height * self.down
        return np.column_stack([rel @ self.e1, rel @ self.e2, -(rel @ self.down)])


# ----------------------------------------------------------------------------
# step 1: ground projection


@dataclass(frozen=True)
class GroundPoint:
    x: float
    y: float
    h: float  # cm
    pixel: tuple[int, int]  # (x, y)


@dataclass
class GroundPoints:
    """Array form of a list of :class:`GroundPoint`."""

    xy: np.ndarray  # (N, 2) m
    h: np.ndarray  # (N,) cm
    pixels: np.ndarray  # (N, 2) int
    skipped: int = 0  # degenerate triangulations

    def __len__(self):
        return len(self.h)

    def __getitem__(self, k) -> GroundPoint:
        return GroundPoint(x=float(self.xy[k, 0]), y=float(self.xy[k, 1]), h=float(self.h[k]),
                           pixel=(int(self.pixels[k, 0]), int(self.pixels[k, 1])))

    @classmethod
    def empty(cls) -> "GroundPoints":
        return cls(xy=np.zeros((0, 2)), h=np.zeros(0), pixels=np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def from_list(cls, pts) -> "GroundPoints":
        pts = list(pts)
        if not pts:
            return cls.empty()
        return cls(xy=np.array([[p.x, p.y] for p in pts], dtype=float), h=np.array([p.h for p in pts], dtype=float),
                   pixels=np.array([p.pixel for p in pts], dtype=np.int64))


def project_to_ground(hmap: HeightMap, fam: HomographyFamily, pose: RelativePose, K_i: CameraIntrinsics,
                      K_j: CameraIntrinsics, chart: GroundChart | None = None,
                      min_angle: float = 1e-6) -> GroundPoints:
    """Triangulate every labeled pixel with its transfer ``H^l p`` and drop the vertical component.

    Pixels whose two rays are (nearly) parallel are skipped and counted in
    ``skipped``.
    """
    chart = chart or GroundChart.from_frame(fam.frame_i, K_i)
    ls = hmap.labelset
    lab = hmap.labels
    xy, hs, pix = [], [], []
    skipped = 0
    for k in range(ls.n_heights):
        ys, xs = np.nonzero(lab == k)
        if len(xs) == 0:
            continue
        p = np.column_stack([xs, ys]).astype(float)
        q = apply_h(fam.at(ls.heights[k] / 100.0), p)
        ok = np.all(np.isfinite(q), axis=1)
        X = np.full((len(p), 3), np.nan)
        if ok.any():
            try:
                X[ok] = triangulate(p[ok], q[ok], pose, K_i, K_j, min_angle=min_angle)
            except DegenerateRaysError:
                # fall back to one match at a time to isolate the parallel rays
                for n in np.flatnonzero(ok):
                    try:
                        X[n] = triangulate(p[n], q[n], pose, K_i, K_j, min_angle=min_angle)
                    except DegenerateRaysError:
                        pass
        good = np.all(np.isfinite(X), axis=1)
        skipped += int((~good).sum())
        if good.any():
            c = chart.to_chart(X[good])
            xy.append(c[:, :2])
            hs.append(np.full(int(good.sum()), ls.heights[k]))
            pix.append(np.column_stack([xs[good], ys[good]]))
    if not xy:
        out = GroundPoints.empty()
        out.skipped = skipped
        return out
    # order by pixel (row-major) so the output does not depend on label order
    xy, hs, pix = np.concatenate(xy), np.concatenate(hs), np.concatenate(pix).astype(np.int64)
    order = np.lexsort((pix[:, 0], pix[:, 1]))
    return GroundPoints(xy=xy[order], h=hs[order], pixels=pix[order], skipped=skipped)


# ----------------------------------------------------------------------------
# steps 2-3: height peaks and clusters


@dataclass
class Cluster:
    x: float
    y: float
    h: float  # max height of the members, cm
    size: int
    peak: int  # index of the peak point


def _lex_less(a, b) -> bool:
    return (a[0], a[1]) < (b[0], b[1])


def find_peaks(points: GroundPoints, radius: float) -> np.ndarray:
    """Indices of local height maxima, sorted by ``(x, y)``.

    A point is a peak when no other point within ``radius`` is strictly
    higher, and every equally high one there is lexicographically larger.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    xy, h = points.xy, points.h
    tree = cKDTree(xy)
    peaks = []
    for i, nb in enumerate(tree.query_ball_point(xy, radius)):
        ok = True
        for j in nb:
            if j == i:
                continue
            if h[j] > h[i] or (h[j] == h[i] and _lex_less(xy[j], xy[i])):
                ok = False
                break
        if ok:
            peaks.append(i)
    peaks = np.asarray(peaks, dtype=np.int64)
    return peaks[np.lexsort((xy[peaks, 1], xy[peaks, 0]))]


def find_peaks_and_cluster(points: GroundPoints, cfg: TrackletConfig = TrackletConfig()) -> list[Cluster]:
    """Assign each point to its nearest peak; centroid is the member mean, height the member max."""
    peaks = find_peaks(points, cfg.peak_radius)
    if len(peaks) == 0:
        return []
    d = np.linalg.norm(points.xy[:, None, :] - points.xy[None, peaks, :], axis=2)
    owner = np.argmin(d, axis=1)  # ties go to the lexicographically first peak
    out = []
    for k, pk in enumerate(peaks):
        m = owner == k
        out.append(Cluster(x=float(points.xy[m, 0].mean()), y=float(points.xy[m, 1].mean()),
                           h=float(points.h[m].max()), size=int(m.sum()), peak=int(pk)))
    return out


# ----------------------------------------------------------------------------
# steps 4-5: tracklets


@dataclass
class Tracklet:
    id: int
    frames: list = field(default_factory=list)
    centroids: list = field(default_factory=list)  # (x, y, h)
    active: bool = True

    @property
    def length(self) -> int:
        return len(self.centroids)

    @property
    def mean_height(self) -> float:
        return float(np.mean([c[2] for c in self.centroids]))

    def predict(self) -> np.ndarray:
        last = np.asarray(self.centroids[-1][:2], dtype=float)
        if len(self.centroids) == 1:
            return last
        return 2.0 * last - np.asarray(self.centroids[-2][:2], dtype=float)


@dataclass
class TrackletSet:
    tracklets: list = field(default_factory=list)
    next_id: int = 0
    frame: int = -1

    @property
    def active(self) -> list:
        return [t for t in self.tracklets if t.active]


def _centroid_array(centroids) -> np.ndarray:
    out = []
    for c in centroids:
        if isinstance(c, Cluster):
            out.append((c.x, c.y, c.h))
        else:
            out.append(tuple(float(v) for v in c[:3]))
    return np.asarray(out, dtype=float).reshape(-1, 3)


def step_tracklets(state: TrackletSet, centroids, cfg: TrackletConfig = TrackletConfig(),
                   frame: int | None = None) -> TrackletSet:
    """Associate one frame of centroids ``(x, y, h)`` with the active tracklets (in place).

    Candidate pairs are gated by ``theta_d`` on the predicted position and
    ``theta_h`` on the tracklet's mean height, then taken greedily by
    ascending distance with ties broken on the centroid coordinates, so the
    result does not depend on the input order.
    """
    frame = state.frame + 1 if frame is None else int(frame)
    c = _centroid_array(centroids)
    c = c[np.lexsort((c[:, 2], c[:, 1], c[:, 0]))] if len(c) else c
    active = state.active
    pairs = []
    for ti, t in enumerate(active):
        pred = t.predict()
        mh = t.mean_height
        for ci in range(len(c)):
            d = float(np.hypot(*(c[ci, :2] - pred)))
            if d <= cfg.theta_d and abs(c[ci, 2] - mh) < cfg.theta_h:
                pairs.append((d, ci, t.id, ti))
    pairs.sort()
    used_c, used_t = set(), set()
    for d, ci, _, ti in pairs:
        if ci in used_c or ti in used_t:
            continue
        used_c.add(ci)
        used_t.add(ti)
        active[ti].frames.append(frame)
        active[ti].centroids.append(tuple(c[ci]))
    for ti, t in enumerate(active):
        if ti not in used_t:
            t.active = False
    for ci in range(len(c)):
        if ci not in used_c:
            state.tracklets.append(Tracklet(id=state.next_id, frames=[frame], centroids=[tuple(c[ci])]))
            state.next_id += 1
    state.frame = frame
    return state


@dataclass(frozen=True)
class Detection:
    frame: int
    tracklet: int
    x: float
    y: float
    h: float


def filter_tracklets(state: TrackletSet, theta_l: int) -> list[Detection]:
    """Detections of every tracklet longer than ``theta_l`` frames (0 keeps everything)."""
    out = []
    for t in state.tracklets:
        if theta_l > 0 and t.length <= theta_l:
            continue
        for f, (x, y, h) in zip(t.frames, t.centroids):
            out.append(Detection(frame=int(f), tracklet=t.id, x=float(x), y=float(y), h=float(h)))
    out.sort(key=lambda d: (d.frame, d.tracklet))
    return out


def track_sequence(per_frame_centroids, cfg: TrackletConfig = TrackletConfig()) -> tuple[TrackletSet, list[Detection]]:
    state = TrackletSet()
    for f, cents in enumerate(per_frame_centroids):
        step_tracklets(state, cents, cfg, frame=f)
    return state, filter_tracklets(state, cfg.theta_l)


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class MatchScore:
    tp: int
    fp: int
    fn: int
    undefined_precision: bool = False

    @property
    def precision(self) -> float:
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 0.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    def __add__(self, other: "MatchScore") -> "MatchScore":
        tp, fp = self.tp + other.tp, self.fp + other.fp
        return MatchScore(tp=tp, fp=fp, fn=self.fn + other.fn, undefined_precision=tp + fp == 0)


def match_detections(det_xy, truth_xy, radius: float = 0.30) -> tuple[MatchScore, list[tuple[int, int]]]:
    """Greedy one-to-one matching on the ground plane, closest pairs first.

    With no detections precision is reported as 1 and flagged undefined.
    """
    det = np.asarray(det_xy, dtype=float).reshape(-1, 2)
    tru = np.asarray(truth_xy, dtype=float).reshape(-1, 2)
    pairs = []
    if len(det) and len(tru):
        d = np.linalg.norm(det[:, None, :] - tru[None, :, :], axis=2)
        ii, jj = np.nonzero(d <= radius)
        pairs = sorted(zip(d[ii, jj], ii, jj))
    used_d, used_t, matched = set(), set(), []
    for _, i, j in pairs:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        matched.append((int(i), int(j)))
    tp = len(matched)
    score = MatchScore(tp=tp, fp=len(det) - tp, fn=len(tru) - tp, undefined_precision=len(det) == 0)
    return score, matched
