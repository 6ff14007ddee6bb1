"""Unsupervised metric calibration of a camera pair from point matches.

Pipeline order: fundamental matrix, pose and laser scale (see
:mod:`geohead.geometry`), per-match height hypotheses, robust ground
clustering, ground homography, ground projection of body matches, metric
scale votes and their LMedS selection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    GeometryError,
    HomographyFamily,
    InsufficientMatchesError,
    RelativePose,
    VerticalFrame,
    apply_h,
    decompose_fundamental,
    dehomogenize,
    fundamental_from_pose,
    inject_metric_scale,
    line_through,
    normalize_matrix,
    point_line_distance,
    refine_pose,
    to_homogeneous,
    triangulate,
    variable_height_homography,
)
from .robust import MixtureFit, NonConvergenceError, em_two_gaussians_uniform, levenberg_marquardt

log = logging.getLogger(__name__)


class CollinearError(GeometryError):
    pass


class GroundClusterError(RuntimeError):
    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


@dataclass
class PointMatchSet:
    p_i: np.ndarray  # (N, 2)
    p_j: np.ndarray  # (N, 2)
    triple_id: np.ndarray | None = None  # (N,), -1 when not seen in a third view

    def __post_init__(self):
        self.p_i = np.asarray(self.p_i, dtype=float).reshape(-1, 2)
        self.p_j = np.asarray(self.p_j, dtype=float).reshape(-1, 2)
        if len(self.p_i) != len(self.p_j):
            raise ValueError("p_i and p_j differ in length")
        if self.triple_id is None:
            self.triple_id = np.full(len(self.p_i), -1, dtype=np.int64)
        self.triple_id = np.asarray(self.triple_id, dtype=np.int64)

    def __len__(self):
        return len(self.p_i)

    def subset(self, mask) -> "PointMatchSet":
        return PointMatchSet(self.p_i[mask], self.p_j[mask], self.triple_id[mask])

    def check_bounds(self, K_i: CameraIntrinsics, K_j: CameraIntrinsics) -> None:
        if not (K_i.contains(self.p_i).all() and K_j.contains(self.p_j).all()):
            raise ValueError("match outside image bounds")


@dataclass
class HeightHypothesis:
    index: int
    h_tilde: float
    valid: bool


@dataclass(frozen=True)
class AlphaVote:
    alpha_i: float
    alpha_j: float
    index: int = -1


# ----------------------------------------------------------------------------
# fundamental matrix


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def eight_point(p_i, p_j) -> np.ndarray:
    """Normalized eight-point fit, rank 2 enforced by SVD truncation. ``p_j^T F p_i = 0``."""
    Ti, Tj = _hartley(p_i), _hartley(p_j)
    a = to_homogeneous(p_i) @ Ti.T
    b = to_homogeneous(p_j) @ Tj.T
    A = np.einsum("ni,nj->nij", b, a).reshape(len(a), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = Tj.T @ F @ Ti
    return F / np.linalg.norm(F)


def epipolar_distances(F, p_i, p_j) -> np.ndarray:
    """Larger of the two point-to-epipolar-line distances, per match."""
    a, b = to_homogeneous(p_i), to_homogeneous(p_j)
    d_j = point_line_distance(b, a @ F.T)
    d_i = point_line_distance(a, b @ F)
    return np.maximum(d_i, d_j)


@dataclass
class FundamentalFit:
    F: np.ndarray
    inliers: np.ndarray  # bool mask
    degenerate: bool
    iterations: int


def estimate_fundamental(matches: PointMatchSet, threshold: float = 2.0, max_iter: int = 5000,
                         confidence: float = 0.999, seed: int = 0) -> FundamentalFit:
    """RANSAC over normalized eight-point fits, then least-squares refits on the inliers.

    ``degenerate`` is set when the inliers are also explained by a single
    homography (a dominant plane), in which case F is poorly constrained.
    """
    n = len(matches)
    if n < 8:
        raise InsufficientMatchesError(f"need >= 8 matches, got {n}")
    p_i, p_j = matches.p_i, matches.p_j
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    need, it = max_iter, 0
    while it < min(need, max_iter):
        it += 1
        idx = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(p_i[idx], p_j[idx])
        except np.linalg.LinAlgError:
            continue
        mask = epipolar_distances(F, p_i, p_j) < threshold
        c = int(mask.sum())
        if c > best_count:
            best_mask, best_count = mask, c
            ratio = c / n
            if ratio >= 1.0:
                need = it
            else:
                need = int(np.ceil(np.log(1 - confidence) / np.log(max(1 - ratio ** 8, 1e-12))))
    mask = best_mask
    for _ in range(5):
        F = eight_point(p_i[mask], p_j[mask])
        new = epipolar_distances(F, p_i, p_j) < threshold
        if new.sum() < 8 or np.array_equal(new, mask):
            break
        mask = new
    degenerate = False
    if mask.sum() >= 8:
        try:
            H = dlt_homography(p_i[mask], p_j[mask])
            err = np.sqrt(transfer_errors(H, p_i[mask], p_j[mask]))
            degenerate = bool(np.mean(err < threshold) > 0.9)
        except (CollinearError, np.linalg.LinAlgError):
            pass
    return FundamentalFit(F=F, inliers=mask, degenerate=degenerate, iterations=it)


# ----------------------------------------------------------------------------
# ground homography


def _collinear(pts, tol=1e-9) -> bool:
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[-1] <= tol * max(s[0], 1e-300)


def dlt_homography(p_i, p_j) -> np.ndarray:
    if len(p_i) < 4:
        raise InsufficientMatchesError("need >= 4 matches for a homography")
    if _collinear(p_i) or _collinear(p_j):
        raise CollinearError("points are collinear")
    Ti, Tj = _hartley(p_i), _hartley(p_j)
    a = to_homogeneous(p_i) @ Ti.T
    b = to_homogeneous(p_j) @ Tj.T
    z = np.zeros_like(a)
    A = np.vstack([
        np.hstack([z, -b[:, 2:3] * a, b[:, 1:2] * a]),
        np.hstack([b[:, 2:3] * a, z, -b[:, 0:1] * a]),
    ])
    _, _, Vt = np.linalg.svd(A)
    H = np.linalg.inv(Tj) @ Vt[-1].reshape(3, 3) @ Ti
    # sign: the fitted points map with a positive third coordinate, so that
    # a negative one later flags a point behind the second camera
    if np.sum(to_homogeneous(p_i) @ H[2]) < 0:
        H = -H
    return H / np.linalg.norm(H)


def transfer_errors(H, p_i, p_j) -> np.ndarray:
    """Symmetric squared transfer error per match."""
    fwd = apply_h(H, p_i) - p_j
    bwd = apply_h(np.linalg.inv(H), p_j) - p_i
    return (fwd ** 2).sum(axis=1) + (bwd ** 2).sum(axis=1)


def fit_ground_homography(p_i, p_j, trials: int = 500, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """LMedS over minimal 4-point DLT fits, then a DLT refit on the robust inliers.

    Returns ``(H0, inlier_mask)``.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    n = len(p_i)
    if n < 4:
        raise InsufficientMatchesError("need >= 4 ground matches")
    if _collinear(p_i) or _collinear(p_j):
        raise CollinearError("ground matches are collinear")
    if n == 4:
        return dlt_homography(p_i, p_j), np.ones(4, dtype=bool)
    rng = np.random.default_rng(seed)
    best_H, best_med = None, np.inf
    for _ in range(trials):
        idx = rng.choice(n, 4, replace=False)
        try:
            H = dlt_homography(p_i[idx], p_j[idx])
            med = float(np.median(transfer_errors(H, p_i, p_j)))
        except (CollinearError, np.linalg.LinAlgError):
            continue
        if med < best_med:
            best_H, best_med = H, med
    if best_H is None:
        raise CollinearError("no non-degenerate 4-point sample")
    # robust scale estimate (Rousseeuw & Leroy)
    sigma = 1.4826 * (1.0 + 5.0 / (n - 4)) * np.sqrt(best_med)
    mask = transfer_errors(best_H, p_i, p_j) <= (2.5 * max(sigma, 1e-9)) ** 2
    H = best_H
    for _ in range(5):
        if mask.sum() < 4:
            break
        H = dlt_homography(p_i[mask], p_j[mask])
        e = transfer_errors(H, p_i, p_j)
        sigma = 1.4826 * np.sqrt(np.median(e[mask]))
        new = e <= (2.5 * max(sigma, 1e-9)) ** 2 + 1e-18
        new |= e <= np.median(e)  # never fewer than half the matches
        if np.array_equal(new, mask):
            break
        mask = new
    return H, mask


# ----------------------------------------------------------------------------
# height hypotheses and ground clustering


def height_hypotheses(matches: PointMatchSet, F, frame_i: VerticalFrame, frame_j: VerticalFrame,
                      pose: RelativePose, K_i: CameraIntrinsics, K_j: CameraIntrinsics,
                      min_angle: float = 1e-6) -> list[HeightHypothesis]:
    """Camera-height hypothesis of each match, assuming its 3D point is on the ground.

    The match is slid along the vertical through it up to the vanishing line
    (in view i) and to the transferred epipolar line (in view j); the 3D
    distance between the two triangulated points is the hypothesis.
    """
    out = []
    F = np.asarray(F, dtype=float)
    for n in range(len(matches)):
        pi, pj = matches.p_i[n], matches.p_j[n]
        if not (frame_i.below_horizon(pi) and frame_j.below_horizon(pj)):
            out.append(HeightHypothesis(n, float("nan"), False))
            continue
        try:
            r_i = line_through(pi, frame_i.v)
            r_j = line_through(pj, frame_j.v)
            ti = _intersect(r_i, frame_i.l, min_angle)
            tj = _intersect(F @ to_homogeneous(ti), r_j, min_angle)
            P = triangulate(pi, pj, pose, K_i, K_j, min_angle=min_angle)
            Pt = triangulate(ti, tj, pose, K_i, K_j, min_angle=min_angle)
        except GeometryError:
            out.append(HeightHypothesis(n, float("nan"), False))
            continue
        out.append(HeightHypothesis(n, float(np.linalg.norm(P - Pt)), True))
    return out


def _intersect(l1, l2, min_angle):
    n1 = l1[:2] / np.linalg.norm(l1[:2])
    n2 = l2[:2] / np.linalg.norm(l2[:2])
    if abs(n1[0] * n2[1] - n1[1] * n2[0]) < np.sin(min_angle):
        raise GeometryError("near-parallel lines")
    x = np.cross(l1, l2)
    if abs(x[2]) < 1e-300:
        raise GeometryError("intersection at infinity")
    return x[:2] / x[2]


@dataclass
class GroundCluster:
    members: np.ndarray  # indices of hypotheses assigned to the ground
    mean: float
    std: float
    fit: MixtureFit


def cluster_ground(hypotheses: list[HeightHypothesis], min_count: int = 20,
                   max_iter: int = 500, compact_fraction: float = 0.05) -> GroundCluster:
    """Split height hypotheses into ground, body and outliers with a 1-D mixture EM.

    Ground points sit farthest below the camera, so the ground component is
    the Gaussian with the largest mean. ``h~`` is a distance, so the outlier
    component spans ``[0, max h~]`` rather than the sample range. Two Gaussians closer than two
    standard deviations are treated as one cluster. A ground cluster whose
    spread exceeds ``compact_fraction`` of its mean is rejected as no cluster.
    """
    valid = [h for h in hypotheses if h.valid and np.isfinite(h.h_tilde)]
    if len(valid) < min_count:
        raise GroundClusterError(f"need >= {min_count} valid hypotheses, got {len(valid)}")
    idx = np.array([h.index for h in valid])
    x = np.array([h.h_tilde for h in valid])
    try:
        fit = em_two_gaussians_uniform(x, max_iter=max_iter, support=(min(0.0, x.min()), x.max()))
    except NonConvergenceError as e:
        raise GroundClusterError(str(e), fit=e.best) from e
    g = int(np.argmax(fit.means))
    o = 1 - g
    post = fit.posteriors[:, g].copy()
    merged = abs(fit.means[0] - fit.means[1]) < 2.0 * max(fit.stds)
    if merged:
        post += fit.posteriors[:, o]
    members = post > 0.5
    if not members.any():
        raise GroundClusterError("empty ground cluster", fit=fit)
    mean = float(np.average(x[members]))
    std = float(np.std(x[members]))
    if std > compact_fraction * abs(mean):
        raise GroundClusterError(f"ground cluster not compact (std {std:.3g})", fit=fit)
    return GroundCluster(members=idx[members], mean=mean, std=std, fit=fit)


# ----------------------------------------------------------------------------
# ground projection of a body match (two-view constrained transfer problem)


@dataclass
class GroundProjection:
    p_i0: np.ndarray
    p_j0: np.ndarray
    cost: float
    initial_cost: float
    converged: bool


def ground_projection_match(p_i, p_j, H0, F, frame_i: VerticalFrame, frame_j: VerticalFrame,
                            max_iter: int = 100, xtol: float = 1e-10, damping: float = 1e-3) -> GroundProjection:
    """Feet ``(p_i0, p_j0)`` of a match: ``p_i0`` slides on the vertical through ``p_i``,
    ``p_j0`` is its epipolar line cut with the vertical through ``p_j``, and the
    symmetric ground-homography transfer error between them is minimized.

    One unknown (the offset along the vertical in view i, starting at the
    match itself), solved by Levenberg-Marquardt.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    H0 = np.asarray(H0, dtype=float)
    H0_inv = np.linalg.inv(H0)
    F = np.asarray(F, dtype=float)
    vi = dehomogenize(frame_i.v) if abs(frame_i.v[2]) > 1e-12 else None
    if vi is not None:
        u = vi - p_i
    else:
        u = frame_i.v[:2].copy()
    u = u / np.linalg.norm(u)
    r_j = line_through(p_j, frame_j.v)

    def feet(t):
        a = p_i + t * u
        x = np.cross(F @ np.array([a[0], a[1], 1.0]), r_j)
        return a, x[:2] / x[2]

    def residual(x):
        a, b = feet(x[0])
        return np.concatenate([apply_h(H0, a) - b, apply_h(H0_inv, b) - a])

    res = levenberg_marquardt(residual, [0.0], max_iter=max_iter, xtol=xtol, damping=damping)
    a, b = feet(res.x[0])
    return GroundProjection(p_i0=a, p_j0=b, cost=res.cost, initial_cost=res.initial_cost,
                            converged=res.converged)


def constraint_residuals(gp: GroundProjection, p_i, p_j, F, frame_i: VerticalFrame, frame_j: VerticalFrame):
    """Pixel distances of the feet to their defining lines (vertical i, vertical j, epipolar)."""
    r_i = line_through(p_i, frame_i.v)
    r_j = line_through(p_j, frame_j.v)
    e = np.asarray(F) @ to_homogeneous(gp.p_i0)
    return (float(point_line_distance(gp.p_i0, r_i)), float(point_line_distance(gp.p_j0, r_j)),
            float(point_line_distance(gp.p_j0, e)))


# ----------------------------------------------------------------------------
# metric scale


def alpha_from_pair(p, p0, Z: float, frame: VerticalFrame) -> float:
    """Metric scale from an image point, its ground projection and their 3D distance ``Z``.

    Solves ``p ~ p0 + k v`` for ``k`` (least squares on the cross product)
    and returns ``k / (Z * l.p0)``; magnitude agrees with the single-view
    metrology formula ``|p0 x p| / (Z |l.p0| |v x p|)``.
    """
    if Z <= 0:
        raise ValueError("Z must be positive")
    p = to_homogeneous(np.asarray(p, dtype=float))
    p0 = to_homogeneous(np.asarray(p0, dtype=float))
    p = p / p[2]
    p0 = p0 / p0[2]
    pv = np.cross(p, frame.v)
    if np.linalg.norm(p[:2] - p0[:2]) < 1e-9 or np.linalg.norm(pv) < 1e-12:
        raise GeometryError("degenerate point pair for alpha")
    k = -np.cross(p, p0) @ pv / (pv @ pv)
    return float(k / (Z * (frame.l @ p0)))


def _median_errors(votes_a, p_i, p_j, frame_i, frame_j, H0, heights, h_grid):
    """Median transfer residual of each (alpha_i, alpha_j) row of ``votes_a``."""
    a = to_homogeneous(p_i)
    meds = np.empty(len(votes_a))
    for k, (ai, aj) in enumerate(votes_a):
        fam = HomographyFamily(H0=H0, frame_i=frame_i.with_alpha(ai), frame_j=frame_j.with_alpha(aj))
        if heights is not None:
            err = np.empty(len(a))
            for n in range(len(a)):
                Hn = variable_height_homography(fam, heights[n])
                q = Hn @ a[n]
                err[n] = np.hypot(q[0] / q[2] - p_j[n, 0], q[1] / q[2] - p_j[n, 1])
        else:
            best = np.full(len(a), np.inf)
            for h in h_grid:
                q = a @ variable_height_homography(fam, h).T
                best = np.minimum(best, np.hypot(q[:, 0] / q[:, 2] - p_j[:, 0], q[:, 1] / q[:, 2] - p_j[:, 1]))
            err = best
        meds[k] = np.median(err)
    return meds


@dataclass
class AlphaSelection:
    alpha_i: float
    alpha_j: float
    median_error: float
    winner: int  # index into the original vote list
    vote_medians: np.ndarray


def select_alpha_lmeds(votes: list[AlphaVote], p_i, p_j, frame_i: VerticalFrame, frame_j: VerticalFrame,
                       H0, heights=None, h_range=(1.40, 2.00), h_steps: int = 41,
                       refine: bool = True, min_votes: int = 10) -> AlphaSelection:
    """Least-median selection of the metric scale pair among per-match votes.

    The residual of a match under a candidate pair is the pixel transfer
    error of the variable-height homography in view j. With ``heights``
    (metric height of each match above its ground foot) the homography is
    taken at that height; otherwise the best height on a grid over
    ``h_range`` is used. The winner may be polished by a pattern search on
    the median residual.
    """
    if len(votes) == 0:
        raise ValueError("no alpha votes")
    if len(votes) < min_votes:
        raise InsufficientMatchesError(f"need >= {min_votes} votes, got {len(votes)}")
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    H0 = np.asarray(H0, dtype=float)
    h_grid = np.linspace(h_range[0], h_range[1], h_steps)
    va = np.array([[v.alpha_i, v.alpha_j] for v in votes])
    meds = _median_errors(va, p_i, p_j, frame_i, frame_j, H0, heights, h_grid)
    # lexicographic tie-break keeps the choice independent of vote order
    order = np.lexsort((va[:, 1], va[:, 0], meds))
    win = int(order[0])
    best = va[win].copy()
    best_med = float(meds[win])
    if refine:
        step = 0.01
        while step > 1e-7:
            moved = False
            for dim in (0, 1):
                for sgn in (1.0, -1.0):
                    cand = best.copy()
                    cand[dim] *= 1.0 + sgn * step
                    m = float(_median_errors(cand[None], p_i, p_j, frame_i, frame_j, H0, heights, h_grid)[0])
                    if m < best_med:
                        best, best_med, moved = cand, m, True
            if not moved:
                step /= 2.0
    return AlphaSelection(alpha_i=float(best[0]), alpha_j=float(best[1]), median_error=best_med,
                          winner=win, vote_medians=meds)


def camera_height(frame: VerticalFrame) -> float:
    """Height of the camera center above the ground implied by a scaled frame (meters).

    The homology degenerates on the plane through the camera center:
    ``1 + alpha h l.v = 0``.
    """
    return float(-1.0 / (frame.alpha * (frame.l @ frame.v)))


def check_alpha_sign(frame: VerticalFrame) -> None:
    if not frame.alpha > 0:
        raise ValueError(f"alpha must be positive under the oriented-frame convention, got {frame.alpha}")


# ----------------------------------------------------------------------------
# whole-pair driver


@dataclass
class PairCalibration:
    F: np.ndarray
    pose: RelativePose
    H0: np.ndarray
    alpha_i: float
    alpha_j: float
    fundamental: FundamentalFit
    ground: GroundCluster
    ground_inliers: np.ndarray
    votes: list
    selection: AlphaSelection
    diagnostics: dict


def collect_alpha_votes(matches: PointMatchSet, candidates, H0, F, frame_i, frame_j, pose, K_i, K_j):
    """Ground-project each candidate match and turn it into an ``AlphaVote``.

    Returns ``(votes, heights, used)`` where ``heights`` is the metric height
    of each voting match above its foot.
    """
    votes, heights, used = [], [], []
    for n in candidates:
        pi, pj = matches.p_i[n], matches.p_j[n]
        try:
            gp = ground_projection_match(pi, pj, H0, F, frame_i, frame_j)
            P = triangulate(pi, pj, pose, K_i, K_j)
            P0 = triangulate(gp.p_i0, gp.p_j0, pose, K_i, K_j)
            Z = float(np.linalg.norm(P - P0))
            if Z < 0.05:
                continue
            ai = alpha_from_pair(pi, gp.p_i0, Z, frame_i)
            aj = alpha_from_pair(pj, gp.p_j0, Z, frame_j)
        except (GeometryError, np.linalg.LinAlgError, ZeroDivisionError, FloatingPointError):
            continue
        if np.isfinite(ai) and np.isfinite(aj) and ai != 0 and aj != 0:
            votes.append(AlphaVote(ai, aj, int(n)))
            heights.append(Z)
            used.append(int(n))
    return votes, np.array(heights), np.array(used, dtype=int)


def unit_pose(fit: FundamentalFit, matches: PointMatchSet, K_i: CameraIntrinsics, K_j: CameraIntrinsics,
              frame_i: VerticalFrame | None = None, frame_j: VerticalFrame | None = None) -> RelativePose:
    """Pose with ``|t| = 1`` from the RANSAC fit: SVD decomposition, then Sampson refinement on the inliers.

    With both vertical frames the refinement keeps the vertical vanishing
    points in correspondence.
    """
    inl = np.flatnonzero(fit.inliers)
    pose = decompose_fundamental(fit.F, K_i, K_j, matches.p_i[inl], matches.p_j[inl])
    vertical = None if frame_i is None or frame_j is None else (frame_i.v, frame_j.v)
    return refine_pose(pose, K_i, K_j, matches.p_i[inl], matches.p_j[inl], vertical=vertical)


def calibrate_pair(matches: PointMatchSet, K_i: CameraIntrinsics, K_j: CameraIntrinsics,
                   frame_i: VerticalFrame, frame_j: VerticalFrame, laser_distance: float,
                   pose: RelativePose | None = None, epipolar_threshold: float = 2.0,
                   seed: int = 0) -> PairCalibration:
    """Run the whole pair pipeline. ``pose`` overrides the F-derived, laser-scaled pose
    (used after triplet scale propagation)."""
    fit = estimate_fundamental(matches, threshold=epipolar_threshold, seed=seed)
    inl = np.flatnonzero(fit.inliers)
    if pose is None:
        pose = inject_metric_scale(unit_pose(fit, matches, K_i, K_j, frame_i, frame_j), laser_distance)
    # the pose is the refined model; every later stage uses the F it implies
    F = normalize_matrix(fundamental_from_pose(pose, K_i, K_j))
    hyps = height_hypotheses(matches.subset(fit.inliers), F, frame_i, frame_j, pose, K_i, K_j)
    for h in hyps:
        h.index = int(inl[h.index])
    ground = cluster_ground(hyps)
    g = ground.members
    H0, h_mask = fit_ground_homography(matches.p_i[g], matches.p_j[g], seed=seed)
    ground_inl = g[h_mask]
    valid = {h.index: h.h_tilde for h in hyps if h.valid}
    far = [n for n in inl if n in valid and valid[n] < ground.mean - 3.0 * max(ground.std, 1e-3)]
    votes, heights, used = collect_alpha_votes(matches, far, H0, F, frame_i, frame_j, pose, K_i, K_j)
    sel = select_alpha_lmeds(votes, matches.p_i[used], matches.p_j[used], frame_i, frame_j, H0,
                             heights=heights)
    diag = {
        "n_matches": len(matches),
        "n_epipolar_inliers": int(fit.inliers.sum()),
        "median_epipolar_error": float(np.median(epipolar_distances(F, matches.p_i[inl], matches.p_j[inl]))),
        "fundamental_degenerate": fit.degenerate,
        "ground_cluster_mean": ground.mean,
        "ground_cluster_std": ground.std,
        "n_ground": int(len(ground_inl)),
        "median_ground_transfer": float(np.median(np.sqrt(transfer_errors(H0, matches.p_i[ground_inl], matches.p_j[ground_inl])))),
        "n_votes": len(votes),
        "lmeds_median": sel.median_error,
    }
    log.info("pair calibration: %s", diag)
    return PairCalibration(F=F, pose=pose, H0=H0, alpha_i=sel.alpha_i, alpha_j=sel.alpha_j,
                           fundamental=fit, ground=ground, ground_inliers=ground_inl, votes=votes,
                           selection=sel, diagnostics=diag)
