"""Projective primitives shared by calibration, the height-map solver and tracking.

Conventions
-----------
* Pixel points are ``(x, y)`` with ``y`` pointing down; homogeneous points are
  3-vectors and are dehomogenized by forcing the third coordinate to 1.
* A :class:`RelativePose` maps camera-i coordinates to camera-j coordinates:
  ``X_j = R @ X_i + t``.
* Heights given to :func:`homology` are in meters and ``alpha`` is in 1/m.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .robust import levenberg_marquardt


class GeometryError(ValueError):
    """Base class for degenerate geometric configurations."""


class SingularHomologyError(GeometryError):
    pass


class AmbiguousCheiralityError(GeometryError):
    pass


class DegenerateRaysError(GeometryError):
    pass


class InsufficientMatchesError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, pts, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x, y = pts[..., 0], pts[..., 1]
        return (
            (x >= -margin)
            & (x <= self.width - 1 + margin)
            & (y >= -margin)
            & (y <= self.height - 1 + margin)
        )


@dataclass(frozen=True)
class RelativePose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center_j(self) -> np.ndarray:
        """Center of camera j expressed in camera-i coordinates."""
        return -self.R.T @ self.t


@dataclass(frozen=True)
class VerticalFrame:
    """Vertical vanishing point ``v``, ground vanishing line ``l`` and metric scale ``alpha``.

    Use :meth:`oriented` to build a frame from raw estimates: it fixes the
    scale and sign conventions that make ``alpha`` positive for a camera above
    the ground plane.
    """

    v: np.ndarray
    l: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(3)
        l = np.asarray(self.l, dtype=float).reshape(3)
        if abs(np.linalg.norm(l) - 1.0) > 1e-9:
            raise ValueError("vanishing line must have unit length")
        if abs(l @ v) < 1e-15:
            raise ValueError("vertical vanishing point lies on the vanishing line")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def oriented(cls, v, l, alpha: float = 0.0, ground_pixel=None) -> "VerticalFrame":
        """Normalize ``v`` and ``l`` to unit length and fix their signs.

        ``l`` is flipped so that ``l . (x, y, 1) > 0`` on the ground side of the
        horizon, then ``v`` so that ``l . v < 0``. For a camera above the ground
        the dehomogenized vertical vanishing point (the nadir) is on the ground
        side, so it is the default reference; pass ``ground_pixel`` when ``v``
        is at infinity.
        """
        v = np.asarray(v, dtype=float).reshape(3)
        l = np.asarray(l, dtype=float).reshape(3)
        v = v / np.linalg.norm(v)
        l = l / np.linalg.norm(l)
        if ground_pixel is None:
            if abs(v[2]) < 1e-9:
                raise ValueError("vertical vanishing point at infinity: ground_pixel required")
            g = v / v[2]
        else:
            g = to_homogeneous(np.asarray(ground_pixel, dtype=float))
        if l @ g < 0:
            l = -l
        if l @ v > 0:
            v = -v
        return cls(v=v, l=l, alpha=alpha)

    def with_alpha(self, alpha: float) -> "VerticalFrame":
        return VerticalFrame(v=self.v, l=self.l, alpha=alpha)

    def below_horizon(self, pts) -> np.ndarray:
        return to_homogeneous(pts) @ self.l > 0


@dataclass(frozen=True)
class HomographyFamily:
    """Ground homography of a camera pair plus the two vertical frames.

    ``H0`` is signed so that ground points visible in both views map with a
    positive third coordinate.
    """

    H0: np.ndarray
    frame_i: VerticalFrame
    frame_j: VerticalFrame
    F: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "H0", np.asarray(self.H0, dtype=float).reshape(3, 3))
        if self.F is not None:
            object.__setattr__(self, "F", np.asarray(self.F, dtype=float).reshape(3, 3))

    def at(self, h: float) -> np.ndarray:
        return variable_height_homography(self, h)


@dataclass(frozen=True)
class EpipolarSegment:
    p_min: np.ndarray
    p_max: np.ndarray
    out_of_image: bool = False


# ----------------------------------------------------------------------------
# homogeneous helpers


def to_homogeneous(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] == 3:
        return pts
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


def dehomogenize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., :2] / x[..., 2:3]


def apply_h(H, pts) -> np.ndarray:
    """Apply a 3x3 homography to pixel points of shape (..., 2)."""
    return dehomogenize(to_homogeneous(pts) @ np.asarray(H).T)


def normalize_matrix(M) -> np.ndarray:
    """Frobenius-normalize with a deterministic sign (largest-magnitude entry positive)."""
    M = np.asarray(M, dtype=float)
    M = M / np.linalg.norm(M)
    k = np.argmax(np.abs(M))
    return M * np.sign(M.flat[k])


def skew(t) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(3)
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def line_through(p, q) -> np.ndarray:
    return np.cross(to_homogeneous(p), to_homogeneous(q))


def intersect_lines(l1, l2, min_angle: float = 1e-6) -> np.ndarray:
    """Intersection of two homogeneous lines as a homogeneous point.

    Raises :class:`GeometryError` when the lines are parallel within ``min_angle``
    (measured between their normals), since the intersection would then lie at infinity.
    """
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    n1 = l1[:2] / np.linalg.norm(l1[:2])
    n2 = l2[:2] / np.linalg.norm(l2[:2])
    if abs(n1[0] * n2[1] - n1[1] * n2[0]) < np.sin(min_angle):
        raise GeometryError("near-parallel lines")
    return np.cross(l1, l2)


def point_line_distance(pts, lines) -> np.ndarray:
    """Euclidean pixel distance between points (..., 2|3) and lines (..., 3)."""
    x = to_homogeneous(pts)
    x = x / x[..., 2:3]
    lines = np.asarray(lines, dtype=float)
    return np.abs(np.sum(x * lines, axis=-1)) / np.linalg.norm(lines[..., :2], axis=-1)


# ----------------------------------------------------------------------------
# homologies and homographies


def homology(frame: VerticalFrame, h: float) -> np.ndarray:
    """``I + alpha * h * v l^T``: maps ground images to images on the plane at height ``h``."""
    a = frame.alpha * h
    if abs(1.0 + a * (frame.l @ frame.v)) < 1e-12:
        raise SingularHomologyError(f"homology is singular at h={h}")
    return np.eye(3) + a * np.outer(frame.v, frame.l)


def homology_inv(frame: VerticalFrame, h: float) -> np.ndarray:
    # closed form (Sherman-Morrison)
    a = frame.alpha * h
    den = 1.0 + a * (frame.l @ frame.v)
    if abs(den) < 1e-12:
        raise SingularHomologyError(f"homology is singular at h={h}")
    return np.eye(3) - (a / den) * np.outer(frame.v, frame.l)


def variable_height_homography(fam: HomographyFamily, h: float) -> np.ndarray:
    return homology(fam.frame_j, h) @ fam.H0 @ homology_inv(fam.frame_i, h)


def epipolar_segment(p_i, fam: HomographyFamily, h_min: float, h_max: float,
                     intrinsics_j: CameraIntrinsics | None = None) -> EpipolarSegment:
    if h_min > h_max:
        raise ValueError("h_min must not exceed h_max")
    p_min = apply_h(fam.at(h_min), p_i)
    p_max = apply_h(fam.at(h_max), p_i)
    out = False
    if intrinsics_j is not None:
        out = not _segment_hits_image(p_min, p_max, intrinsics_j)
    return EpipolarSegment(p_min=p_min, p_max=p_max, out_of_image=out)


def _segment_hits_image(a, b, K: CameraIntrinsics, samples: int = 64) -> bool:
    s = np.linspace(0.0, 1.0, samples)[:, None]
    pts = (1 - s) * a + s * b
    return bool(K.contains(pts).any())


# ----------------------------------------------------------------------------
# two-view geometry


def fundamental_from_pose(pose: RelativePose, K_i: CameraIntrinsics, K_j: CameraIntrinsics) -> np.ndarray:
    E = skew(pose.t) @ pose.R
    return K_j.K_inv.T @ E @ K_i.K_inv


def triangulate(p_i, p_j, pose: RelativePose, K_i: CameraIntrinsics, K_j: CameraIntrinsics,
                return_depths: bool = False, min_angle: float = 1e-6):
    """Midpoint triangulation in camera-i coordinates.

    Accepts single points or arrays of shape (N, 2). With ``return_depths``
    also returns the depths along both rays; a negative depth means the point
    lies behind that camera.
    """
    single = np.asarray(p_i).ndim == 1
    d_i = to_homogeneous(np.atleast_2d(p_i)) @ K_i.K_inv.T
    d_j = to_homogeneous(np.atleast_2d(p_j)) @ K_j.K_inv.T @ pose.R  # R^T d_j, row-wise
    d_i = d_i / np.linalg.norm(d_i, axis=1, keepdims=True)
    d_j = d_j / np.linalg.norm(d_j, axis=1, keepdims=True)
    c_j = pose.center_j

    # minimize |s d_i - (c_j + u d_j)|
    b = np.sum(d_i * d_j, axis=1)
    sin2 = 1.0 - b * b
    if np.any(sin2 < np.sin(min_angle) ** 2):
        raise DegenerateRaysError("back-projected rays are parallel")
    e = d_i @ c_j
    f = d_j @ c_j
    s = (e - b * f) / sin2
    u = (b * e - f) / sin2
    X = 0.5 * (s[:, None] * d_i + c_j + u[:, None] * d_j)
    depth_j = (X @ pose.R.T + pose.t)[:, 2]
    depth_i = X[:, 2]
    if single:
        X, depth_i, depth_j = X[0], depth_i[0], depth_j[0]
    if return_depths:
        return X, depth_i, depth_j
    return X


def decompose_fundamental(F, K_i: CameraIntrinsics, K_j: CameraIntrinsics, witnesses_i, witnesses_j) -> RelativePose:
    """Recover ``(R, t)`` with ``|t| = 1`` from a fundamental matrix.

    The four SVD candidates are scored by how many witness matches
    triangulate in front of both cameras; the winner needs a strict majority.
    """
    wi = np.atleast_2d(np.asarray(witnesses_i, dtype=float))
    wj = np.atleast_2d(np.asarray(witnesses_j, dtype=float))
    if len(wi) < 1:
        raise InsufficientMatchesError("need at least one witness match")
    E = K_j.K.T @ np.asarray(F, dtype=float) @ K_i.K
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    best, best_votes = None, -1
    votes = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for sign in (1.0, -1.0):
            pose = RelativePose(R=R, t=sign * t)
            try:
                _, z_i, z_j = triangulate(wi, wj, pose, K_i, K_j, return_depths=True, min_angle=1e-12)
                n = int(np.sum((z_i > 0) & (z_j > 0)))
            except DegenerateRaysError:
                n = 0
            votes.append(n)
            if n > best_votes:
                best, best_votes = pose, n
    if best_votes * 2 <= len(wi):
        raise AmbiguousCheiralityError(f"no candidate wins a strict majority (votes {votes})")
    return best


def sampson_distances(F, p_i, p_j) -> np.ndarray:
    """First-order geometric error of each match with respect to ``F``, in pixels."""
    x_i = to_homogeneous(np.atleast_2d(p_i))
    x_j = to_homogeneous(np.atleast_2d(p_j))
    Fx = x_i @ F.T
    Ftx = x_j @ F
    num = np.sum(x_j * Fx, axis=1)
    den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Ftx[:, 0] ** 2 + Ftx[:, 1] ** 2
    return num / np.sqrt(np.maximum(den, 1e-300))


def _rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` to unit vector ``b``."""
    axis = np.cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-15:
        return np.eye(3)
    return Rotation.from_rotvec(axis / s * np.arctan2(s, c)).as_matrix()


def refine_pose(pose: RelativePose, K_i: CameraIntrinsics, K_j: CameraIntrinsics, p_i, p_j,
                vertical=None, max_iter: int = 50) -> RelativePose:
    """Minimize the Sampson error of the inlier matches over rotation and translation direction.

    The essential matrix has five degrees of freedom against the seven of a
    fundamental matrix, which matters for narrow fields of view. With
    ``vertical = (v_i, v_j)`` the rotation is also held to map the vertical
    direction of camera i onto that of camera j, leaving one rotational
    degree of freedom. ``|t|`` is kept.
    """
    R0, t0 = pose.R, pose.t
    scale = np.linalg.norm(t0)
    u = t0 / scale
    a = np.eye(3)[np.argmin(np.abs(u))]
    b1 = np.cross(u, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(u, b1)
    if vertical is not None:
        d_i = K_i.K_inv @ np.asarray(vertical[0], dtype=float)
        d_j = K_j.K_inv @ np.asarray(vertical[1], dtype=float)
        d_i /= np.linalg.norm(d_i)
        d_j /= np.linalg.norm(d_j)
        if (R0 @ d_i) @ d_j < 0:
            d_j = -d_j
        R0 = _rotation_between(R0 @ d_i, d_j) @ R0

        def rot(x):
            return Rotation.from_rotvec(x[0] * d_j).as_matrix() @ R0, x[1:]
        x0 = np.zeros(3)
    else:
        def rot(x):
            return Rotation.from_rotvec(x[:3]).as_matrix() @ R0, x[3:]
        x0 = np.zeros(5)

    def make(x):
        R, (ta, tb) = rot(x)
        t = u + ta * b1 + tb * b2
        return RelativePose(R=R, t=scale * t / np.linalg.norm(t))

    def res(x):
        return sampson_distances(fundamental_from_pose(make(x), K_i, K_j), p_i, p_j)

    fit = levenberg_marquardt(res, x0, max_iter=max_iter)
    return make(fit.x)


def inject_metric_scale(pose: RelativePose, distance: float) -> RelativePose:
    if distance <= 0:
        raise ValueError("laser distance must be positive")
    n = np.linalg.norm(pose.t)
    if n <= 0:
        raise ValueError("translation has zero length")
    return RelativePose(R=pose.R, t=pose.t * (distance / n))


def propagate_scale_triplet(pose_ij: RelativePose, pose_ik: RelativePose, p_i, p_j, p_k,
                            K_i: CameraIntrinsics, K_j: CameraIntrinsics, K_k: CameraIntrinsics,
                            min_matches: int = 8) -> tuple[float, RelativePose]:
    """Rescale ``pose_ik`` so that its reconstruction agrees with the ``ij`` one.

    Each triple match is triangulated in both pairs; the scale is the median
    ratio of the distances of the two reconstructions from camera i.
    """
    p_i = np.atleast_2d(p_i)
    if len(p_i) < min_matches:
        raise InsufficientMatchesError(f"need >= {min_matches} triple matches, got {len(p_i)}")
    X_ij = triangulate(p_i, p_j, pose_ij, K_i, K_j)
    X_ik = triangulate(p_i, p_k, pose_ik, K_i, K_k)
    r = np.linalg.norm(X_ij, axis=1) / np.linalg.norm(X_ik, axis=1)
    s = float(np.median(r[np.isfinite(r)]))
    return s, RelativePose(R=pose_ik.R, t=pose_ik.t * s)


def rotation_angle(R) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
