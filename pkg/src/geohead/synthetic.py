"""Ground-truth world: pedestrians on a plane, pinhole cameras, a ray-cast renderer.

World frame: ground plane ``z = 0``, ``z`` up, meters. Pedestrians are
vertical cylinders (torso) capped by a sphere (head) whose top sits exactly
at the pedestrian height. Textures are 3D value noise attached to the
surfaces, so every view sees the same albedo at the same 3D point.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    HomographyFamily,
    RelativePose,
    VerticalFrame,
    fundamental_from_pose,
)

HEAD_RADIUS = 0.11
SHOULDER_DROP = 0.22
HEAD_TEXTURE_FREQ = 14.0  # cycles per meter


class EmptyViewError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """World-to-camera extrinsics ``X_c = R @ X_w + t`` plus intrinsics."""

    R: np.ndarray
    t: np.ndarray
    intrinsics: CameraIntrinsics

    @classmethod
    def look_at(cls, center, target, intrinsics: CameraIntrinsics, up=(0.0, 0.0, 1.0)) -> "Camera":
        center = np.asarray(center, dtype=float)
        z = np.asarray(target, dtype=float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R=R, t=-R @ center, intrinsics=intrinsics)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def P(self) -> np.ndarray:
        return self.intrinsics.K @ np.hstack([self.R, self.t[:, None]])

    def project(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        x = X @ self.P[:, :3].T + self.P[:, 3]
        return x[:, :2] / x[:, 2:3], x[:, 2]

    def to_camera(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.R.T + self.t

    def rays(self, pixels) -> np.ndarray:
        """Unit world-frame ray directions through pixel coordinates (N, 2)."""
        d = np.column_stack([pixels, np.ones(len(pixels))]) @ self.intrinsics.K_inv.T @ self.R
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class Pedestrian:
    x: float
    y: float
    height: float  # cm
    radius: float = 22.0  # torso radius, cm
    seed: int = 0
    vx: float = 0.0  # m per frame
    vy: float = 0.0

    def position(self, frame: int = 0) -> tuple[float, float]:
        return self.x + self.vx * frame, self.y + self.vy * frame


@dataclass
class SceneSpec:
    pedestrians: list[Pedestrian]
    cameras: list[Camera]
    ground_seed: int = 0
    reference: int = 0
    ground_freq: float = 0.5  # base frequency of the ground texture, cycles per meter
    ground_octaves: int = 5

    def to_dict(self) -> dict:
        return {
            "ground_seed": self.ground_seed,
            "reference": self.reference,
            "ground_freq": self.ground_freq,
            "ground_octaves": self.ground_octaves,
            "pedestrians": [asdict(p) for p in self.pedestrians],
            "cameras": [
                {
                    "R": c.R.ravel().tolist(),
                    "t": c.t.tolist(),
                    "intrinsics": asdict(c.intrinsics),
                }
                for c in self.cameras
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        cams = [
            Camera(
                R=np.asarray(c["R"], dtype=float).reshape(3, 3),
                t=np.asarray(c["t"], dtype=float),
                intrinsics=CameraIntrinsics(**c["intrinsics"]),
            )
            for c in d["cameras"]
        ]
        peds = [Pedestrian(**p) for p in d["pedestrians"]]
        return cls(pedestrians=peds, cameras=cams, ground_seed=d.get("ground_seed", 0),
                   reference=d.get("reference", 0), ground_freq=d.get("ground_freq", 0.5),
                   ground_octaves=d.get("ground_octaves", 5))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class RenderedView:
    image: np.ndarray  # float64 gray levels in [0, 255]
    height: np.ndarray  # cm, 0 for ground
    points: np.ndarray  # (H, W, 3) world points hit by the pixel-center rays
    owner: np.ndarray = field(default=None)  # pedestrian index per pixel, -1 for ground


# ----------------------------------------------------------------------------
# rigs and scenes


def default_intrinsics(width: int = 320, height: int = 240, focal: float = 300.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)


def default_rig(width: int = 320, height: int = 240, focal: float = 300.0,
                baselines=(9.35, 10.1), camera_height: float = 6.0,
                target=(0.0, 12.0, 0.0), center=(0.0, -2.0)) -> list[Camera]:
    """Reference camera in the middle, two lateral cameras at the given baselines.

    The defaults cover an overlap region of roughly 20 m x 20 m.
    """
    K = default_intrinsics(width, height, focal)
    c0 = np.array([center[0], center[1], camera_height])
    dirs = [np.array([-0.95, 0.30, -0.04]), np.array([0.95, 0.28, 0.05])]
    cams = [Camera.look_at(c0, target, K)]
    for b, d in zip(baselines, dirs):
        c = c0 + b * d / np.linalg.norm(d)
        cams.append(Camera.look_at(c, target, K))
    return cams


def compact_rig(width: int = 320, height: int = 240, focal: float = 360.0,
                baselines=(9.35, 10.1)) -> list[Camera]:
    """Same baselines as :func:`default_rig`, aimed at a closer 8 m x 8 m patch."""
    return default_rig(width, height, focal, baselines, camera_height=5.0,
                       target=(0.0, 9.0, 0.0), center=(0.0, 0.0))


def crowd_rig(width: int = 320, height: int = 240, focal: float = 1200.0,
              baselines=(9.35, 10.1)) -> list[Camera]:
    """Same baselines, cameras 12 m up and about 20 m from a 4 m x 4 m crowd patch.

    The long focal length keeps heads around 13 px wide at 320x240.
    """
    return default_rig(width, height, focal, baselines, camera_height=12.0,
                       target=(0.0, 9.0, 0.0), center=(0.0, -7.0))


CROWD_REGION = (-2.0, 2.0, 7.0, 11.0)


def random_pedestrians(n: int, region, seed: int, min_gap: float = 0.75,
                       heights=(150.0, 195.0), speed: float = 0.0, cameras=None,
                       frames: int = 1, margin: float = 20.0) -> list[Pedestrian]:
    """Place ``n`` pedestrians in ``region = (xmin, xmax, ymin, ymax)`` with a minimum spacing.

    With ``cameras``, a candidate is kept only if its head top and foot stay at
    least ``margin`` pixels inside every image during the first ``frames``
    frames.
    """
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = region
    out: list[Pedestrian] = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 10000:
            raise ValueError("could not place pedestrians with the requested spacing")
        x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
        h = float(np.round(rng.uniform(*heights), 1))
        ang = rng.uniform(0, 2 * np.pi)
        ped = Pedestrian(x=float(x), y=float(y), height=h, radius=float(rng.uniform(18, 24)),
                         seed=int(rng.integers(1, 2**31 - 1)),
                         vx=float(speed * np.cos(ang)), vy=float(speed * np.sin(ang)))
        track = [ped.position(f) for f in range(frames)]
        if any(np.hypot(px - q.x - q.vx * f, py - q.y - q.vy * f) < min_gap
               for q in out for f, (px, py) in enumerate(track)):
            continue
        if cameras is not None and not all(_in_view(cam, track, h / 100.0, margin) for cam in cameras):
            continue
        out.append(ped)
    return out


def _in_view(cam: Camera, track, h: float, margin: float) -> bool:
    X = np.array([[x, y, z] for x, y in track for z in (0.0, h)])
    uv, depth = cam.project(X)
    K = cam.intrinsics
    return bool(np.all(depth > 0) and np.all(uv[:, 0] >= margin) and np.all(uv[:, 0] <= K.width - 1 - margin)
                and np.all(uv[:, 1] >= margin) and np.all(uv[:, 1] <= K.height - 1 - margin))


# ----------------------------------------------------------------------------
# procedural texture


def _hash01(ix, iy, iz, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
             ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
             ^ np.uint64(seed) * np.uint64(0x27D4EB2F165667C5))
        h ^= h >> np.uint64(31)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(p, seed: int, base_freq: float = 4.0, octaves: int = 4) -> np.ndarray:
    """Multi-octave 3D value noise in [0, 1] evaluated at points ``p`` (N, 3)."""
    p = np.asarray(p, dtype=float)
    total = np.zeros(len(p))
    amp, norm, freq = 1.0, 0.0, base_freq
    for o in range(octaves):
        q = p * freq + 17.0 * o
        i0 = np.floor(q).astype(np.int64)
        f = q - i0
        s = f * f * (3.0 - 2.0 * f)
        acc = np.zeros(len(p))
        for dx in (0, 1):
            wx = s[:, 0] if dx else 1.0 - s[:, 0]
            for dy in (0, 1):
                wy = s[:, 1] if dy else 1.0 - s[:, 1]
                for dz in (0, 1):
                    wz = s[:, 2] if dz else 1.0 - s[:, 2]
                    acc += wx * wy * wz * _hash01(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed + o)
        total += amp * acc
        norm += amp
        amp *= 0.55
        freq *= 2.0
    return total / norm


# ----------------------------------------------------------------------------
# ray casting


def _cast(scene: SceneSpec, origin, dirs, frame: int):
    """Nearest hit along each ray: distance, surface normal, owner (-1 ground, -2 none)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    owner = np.full(n, -2, dtype=np.int64)
    normal = np.zeros((n, 3))
    part = np.zeros(n, dtype=np.int64)  # 0 torso, 1 head, 2 ground
    ox, oy, oz = origin

    down = dirs[:, 2] < -1e-12
    tg = np.where(down, -oz / np.where(down, dirs[:, 2], -1.0), np.inf)
    hit = tg < best
    best[hit] = tg[hit]
    owner[hit] = -1
    normal[hit] = (0.0, 0.0, 1.0)
    part[hit] = 2

    for k, ped in enumerate(scene.pedestrians):
        px, py = ped.position(frame)
        h = ped.height / 100.0
        r = ped.radius / 100.0
        ztop = h - SHOULDER_DROP
        # torso: vertical cylinder wall
        dx, dy = ox - px, oy - py
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (dx * dirs[:, 0] + dy * dirs[:, 1])
        c = dx * dx + dy * dy - r * r
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0) & (a > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = np.where(ok, (-b - sq) / (2.0 * np.where(a > 1e-15, a, 1.0)), np.inf)
        z1 = oz + t1 * dirs[:, 2]
        wall = ok & (t1 > 0) & (z1 >= 0) & (z1 <= ztop) & (t1 < best)
        if wall.any():
            best[wall] = t1[wall]
            owner[wall] = k
            part[wall] = 0
            hx = ox + t1[wall] * dirs[wall, 0] - px
            hy = oy + t1[wall] * dirs[wall, 1] - py
            normal[wall] = np.column_stack([hx / r, hy / r, np.zeros(wall.sum())])
        # torso: top disk (shoulders)
        dz = dirs[:, 2]
        tt = np.where(np.abs(dz) > 1e-15, (ztop - oz) / np.where(np.abs(dz) > 1e-15, dz, 1.0), np.inf)
        qx = ox + tt * dirs[:, 0] - px
        qy = oy + tt * dirs[:, 1] - py
        cap = (tt > 0) & (qx * qx + qy * qy <= r * r) & (tt < best)
        if cap.any():
            best[cap] = tt[cap]
            owner[cap] = k
            part[cap] = 0
            normal[cap] = (0.0, 0.0, 1.0)
        # head sphere
        cz = h - HEAD_RADIUS
        sx, sy, sz = ox - px, oy - py, oz - cz
        bb = sx * dirs[:, 0] + sy * dirs[:, 1] + sz * dirs[:, 2]
        cc = sx * sx + sy * sy + sz * sz - HEAD_RADIUS ** 2
        dd = bb * bb - cc
        ok = dd >= 0
        ts = np.where(ok, -bb - np.sqrt(np.where(ok, dd, 0.0)), np.inf)
        head = ok & (ts > 0) & (ts < best)
        if head.any():
            best[head] = ts[head]
            owner[head] = k
            part[head] = 1
            hp = origin + ts[head, None] * dirs[head] - np.array([px, py, cz])
            normal[head] = hp / HEAD_RADIUS
    return best, normal, owner, part


_LIGHT = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])


def _shade(scene: SceneSpec, pts, normal, owner, part, frame: int) -> np.ndarray:
    out = np.full(len(pts), 128.0)
    g = owner == -1
    if g.any():
        tex = value_noise(pts[g], scene.ground_seed, base_freq=scene.ground_freq,
                          octaves=scene.ground_octaves)
        out[g] = 40.0 + 170.0 * tex
    for k, ped in enumerate(scene.pedestrians):
        m = owner == k
        if not m.any():
            continue
        px, py = ped.position(frame)
        local = pts[m] - np.array([px, py, 0.0])
        is_head = part[m] == 1
        tex = value_noise(local, ped.seed, base_freq=6.0, octaves=3)
        # finer, contrast-stretched pattern on the head so that its interior
        # carries as much gradient energy as its outline
        hair = np.clip(2.5 * (value_noise(local, ped.seed + 1, base_freq=HEAD_TEXTURE_FREQ, octaves=2) - 0.5) + 0.5,
                       0.0, 1.0)
        albedo = np.where(is_head, 20.0 + 220.0 * hair, 30.0 + 200.0 * tex)
        lam = 0.55 + 0.45 * np.clip(normal[m] @ _LIGHT, 0.0, 1.0)
        out[m] = albedo * lam
    return out


def render(scene: SceneSpec, camera_index: int, frame: int = 0, supersample: int = 2,
           require_pedestrian: bool = False) -> RenderedView:
    """Ray-cast one view. Deterministic given the scene.

    ``height`` and ``points`` come from the pixel-center ray; the image is
    the mean of ``supersample**2`` sub-pixel rays.
    """
    cam = scene.cameras[camera_index]
    K = cam.intrinsics
    W, H = K.width, K.height
    xs, ys = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    centers = np.column_stack([xs.ravel(), ys.ravel()])
    origin = cam.center

    dirs = cam.rays(centers)
    dist, normal, owner, part = _cast(scene, origin, dirs, frame)
    pts = origin + np.where(np.isfinite(dist), dist, 0.0)[:, None] * dirs
    height = np.where(owner >= 0, pts[:, 2] * 100.0, 0.0)
    if require_pedestrian and not (owner >= 0).any():
        raise EmptyViewError("no pedestrian visible in this view")

    image = np.zeros(len(centers))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    for oy in offs:
        for ox in offs:
            d = cam.rays(centers + (ox, oy))
            dd, nn, ow, pa = _cast(scene, origin, d, frame)
            p = origin + np.where(np.isfinite(dd), dd, 0.0)[:, None] * d
            val = _shade(scene, p, nn, ow, pa, frame)
            val[ow == -2] = 200.0  # sky
            image += val
    image /= supersample ** 2
    return RenderedView(
        image=image.reshape(H, W),
        height=height.reshape(H, W),
        points=pts.reshape(H, W, 3),
        owner=owner.reshape(H, W),
    )


def visible(scene: SceneSpec, camera_index: int, X, frame: int = 0, tol: float = 1e-6) -> np.ndarray:
    """True where world points ``X`` are the first surface hit from the camera and in the image."""
    cam = scene.cameras[camera_index]
    X = np.atleast_2d(np.asarray(X, dtype=float))
    px, depth = cam.project(X)
    inside = cam.intrinsics.contains(px) & (depth > 0)
    d = X - cam.center
    rng = np.linalg.norm(d, axis=1)
    dist, _, _, _ = _cast(scene, cam.center, d / rng[:, None], frame)
    return inside & (dist >= rng - tol)


# ----------------------------------------------------------------------------
# ground truth derivation


def true_frame(cam: Camera) -> VerticalFrame:
    P = cam.P
    frame = VerticalFrame.oriented(P[:, 2], np.cross(P[:, 0], P[:, 1]))
    s = float(P[:, 2] @ frame.v)  # P3 = s v
    alpha = s / float(frame.l @ P[:, 3])
    return frame.with_alpha(alpha)


def ground_homography(cam_i: Camera, cam_j: Camera) -> np.ndarray:
    G_i = cam_i.P[:, [0, 1, 3]]
    G_j = cam_j.P[:, [0, 1, 3]]
    return G_j @ np.linalg.inv(G_i)


def relative_pose(cam_i: Camera, cam_j: Camera) -> RelativePose:
    R = cam_j.R @ cam_i.R.T
    return RelativePose(R=R, t=cam_j.t - R @ cam_i.t)


@dataclass
class PairTruth:
    frame_i: VerticalFrame
    frame_j: VerticalFrame
    family: HomographyFamily
    pose: RelativePose
    F: np.ndarray
    camera_height_i: float


def derive_truth(scene: SceneSpec, i: int, j: int) -> PairTruth:
    ci, cj = scene.cameras[i], scene.cameras[j]
    fi, fj = true_frame(ci), true_frame(cj)
    pose = relative_pose(ci, cj)
    F = fundamental_from_pose(pose, ci.intrinsics, cj.intrinsics)
    fam = HomographyFamily(H0=ground_homography(ci, cj), frame_i=fi, frame_j=fj, F=F)
    return PairTruth(frame_i=fi, frame_j=fj, family=fam, pose=pose, F=F,
                     camera_height_i=float(ci.center[2]))


@dataclass
class MatchSample:
    """Sampled correspondences with their generating 3D points."""

    pts: list[np.ndarray]  # one (N, 2) array per requested camera
    world: np.ndarray  # (N, 3)
    kind: np.ndarray  # 0 ground, 1 body, 2 outlier
    owner: np.ndarray


def sample_matches(scene: SceneSpec, cameras, n_ground: int = 150, n_body: int = 150,
                   noise: float = 0.0, outlier_fraction: float = 0.0, seed: int = 0,
                   body_heights=(0.3, 2.0), frame: int = 0) -> MatchSample:
    """Correspondences across ``cameras`` (indices) for points visible in all of them.

    Body points are drawn on pedestrian surfaces with heights in
    ``body_heights`` (meters, clipped to the pedestrian). A fraction of the
    matches is replaced by outliers: uniformly random pixels in every view
    but the first.
    """
    rng = np.random.default_rng(seed)
    cams = [scene.cameras[c] for c in cameras]

    def region():
        xs = np.array([p.position(frame)[0] for p in scene.pedestrians] or [0.0])
        ys = np.array([p.position(frame)[1] for p in scene.pedestrians] or [10.0])
        return xs.min() - 6, xs.max() + 6, ys.min() - 6, ys.max() + 6

    xmin, xmax, ymin, ymax = region()
    world, kind, owner = [], [], []

    def accept(X):
        ok = np.ones(len(X), dtype=bool)
        for c in cameras:
            ok &= visible(scene, c, X, frame)
        return ok

    got = 0
    for _ in range(200):
        if got >= n_ground:
            break
        X = np.column_stack([rng.uniform(xmin, xmax, 4 * n_ground), rng.uniform(ymin, ymax, 4 * n_ground),
                             np.zeros(4 * n_ground)])
        X = X[accept(X)][: n_ground - got]
        world.append(X)
        kind.append(np.zeros(len(X), dtype=int))
        owner.append(np.full(len(X), -1))
        got += len(X)

    got = 0
    if scene.pedestrians and n_body > 0:
        for _ in range(400):
            if got >= n_body:
                break
            m = 4 * n_body
            k = rng.integers(0, len(scene.pedestrians), m)
            X = np.zeros((m, 3))
            for idx in range(m):
                ped = scene.pedestrians[k[idx]]
                px, py = ped.position(frame)
                h = ped.height / 100.0
                z = rng.uniform(body_heights[0], min(body_heights[1], h))
                ang = rng.uniform(0, 2 * np.pi)
                if z > h - SHOULDER_DROP:
                    # head sphere
                    cz = h - HEAD_RADIUS
                    dz = np.clip(z - cz, -HEAD_RADIUS, HEAD_RADIUS)
                    rr = np.sqrt(max(HEAD_RADIUS ** 2 - dz * dz, 0.0))
                    X[idx] = (px + rr * np.cos(ang), py + rr * np.sin(ang), cz + dz)
                else:
                    r = ped.radius / 100.0
                    X[idx] = (px + r * np.cos(ang), py + r * np.sin(ang), z)
            ok = accept(X)
            X, k = X[ok][: n_body - got], k[ok][: n_body - got]
            world.append(X)
            kind.append(np.ones(len(X), dtype=int))
            owner.append(k)
            got += len(X)

    world = np.vstack(world) if world else np.zeros((0, 3))
    kind = np.concatenate(kind) if kind else np.zeros(0, dtype=int)
    owner = np.concatenate(owner) if owner else np.zeros(0, dtype=int)
    pts = []
    for cam in cams:
        px, _ = cam.project(world)
        pts.append(px + rng.normal(0.0, noise, px.shape) if noise > 0 else px)
    n = len(world)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        idx = rng.choice(n, n_out, replace=False)
        for c in range(1, len(cams)):
            K = cams[c].intrinsics
            pts[c][idx] = np.column_stack([rng.uniform(0, K.width - 1, n_out), rng.uniform(0, K.height - 1, n_out)])
        kind = kind.copy()
        kind[idx] = 2
    return MatchSample(pts=pts, world=world, kind=kind, owner=owner)
