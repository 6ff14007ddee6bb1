"""Dense DAISY descriptor field and the histogram-wise dissimilarity used as data cost."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# cost returned for samples that fall outside the neighbour image; the largest
# value a dissimilarity between unit histograms can take
SENTINEL_COST = 2.0


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class DaisyParams:
    radius: float = 15.0
    rings: int = 3
    histograms: int = 8  # per ring
    orientations: int = 8

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if min(self.rings, self.histograms, self.orientations) < 1:
            raise ValueError("rings, histograms and orientations must be >= 1")

    @property
    def S(self) -> int:
        return self.rings * self.histograms + 1

    def sample_layout(self) -> list[tuple[float, float, int]]:
        """``(dx, dy, ring_level)`` of every histogram, center first."""
        out = [(0.0, 0.0, 0)]
        for r in range(self.rings):
            rad = self.radius * (r + 1) / self.rings
            for k in range(self.histograms):
                a = 2.0 * np.pi * k / self.histograms
                out.append((rad * np.cos(a), rad * np.sin(a), r))
        return out

    def sigmas(self) -> list[float]:
        return [self.radius * (r + 1) / (2.0 * self.rings) for r in range(self.rings)]


@dataclass
class DescriptorField:
    data: np.ndarray  # (H, W, S, O) float32, each histogram unit-norm or zero
    flat: np.ndarray  # (H, W, S) bool, histogram had no gradient energy
    border: np.ndarray  # (H, W) bool, descriptor reaches outside the image
    params: DaisyParams

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def orientation_maps(image, n: int) -> np.ndarray:
    """Half-rectified directional derivatives, shape (n, H, W)."""
    gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
    out = np.empty((n,) + gx.shape)
    for o in range(n):
        a = 2.0 * np.pi * o / n
        out[o] = np.maximum(np.cos(a) * gx + np.sin(a) * gy, 0.0)
    return out


def compute_field(image, params: DaisyParams = DaisyParams(), workers: int = 1,
                  flat_eps: float = 1e-9) -> DescriptorField:
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape
    need = int(np.ceil(2 * params.radius + 1))
    if H < need or W < need:
        raise ImageTooSmallError(f"image {W}x{H} smaller than descriptor footprint {need}")
    gmaps = orientation_maps(image, params.orientations)
    layout = params.sample_layout()
    sig = params.sigmas()

    def smooth(level):
        return np.stack([ndimage.gaussian_filter(g, sig[level], mode="constant", cval=0.0) for g in gmaps])

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            layers = list(ex.map(smooth, range(params.rings)))
    else:
        layers = [smooth(r) for r in range(params.rings)]

    data = np.empty((H, W, params.S, params.orientations), dtype=np.float32)
    for k, (dx, dy, lev) in enumerate(layout):
        for o in range(params.orientations):
            if dx == 0.0 and dy == 0.0:
                data[:, :, k, o] = layers[lev][o]
            else:
                # out[y, x] = layer[y + dy, x + dx], zero outside
                data[:, :, k, o] = ndimage.shift(layers[lev][o], (-dy, -dx), order=1, mode="constant", cval=0.0)
    norms = np.linalg.norm(data.astype(np.float64), axis=3)
    flat = norms <= flat_eps
    data /= np.where(flat, 1.0, norms)[..., None].astype(np.float32)
    data[flat] = 0.0
    ys, xs = np.mgrid[0:H, 0:W]
    R = params.radius
    border = (xs < R) | (ys < R) | (xs > W - 1 - R) | (ys > H - 1 - R)
    return DescriptorField(data=data, flat=flat, border=border, params=params)


def interpolate(field: DescriptorField, qx, qy) -> np.ndarray:
    """Bilinear interpolation of the field at subpixel points, histograms renormalized.

    ``qx``/``qy`` must be in bounds; returns (N, S, O) float64. Samples at
    integer positions are returned unchanged.
    """
    qx = np.asarray(qx, dtype=np.float64).ravel()
    qy = np.asarray(qy, dtype=np.float64).ravel()
    H, W = field.shape
    x0 = np.clip(np.floor(qx).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(qy).astype(np.int64), 0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (qx - x0)[:, None, None]
    fy = (qy - y0)[:, None, None]
    d = field.data
    out = (d[y0, x0] * ((1 - fx) * (1 - fy)) + d[y0, x1] * (fx * (1 - fy))
           + d[y1, x0] * ((1 - fx) * fy) + d[y1, x1] * (fx * fy))
    n = np.linalg.norm(out, axis=2, keepdims=True)
    exact = ((fx == 0) & (fy == 0))[:, 0, 0]
    n[exact] = 1.0
    return np.where(n > 1e-12, out / np.where(n > 1e-12, n, 1.0), 0.0)


def in_bounds(field: DescriptorField, qx, qy) -> np.ndarray:
    H, W = field.shape
    qx = np.asarray(qx)
    qy = np.asarray(qy)
    return np.isfinite(qx) & np.isfinite(qy) & (qx >= 0) & (qx <= W - 1) & (qy >= 0) & (qy <= H - 1)


def dissimilarity(field_i: DescriptorField, p, field_j: DescriptorField, q) -> float:
    """Mean over histograms of the L2 distance between ``D_i(p)`` and ``D_j(q)``.

    ``p`` is an integer pixel ``(x, y)``; ``q`` may be subpixel. Returns
    :data:`SENTINEL_COST` when ``q`` is outside ``field_j``.
    """
    x, y = int(p[0]), int(p[1])
    if not in_bounds(field_j, q[0], q[1]):
        return SENTINEL_COST
    a = field_i.data[y, x].astype(np.float64)
    b = interpolate(field_j, [q[0]], [q[1]])[0]
    return float(np.linalg.norm(a - b, axis=1).mean())


def dissimilarity_map(field_i: DescriptorField, field_j: DescriptorField, qx, qy,
                      chunk: int = 8192) -> np.ndarray:
    """Dissimilarity of every pixel of ``field_i`` with ``field_j`` sampled at ``(qx, qy)``.

    ``qx``/``qy`` have the image shape of ``field_i``; out-of-bounds samples
    get :data:`SENTINEL_COST`.
    """
    H, W = field_i.shape
    qx = np.asarray(qx, dtype=np.float64).ravel()
    qy = np.asarray(qy, dtype=np.float64).ravel()
    out = np.full(H * W, SENTINEL_COST)
    ok = np.flatnonzero(in_bounds(field_j, qx, qy))
    src = field_i.data.reshape(H * W, *field_i.data.shape[2:])
    for s in range(0, len(ok), chunk):
        idx = ok[s:s + chunk]
        b = interpolate(field_j, qx[idx], qy[idx])
        a = src[idx].astype(np.float64)
        out[idx] = np.sqrt(((a - b) ** 2).sum(axis=2)).mean(axis=1)
    return out.reshape(H, W)


_MAGIC = b"GEOHEAD-DAISY"


def save_field(field: DescriptorField, path) -> None:
    """Raw float32 dump preceded by a one-line text header ``MAGIC H W S O R Q T``."""
    H, W, S, O = field.data.shape
    p = field.params
    header = f"{_MAGIC.decode()} {H} {W} {S} {O} {p.radius} {p.rings} {p.histograms}\n".encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(field.data, dtype="<f4").tobytes())


def load_field(path) -> DescriptorField:
    with open(path, "rb") as f:
        header = f.readline().decode().split()
        if header[0] != _MAGIC.decode():
            raise ValueError("not a descriptor dump")
        H, W, S, O = (int(v) for v in header[1:5])
        params = DaisyParams(radius=float(header[5]), rings=int(header[6]), histograms=int(header[7]),
                             orientations=O)
        data = np.frombuffer(f.read(), dtype="<f4").reshape(H, W, S, O).astype(np.float32)
    flat = np.linalg.norm(data, axis=3) == 0
    ys, xs = np.mgrid[0:H, 0:W]
    R = params.radius
    border = (xs < R) | (ys < R) | (xs > W - 1 - R) | (ys > H - 1 - R)
    return DescriptorField(data=data, flat=flat, border=border, params=params)
