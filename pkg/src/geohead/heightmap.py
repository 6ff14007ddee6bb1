"""Height-label MRF terms: label set, data-cost volume, |grad| map and discontinuity cost.

Heights are in centimeters throughout this module; homographies are
evaluated at ``h / 100`` meters.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .descriptor import SENTINEL_COST, DescriptorField, dissimilarity_map
from .geometry import HomographyFamily, VerticalFrame, homology, homology_inv

UNKNOWN = None  # pass as a label value to mean "no pedestrian"


@dataclass(frozen=True)
class LabelSet:
    h_min: float = 140.0
    h_max: float = 200.0
    delta_h: float = 2.5

    def __post_init__(self):
        if not (self.delta_h > 0 and self.h_max >= self.h_min):
            raise ValueError("need delta_h > 0 and h_max >= h_min")
        steps = (self.h_max - self.h_min) / self.delta_h
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("(h_max - h_min) must be a multiple of delta_h")

    @property
    def n_heights(self) -> int:
        return int(round((self.h_max - self.h_min) / self.delta_h)) + 1

    @property
    def n_labels(self) -> int:
        return self.n_heights + 1

    @property
    def unknown(self) -> int:
        """Index of the unknown label (always last)."""
        return self.n_heights

    @property
    def heights(self) -> np.ndarray:
        return self.h_min + self.delta_h * np.arange(self.n_heights)

    @property
    def h_bar(self) -> float:
        return 0.5 * (self.h_min + self.h_max)

    def index_of(self, h) -> int:
        if h is UNKNOWN:
            return self.unknown
        k = (h - self.h_min) / self.delta_h
        if abs(k - round(k)) > 1e-9 or not 0 <= round(k) < self.n_heights:
            raise ValueError(f"{h} is not a label height")
        return int(round(k))


@dataclass(frozen=True)
class MrfConfig:
    lam: float = 0.07
    K: float = 4.0  # truncation, in label steps
    K_data_u: float | None = None  # None: percentile of the frame's height-label costs
    data_u_percentile: float = 10.0
    K_V_u: float | None = None  # None: equal to K
    iterations: int = 50
    head_length: float = 25.0  # cm
    h_bar: float | None = None  # None: center of the label range

    def __post_init__(self):
        if self.lam < 0 or self.K <= 0 or self.iterations < 0 or self.head_length <= 0:
            raise ValueError("invalid MRF configuration")
        if self.K_data_u is not None and self.K_data_u <= 0:
            raise ValueError("K_data_u must be positive")
        if self.K_V_u is not None and self.K_V_u <= 0:
            raise ValueError("K_V_u must be positive")
        if not 0 < self.data_u_percentile < 100:
            raise ValueError("data_u_percentile must be in (0, 100)")

    @property
    def k_v_u(self) -> float:
        return self.K if self.K_V_u is None else self.K_V_u


@dataclass
class GradientMap:
    grad: np.ndarray  # (H, W) expected height change in cm per pixel along the vertical direction
    theta: np.ndarray  # (H, W) angle of the line through the pixel and v, radians in [0, pi)
    valid: np.ndarray  # (H, W) below the vanishing line
    p_len: np.ndarray = field(default=None)  # (H, W) pixel length of an average head at the pixel

    @property
    def shape(self):
        return self.grad.shape

    @classmethod
    def uniform(cls, shape, grad: float = 0.0, theta: float = np.pi / 2) -> "GradientMap":
        return cls(grad=np.full(shape, float(grad)), theta=np.full(shape, float(theta)),
                   valid=np.ones(shape, dtype=bool))


@dataclass
class DataCostVolume:
    cost: np.ndarray  # (H, W, L) float64; last label is unknown
    out_of_segment: np.ndarray  # (H, W) every height projects outside all neighbours
    k_data_u: float = 0.0

    @property
    def shape(self):
        return self.cost.shape[:2]


@dataclass
class HeightMap:
    labels: np.ndarray  # (H, W) label indices
    energy: float
    labelset: LabelSet
    history: list = field(default_factory=list)  # energy after each iteration

    def heights(self) -> np.ndarray:
        """Heights in cm with NaN for unknown."""
        h = np.full(self.labels.shape, np.nan)
        known = self.labels != self.labelset.unknown
        h[known] = self.labelset.heights[self.labels[known]]
        return h


# ----------------------------------------------------------------------------
# gradient map


def build_gradient_map(frame: VerticalFrame, shape, labels: LabelSet = LabelSet(),
                       cfg: MrfConfig = MrfConfig()) -> GradientMap:
    """Per-pixel height change per pixel of travel along the line to ``v``.

    Each pixel is taken to lie on a plane at the central height; mapping it
    to the parallel plane one head length lower gives the pixel length of a
    head there, and ``|grad| = L / that length``.
    """
    H, W = shape
    h_bar = (labels.h_bar if cfg.h_bar is None else cfg.h_bar) / 100.0
    L = cfg.head_length
    M = homology(frame, h_bar - L / 100.0) @ homology_inv(frame, h_bar)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    p = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    q = p @ M.T
    with np.errstate(divide="ignore", invalid="ignore"):
        qx, qy = q[..., 0] / q[..., 2], q[..., 1] / q[..., 2]
        d = np.hypot(qx - xs, qy - ys)
        below = p @ frame.l > 0
        valid = below & np.isfinite(d) & (d > 1e-9)
        grad = np.where(valid, L / np.where(valid, d, 1.0), 0.0)
    v = frame.v
    if abs(v[2]) > 1e-12:
        dx, dy = v[0] / v[2] - xs, v[1] / v[2] - ys
    else:
        dx, dy = np.full_like(xs, v[0]), np.full_like(xs, v[1])
    theta = np.mod(np.arctan2(dy, dx), np.pi)
    return GradientMap(grad=grad, theta=theta, valid=valid, p_len=np.where(valid, d, 0.0))


# ----------------------------------------------------------------------------
# discontinuity cost


def edge_offset(gmap: GradientMap, y: int, x: int, dy: int, dx: int) -> float:
    """``s_p |grad_p| d(p, q_perp)`` for ``q = p + (dx, dy)``."""
    return float(_offsets(gmap.grad[y, x], gmap.theta[y, x], dx, dy))


def _offsets(grad, theta, dx, dy):
    ux, uy = np.cos(theta), np.sin(theta)
    proj = dx * ux + dy * uy  # q_perp = p + proj * u
    s = np.where(proj * uy > 0, 1.0, -1.0)  # +1 iff q_perp is lower in the image
    return s * grad * np.abs(proj)


def raw_distances(gmap: GradientMap, p, q, l_p: float, l_q: float) -> tuple[float, float]:
    """``(D_pq(l_p, l_q), D_qp(l_q, l_p))`` before symmetrization, in cm."""
    (xp, yp), (xq, yq) = p, q
    c_pq = edge_offset(gmap, yp, xp, yq - yp, xq - xp)
    c_qp = edge_offset(gmap, yq, xq, yp - yq, xp - xq)
    return abs(l_p - l_q - c_pq), abs(l_q - l_p - c_qp)


def pairwise_cost(p, q, l_p, l_q, gmap: GradientMap, cfg: MrfConfig = MrfConfig(),
                  labels: LabelSet = LabelSet()) -> float:
    """Discontinuity cost between 4-neighbours ``p``, ``q`` (``(x, y)`` pixels).

    ``l_p``/``l_q`` are heights in cm or :data:`UNKNOWN`.
    """
    if abs(p[0] - q[0]) + abs(p[1] - q[1]) != 1:
        raise ValueError("p and q must be 4-neighbours")
    if l_p is UNKNOWN and l_q is UNKNOWN:
        return 0.0
    if l_p is UNKNOWN or l_q is UNKNOWN:
        return cfg.k_v_u
    d_pq, d_qp = raw_distances(gmap, p, q, l_p, l_q)
    return min(max(d_pq, d_qp) / labels.delta_h, cfg.K)


@dataclass
class EdgeTables:
    """Known-known discontinuity costs indexed by label difference.

    ``horiz[y, x, k]`` is the cost between ``(y, x)`` with label ``i`` and
    ``(y, x+1)`` with label ``j`` where ``k = i - j + n - 1``; ``vert`` is the
    same for ``(y, x)`` over ``(y+1, x)``.
    """

    horiz: np.ndarray  # (H, W-1, 2n-1)
    vert: np.ndarray  # (H-1, W, 2n-1)
    k_v_u: float
    n: int


def edge_tables(gmap: GradientMap, cfg: MrfConfig, labels: LabelSet) -> EdgeTables:
    n = labels.n_heights
    k = np.arange(-(n - 1), n) * labels.delta_h
    g, th = gmap.grad, gmap.theta

    def table(c_pq, c_qp):
        d = np.maximum(np.abs(k - c_pq[..., None]), np.abs(k + c_qp[..., None]))
        return np.minimum(d / labels.delta_h, cfg.K)

    c_pq = _offsets(g[:, :-1], th[:, :-1], 1, 0)
    c_qp = _offsets(g[:, 1:], th[:, 1:], -1, 0)
    horiz = table(c_pq, c_qp)
    c_pq = _offsets(g[:-1, :], th[:-1, :], 0, 1)
    c_qp = _offsets(g[1:, :], th[1:, :], 0, -1)
    vert = table(c_pq, c_qp)
    return EdgeTables(horiz=horiz, vert=vert, k_v_u=cfg.k_v_u, n=n)


def full_pairwise(table_row: np.ndarray, n: int, k_v_u: float) -> np.ndarray:
    """Expand one edge's difference table into the (n+1, n+1) matrix including unknown."""
    i = np.arange(n)
    V = np.empty((n + 1, n + 1))
    V[:n, :n] = table_row[i[:, None] - i[None, :] + n - 1]
    V[n, :n] = k_v_u
    V[:n, n] = k_v_u
    V[n, n] = 0.0
    return V


def raw_asymmetry(gmap: GradientMap, mask=None) -> float:
    """Largest ``|D_pq - D_qp|`` over all 4-neighbour edges (cm); bounded by ``|c_pq + c_qp|``.

    ``mask`` restricts the edges to those with both endpoints in the mask.
    """
    g, th = gmap.grad, gmap.theta
    out = 0.0
    for (dx, dy) in ((1, 0), (0, 1)):
        a = (slice(None), slice(None, -1)) if dx else (slice(None, -1), slice(None))
        b = (slice(None), slice(1, None)) if dx else (slice(1, None), slice(None))
        c = _offsets(g[a], th[a], dx, dy) + _offsets(g[b], th[b], -dx, -dy)
        ok = gmap.valid[a] & gmap.valid[b]
        if mask is not None:
            ok &= mask[a] & mask[b]
        if ok.any():
            out = max(out, float(np.abs(c[ok]).max()))
    return out


# ----------------------------------------------------------------------------
# data cost


def build_data_cost(ref: DescriptorField, neighbours: list[DescriptorField], families: list[HomographyFamily],
                    labels: LabelSet = LabelSet(), cfg: MrfConfig = MrfConfig(),
                    workers: int = 1) -> DataCostVolume:
    """Average DAISY dissimilarity over the neighbour views for every pixel and height label.

    Samples outside a neighbour image contribute :data:`SENTINEL_COST`.
    The unknown label gets ``cfg.K_data_u``, or when unset the
    ``cfg.data_u_percentile`` percentile of the height costs whose samples
    landed inside every neighbour.
    """
    if len(neighbours) != len(families) or not neighbours:
        raise ValueError("one homography family per neighbour view is required")
    H, W = ref.shape
    n = labels.n_heights
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(H * W)], axis=1)
    cost = np.empty((H, W, n + 1))
    inside = np.zeros((H, W, n), dtype=bool)

    def one(k):
        h = labels.heights[k] / 100.0
        acc = np.zeros((H, W))
        ok = np.ones((H, W), dtype=bool)
        for field_j, fam in zip(neighbours, families):
            q = pix @ fam.at(h).T
            with np.errstate(divide="ignore", invalid="ignore"):
                qx = (q[:, 0] / q[:, 2]).reshape(H, W)
                qy = (q[:, 1] / q[:, 2]).reshape(H, W)
            qx[q[:, 2].reshape(H, W) <= 0] = np.nan  # behind the neighbour camera
            c = dissimilarity_map(ref, field_j, qx, qy)
            ok &= c != SENTINEL_COST
            acc += c
        cost[:, :, k] = acc / len(neighbours)
        inside[:, :, k] = ok

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(one, range(n)))
    else:
        for k in range(n):
            one(k)
    if cfg.K_data_u is not None:
        ku = float(cfg.K_data_u)
    else:
        vals = cost[:, :, :n][inside]
        ku = float(np.percentile(vals, cfg.data_u_percentile)) if vals.size else SENTINEL_COST / 2
    cost[:, :, n] = ku
    out = np.all(cost[:, :, :n] == SENTINEL_COST, axis=2)
    return DataCostVolume(cost=cost, out_of_segment=out, k_data_u=ku)
