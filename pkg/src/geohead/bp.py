"""Min-sum loopy belief propagation on the 4-connected grid, plus the exact energy and a
brute-force minimizer used as a test oracle."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor

import numba
import numpy as np

from .heightmap import (
    DataCostVolume,
    EdgeTables,
    GradientMap,
    HeightMap,
    LabelSet,
    MrfConfig,
    edge_tables,
    full_pairwise,
)

log = logging.getLogger(__name__)


class InstanceTooLargeError(ValueError):
    pass


@numba.njit(cache=True, nogil=True)
def _send_kernel(h, table, lam, k_v_u, forward, out):
    M, L = h.shape
    n = L - 1
    for m in range(M):
        mk = np.inf
        for i in range(n):
            if h[m, i] < mk:
                mk = h[m, i]
        hu = h[m, n]
        via_u = hu + lam * k_v_u
        lo = np.inf
        for j in range(n):
            best = via_u
            for i in range(n):
                # table index is i_first - i_second + n - 1
                k = i - j + n - 1 if forward else j - i + n - 1
                c = h[m, i] + lam * table[m, k]
                if c < best:
                    best = c
            out[m, j] = best
            if best < lo:
                lo = best
        u = mk + lam * k_v_u
        if hu < u:
            u = hu
        out[m, n] = u
        if u < lo:
            lo = u
        for j in range(L):
            out[m, j] -= lo


def _send(h: np.ndarray, table: np.ndarray, lam: float, k_v_u: float, forward: bool) -> np.ndarray:
    """Min-sum message over one edge family.

    ``h`` (..., n+1) is the sender's belief minus the receiver's message,
    ``table`` (..., 2n-1) is indexed by ``i_first - i_second``; ``forward``
    means the sender is the first pixel of the edge (left or top). The
    returned message is shifted so that its minimum is zero.
    """
    shape = h.shape
    hh = np.ascontiguousarray(h.reshape(-1, shape[-1]), dtype=np.float64)
    tt = np.ascontiguousarray(table.reshape(-1, table.shape[-1]), dtype=np.float64)
    out = np.empty_like(hh)
    _send_kernel(hh, tt, float(lam), float(k_v_u), bool(forward), out)
    return out.reshape(shape)


def _row_chunks(H: int, workers: int) -> list[slice]:
    if workers <= 1:
        return [slice(0, H)]
    b = np.linspace(0, H, workers + 1).astype(int)
    return [slice(b[k], b[k + 1]) for k in range(workers) if b[k + 1] > b[k]]


def lbp_minsum(data: DataCostVolume, gmap: GradientMap, cfg: MrfConfig = MrfConfig(),
               labels: LabelSet = LabelSet(), workers: int = 1, tables: EdgeTables | None = None) -> HeightMap:
    """Synchronous min-sum LBP with a fixed iteration budget.

    Messages are min-normalized after every update. The label of a pixel is
    the argmin of its belief; ``argmin`` returns the first minimum, so ties go
    to the lowest height and the unknown label (last) wins only when strictly
    smaller. Results do not depend on ``workers``: every iteration reads the
    previous messages and each row block is written by one thread.
    """
    D = np.asarray(data.cost, dtype=np.float64)
    H, W, L = D.shape
    if L != labels.n_labels:
        raise ValueError("data cost volume does not match the label set")
    if gmap.shape != (H, W):
        raise ValueError("gradient map does not match the data cost volume")
    t = tables if tables is not None else edge_tables(gmap, cfg, labels)
    lam, kvu = cfg.lam, t.k_v_u

    # msg_r[y, x]: message from (y, x) to (y, x+1); msg_l[y, x]: from (y, x+1) to (y, x)
    msg_r = np.zeros((H, max(W - 1, 0), L))
    msg_l = np.zeros_like(msg_r)
    msg_d = np.zeros((max(H - 1, 0), W, L))  # (y, x) -> (y+1, x)
    msg_u = np.zeros_like(msg_d)  # (y+1, x) -> (y, x)

    def incoming(mr, ml, md, mu):
        inc_l = np.zeros_like(D)  # from the left neighbour
        inc_r = np.zeros_like(D)
        inc_t = np.zeros_like(D)
        inc_b = np.zeros_like(D)
        inc_l[:, 1:] = mr
        inc_r[:, :-1] = ml
        inc_t[1:, :] = md
        inc_b[:-1, :] = mu
        return inc_l, inc_r, inc_t, inc_b

    history = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for it in range(cfg.iterations):
            inc_l, inc_r, inc_t, inc_b = incoming(msg_r, msg_l, msg_d, msg_u)
            belief = D + inc_l + inc_r + inc_t + inc_b
            new_r = np.empty_like(msg_r)
            new_l = np.empty_like(msg_l)
            new_d = np.empty_like(msg_d)
            new_u = np.empty_like(msg_u)

            def work(rows: slice):
                if W > 1:
                    new_r[rows] = _send(belief[rows, :-1] - inc_r[rows, :-1], t.horiz[rows], lam, kvu, True)
                    new_l[rows] = _send(belief[rows, 1:] - inc_l[rows, 1:], t.horiz[rows], lam, kvu, False)
                if H > 1:
                    r = slice(rows.start, min(rows.stop, H - 1))
                    if r.stop > r.start:
                        r1 = slice(r.start + 1, r.stop + 1)
                        new_d[r] = _send(belief[r] - inc_b[r], t.vert[r], lam, kvu, True)
                        new_u[r] = _send(belief[r1] - inc_t[r1], t.vert[r], lam, kvu, False)

            chunks = _row_chunks(H, workers)
            if pool is not None:
                list(pool.map(work, chunks))
            else:
                for c in chunks:
                    work(c)
            msg_r, msg_l, msg_d, msg_u = new_r, new_l, new_d, new_u
            lab = _decode(D, msg_r, msg_l, msg_d, msg_u, incoming)
            history.append(energy(lab, data, gmap, cfg, labels, tables=t))
            log.debug("bp iteration %d energy %.6f", it + 1, history[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    lab = _decode(D, msg_r, msg_l, msg_d, msg_u, incoming)
    return HeightMap(labels=lab, energy=energy(lab, data, gmap, cfg, labels, tables=t), labelset=labels,
                     history=history)


def _decode(D, mr, ml, md, mu, incoming):
    inc = incoming(mr, ml, md, mu)
    belief = D + inc[0] + inc[1] + inc[2] + inc[3]
    return np.argmin(belief, axis=2)


def energy(labeling, data: DataCostVolume, gmap: GradientMap, cfg: MrfConfig = MrfConfig(),
           labels: LabelSet = LabelSet(), tables: EdgeTables | None = None) -> float:
    """Data term plus ``lam`` times the discontinuity cost, each undirected edge counted once."""
    lab = np.asarray(labeling.labels if isinstance(labeling, HeightMap) else labeling, dtype=np.int64)
    D = np.asarray(data.cost, dtype=np.float64)
    H, W, _ = D.shape
    t = tables if tables is not None else edge_tables(gmap, cfg, labels)
    n = t.n
    e = float(np.take_along_axis(D, lab[..., None], axis=2).sum())
    pair = 0.0
    for a, b, tab in ((lab[:, :-1], lab[:, 1:], t.horiz), (lab[:-1, :], lab[1:, :], t.vert)):
        if a.size == 0:
            continue
        ua, ub = a == n, b == n
        both = ~ua & ~ub
        k = np.where(both, a - b + n - 1, 0)
        v = np.take_along_axis(tab, k[..., None], axis=2)[..., 0]
        v = np.where(both, v, np.where(ua & ub, 0.0, t.k_v_u))
        pair += float(v.sum())
    return e + cfg.lam * pair


def brute_force_min(data: DataCostVolume, gmap: GradientMap, cfg: MrfConfig = MrfConfig(),
                    labels: LabelSet = LabelSet(), max_labelings: int = 10 ** 8,
                    chunk: int = 200_000) -> HeightMap:
    """Exhaustive minimization; among equal energies the lexicographically smallest labeling wins."""
    D = np.asarray(data.cost, dtype=np.float64)
    H, W, L = D.shape
    N = H * W
    if L ** N > max_labelings:
        raise InstanceTooLargeError(f"{L}^{N} labelings exceed {max_labelings}")
    t = edge_tables(gmap, cfg, labels)
    edges, mats = [], []
    for y in range(H):
        for x in range(W):
            if x + 1 < W:
                edges.append((y * W + x, y * W + x + 1))
                mats.append(full_pairwise(t.horiz[y, x], t.n, t.k_v_u))
            if y + 1 < H:
                edges.append((y * W + x, (y + 1) * W + x))
                mats.append(full_pairwise(t.vert[y, x], t.n, t.k_v_u))
    unary = D.reshape(N, L)
    best_e, best_lab = np.inf, None
    it = itertools.product(range(L), repeat=N)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        block = block.reshape(-1, N)
        e = unary[np.arange(N)[None, :], block].sum(axis=1)
        pe = np.zeros(len(block))
        for (a, b), V in zip(edges, mats):
            pe += V[block[:, a], block[:, b]]
        e = e + cfg.lam * pe
        k = int(np.argmin(e))
        if e[k] < best_e:
            best_e, best_lab = float(e[k]), block[k].copy()
    lab = best_lab.reshape(H, W)
    return HeightMap(labels=lab, energy=energy(lab, data, gmap, cfg, labels, tables=t), labelset=labels)


def data_argmin(data: DataCostVolume) -> np.ndarray:
    return np.argmin(np.asarray(data.cost), axis=2)
