"""Small robust-estimation engines: a damped least-squares solver and a 1-D mixture EM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its budget; ``best`` holds the last iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    converged: bool


def _jacobian(fun, x, r0, rel_step=1e-6):
    J = np.empty((len(r0), len(x)))
    for k in range(len(x)):
        h = rel_step * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        J[:, k] = (fun(xp) - fun(xm)) / (2.0 * h)
    return J


def levenberg_marquardt(fun, x0, jac=None, max_iter: int = 100, xtol: float = 1e-10,
                        damping: float = 1e-3, factor: float = 10.0) -> LMResult:
    """Minimize ``sum(fun(x)**2)``.

    Marquardt scaling of the normal equations; damping is divided by
    ``factor`` after an accepted step and multiplied by it after a rejected
    one. Only cost-decreasing steps are accepted, so the returned cost never
    exceeds the initial one.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    r = np.asarray(fun(x), dtype=float)
    cost = float(r @ r)
    cost0 = cost
    mu = damping
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = jac(x) if jac is not None else _jacobian(fun, x, r)
        A = J.T @ J
        g = J.T @ r
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(g)):
            break
        if np.max(np.abs(g)) == 0.0:
            converged = True
            break
        improved = False
        while mu < 1e16:
            D = np.diag(np.maximum(np.diag(A), 1e-30))
            try:
                step = -np.linalg.solve(A + mu * D, g)
            except np.linalg.LinAlgError:
                mu *= factor
                continue
            x_new = x + step
            r_new = np.asarray(fun(x_new), dtype=float)
            c_new = float(r_new @ r_new)
            if np.isfinite(c_new) and c_new < cost:
                x, r, cost = x_new, r_new, c_new
                mu = max(mu / factor, 1e-15)
                improved = True
                break
            mu *= factor
        if not improved:
            # no descent direction left at any damping: local minimum reached
            converged = True
            break
        if np.max(np.abs(step)) <= xtol * (1.0 + np.max(np.abs(x))):
            converged = True
            break
    return LMResult(x=x, cost=cost, initial_cost=cost0, iterations=it, converged=converged)


@dataclass
class MixtureFit:
    means: np.ndarray  # (2,)
    stds: np.ndarray  # (2,)
    weights: np.ndarray  # (3,) gaussian, gaussian, uniform
    posteriors: np.ndarray  # (N, 3)
    loglik: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _gauss(x, m, s):
    return np.exp(-0.5 * ((x - m) / s) ** 2) / (np.sqrt(2.0 * np.pi) * s)


def em_two_gaussians_uniform(x, max_iter: int = 500, tol: float = 1e-10, min_std: float = 1e-4,
                             init=None, support=None) -> MixtureFit:
    """EM for two 1-D Gaussians plus a uniform outlier component.

    The uniform spans ``support`` (default ``[min(x), max(x)]``).

    Raises :class:`NonConvergenceError` (carrying the last fit) if the
    log-likelihood has not settled after ``max_iter`` iterations.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    u = 1.0 / max((support[1] - support[0]) if support is not None else hi - lo, 1e-12)
    if init is None:
        m = np.array([np.percentile(x, 85), np.percentile(x, 30)])
        s = np.full(2, max((hi - lo) / 6.0, min_std))
        w = np.array([0.4, 0.4, 0.2])
    else:
        m, s, w = (np.asarray(a, dtype=float) for a in init)
    fit = MixtureFit(means=m, stds=s, weights=w, posteriors=np.zeros((len(x), 3)))
    prev = -np.inf
    for it in range(1, max_iter + 1):
        dens = np.column_stack([w[0] * _gauss(x, m[0], s[0]), w[1] * _gauss(x, m[1], s[1]),
                                np.full(len(x), w[2] * u)])
        tot = dens.sum(axis=1)
        ll = float(np.sum(np.log(tot)))
        post = dens / tot[:, None]
        fit.loglik.append(ll)
        fit.posteriors = post
        fit.means, fit.stds, fit.weights, fit.iterations = m, s, w, it
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            fit.converged = True
            return fit
        prev = ll
        nk = post.sum(axis=0)
        w = nk / len(x)
        m = m.copy()
        s = s.copy()
        for k in range(2):
            if nk[k] > 1e-12:
                m[k] = post[:, k] @ x / nk[k]
                s[k] = max(np.sqrt(post[:, k] @ (x - m[k]) ** 2 / nk[k]), min_std)
    raise NonConvergenceError(f"EM did not converge in {max_iter} iterations", best=fit)
