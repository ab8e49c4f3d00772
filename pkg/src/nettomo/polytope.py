"""The feasible region ``{x >= 0 : A x = y}`` and samplers restricted to it.

Points are parametrised by the free coordinates ``x2`` of the column
permutation chosen by :class:`~nettomo.network.RoutingMatrix`; the pivot
coordinates follow as ``x1 = inv(A1) @ y - C @ x2``.  All sampling here is
batched: a ``(J, n)`` array holds ``J`` independent chains.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog

from .errors import InfeasibleError, NonConvergence
from .network import RoutingMatrix

__all__ = [
    "Polytope",
    "ChordBounds",
    "chord_bounds",
    "rda_step",
    "sample_truncated_normal_polytope",
    "ipfp",
    "feasible_point",
    "constraint_violation",
]

MAX_DIRECTION_RETRIES = 100


def _zero_tol(y):
    return 1e-12 * max(1.0, float(np.max(y, initial=0.0)))


class Polytope:
    """Feasible route vectors for one epoch.

    Routes covered by a zero counter are pinned at zero and excluded from
    sampling; the remaining ``active`` routes are handled through a
    decomposition of the reduced routing matrix.
    """

    def __init__(self, routing: RoutingMatrix, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (routing.m,):
            raise ValueError(f"expected {routing.m} counter values, got shape {y.shape}")
        if np.any(y < 0):
            raise InfeasibleError("negative counter value")
        self.routing = routing
        self.y = y
        a = routing.entries
        zero_rows = y <= _zero_tol(y)
        fixed = np.flatnonzero(a[zero_rows].any(axis=0))
        active = np.setdiff1d(np.arange(routing.n), fixed)
        self.fixed = fixed
        self.active = active
        keep = np.flatnonzero(~zero_rows)
        if active.size == 0:
            if keep.size:
                raise InfeasibleError("positive counters but every route is pinned at zero")
            self.sub = None
            self.base = np.zeros(0)
            self.dim = 0
            self._piv = self._free = np.zeros(0, dtype=int)
            self._c = np.zeros((0, 0))
            return
        sub_a = a[np.ix_(keep, active)]
        dead = np.flatnonzero(~sub_a.any(axis=1))
        if dead.size:
            raise InfeasibleError(
                f"counters {keep[dead].tolist()} are positive but all their routes are pinned at zero")
        self.sub = RoutingMatrix(sub_a)
        self.y_active = y[keep]
        self.base = self.sub.a1_inv @ self.y_active[self.sub.rows]
        self.dim = self.sub.dim
        self._piv = active[self.sub.pivots]
        self._free = active[self.sub.free]
        self._c = self.sub.c

    @property
    def n(self):
        return self.routing.n

    def complete(self, x2):
        """Full route vector(s) from free coordinates ``x2``."""
        x2 = np.asarray(x2, dtype=float)
        out = np.zeros(x2.shape[:-1] + (self.n,))
        out[..., self._free] = x2
        out[..., self._piv] = self.base - x2 @ self._c.T
        return out

    def residual(self, x):
        return np.abs(np.asarray(x) @ self.routing.entries.T - self.y).max(axis=-1)

    def contains(self, x, tol=1e-8):
        x = np.asarray(x)
        ok_eq = self.residual(x) <= tol * (1 + np.abs(self.y).max())
        ok_pos = (x >= -1e-12 * max(1.0, np.abs(self.y).max())).all(axis=-1)
        return ok_eq & ok_pos

    def __repr__(self):
        return f"Polytope(n={self.n}, dim={self.dim}, pinned={self.fixed.size})"


@dataclass(frozen=True)
class ChordBounds:
    """Feasible step interval ``[l, h]`` along a direction; ``l <= 0 <= h``."""

    l: float
    h: float


def _bounds(x1, x2, d, w):
    # Clamp tiny negative rounding so the current point always lies on the chord.
    x1 = np.maximum(x1, 0.0)
    x2 = np.maximum(x2, 0.0)
    inf = np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = x1 / w
        r2 = -x2 / d
    h1 = np.where(w > 0, r1, inf).min(axis=-1, initial=inf)
    h2 = np.where(d < 0, r2, inf).min(axis=-1, initial=inf)
    l1 = np.where(w < 0, r1, -inf).max(axis=-1, initial=-inf)
    l2 = np.where(d > 0, r2, -inf).max(axis=-1, initial=-inf)
    h = np.maximum(np.minimum(h1, h2), 0.0)
    l = np.minimum(np.maximum(l1, l2), 0.0)
    return l, h


def chord_bounds(P: Polytope, x, d) -> ChordBounds:
    """Chord through ``x`` along free-coordinate direction ``d``."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    w = P._c @ d
    l, h = _bounds(x[P._piv], x[P._free], d, w)
    return ChordBounds(float(l), float(h))


def _directions(rng, shape):
    z = rng.standard_normal(shape)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def _rda(P, X, log_density, rng, logf=None):
    """One random-directions Metropolis step for every row of ``X``.

    Returns ``(X_new, accepted, logf_new)``.
    """
    J = X.shape[0]
    if logf is None:
        logf = log_density(X)
    if P.dim == 0:
        return X, np.ones(J, dtype=bool), logf
    k = P.dim
    x1 = X[:, P._piv]
    x2 = X[:, P._free]
    scale = 1e-14 * max(1.0, float(np.abs(X).max()))

    d = _directions(rng, (J, k))
    w = d @ P._c.T
    l, h = _bounds(x1, x2, d, w)
    stuck = (h - l) < scale
    tries = 0
    while stuck.any() and tries < MAX_DIRECTION_RETRIES:
        idx = np.flatnonzero(stuck)
        d[idx] = _directions(rng, (idx.size, k))
        w[idx] = d[idx] @ P._c.T
        l[idx], h[idx] = _bounds(x1[idx], x2[idx], d[idx], w[idx])
        stuck = (h - l) < scale
        tries += 1
    if not np.all(np.isfinite(h) & np.isfinite(l)):
        raise InfeasibleError("unbounded chord; the polytope is not bounded")

    u = l + (h - l) * rng.random(J)
    u[stuck] = 0.0
    prop2 = np.maximum(x2 + u[:, None] * d, 0.0)
    prop = np.empty_like(X)
    prop[:, P.fixed] = 0.0
    prop[:, P._free] = prop2
    prop[:, P._piv] = np.maximum(P.base - prop2 @ P._c.T, 0.0)

    logf_new = log_density(prop)
    with np.errstate(invalid="ignore"):
        log_ratio = logf_new - logf
    log_ratio = np.where(np.isneginf(logf) & np.isfinite(logf_new), 0.0, log_ratio)
    accept = (np.log(rng.random(J)) < log_ratio) & ~stuck
    X_new = np.where(accept[:, None], prop, X)
    logf_out = np.where(accept, logf_new, logf)
    return X_new, accept, logf_out


def rda_step(P: Polytope, x, log_density: Callable, rng=None, logf=None):
    """Random-directions Metropolis step on ``P``.

    ``x`` may be one point ``(n,)`` or a batch ``(J, n)``; ``log_density``
    must accept a ``(J, n)`` batch and return ``(J,)`` log densities (up to
    a constant).  Returns ``(x_new, accepted)``.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    X_new, acc, _ = _rda(P, X, log_density, rng, logf)
    if single:
        return X_new[0], bool(acc[0])
    return X_new, acc


def gaussian_log_density(mean, cov_diag):
    mean = np.asarray(mean, dtype=float)
    inv = 1.0 / np.asarray(cov_diag, dtype=float)

    def logf(X):
        return -0.5 * np.sum((X - mean) ** 2 * inv, axis=-1)

    return logf


def sample_truncated_normal_polytope(P: Polytope, mean, cov_diag, steps: int, init, rng=None):
    """Run ``steps`` RDA steps targeting ``N(mean, diag(cov_diag))`` on ``P``.

    ``init`` (and optionally ``mean``/``cov_diag``) may be batched.
    """
    if np.any(np.asarray(cov_diag) <= 0):
        raise ValueError("covariance diagonal must be positive")
    rng = np.random.default_rng(rng)
    x = np.asarray(init, dtype=float)
    single = x.ndim == 1
    X = x[None].copy() if single else x.copy()
    logf_fn = gaussian_log_density(mean, cov_diag)
    logf = logf_fn(X)
    for _ in range(int(steps)):
        X, _, logf = _rda(P, X, logf_fn, rng, logf)
    return X[0] if single else X


def constraint_violation(A, y, x):
    """Largest relative counter mismatch ``|A x - y|_i / y_i`` (absolute where ``y_i = 0``)."""
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.abs(a @ x - y)
    denom = np.where(y > 0, y, 1.0)
    return float((r / denom).max(initial=0.0))


def ipfp(A, y, seed, max_iter: int = 1000, tol: float = 1e-10, shuffle=None):
    """Iterative proportional fitting of ``seed`` to counters ``y``.

    Each sweep visits the counters in ascending order (or in an order
    shuffled by the generator ``shuffle``) and rescales the routes a counter
    covers so that counter matches.  Routes under zero counters are zeroed
    first.  Raises :class:`NonConvergence` carrying the last iterate when
    ``max_iter`` sweeps do not bring the relative violation under ``tol``.
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    x = np.array(seed, dtype=float)
    if x.shape != (a.shape[1],) or y.shape != (a.shape[0],):
        raise ValueError("shape mismatch between A, y and seed")
    zero = y <= _zero_tol(y)
    x[a[zero].any(axis=0)] = 0.0
    x = np.maximum(x, 0.0)
    rows = np.flatnonzero(~zero)
    masks = [a[i] > 0 for i in range(a.shape[0])]
    viol = constraint_violation(a, y, x)
    if viol < tol:
        return x
    for _ in range(int(max_iter)):
        order = rows if shuffle is None else shuffle.permutation(rows)
        for i in order:
            s = a[i] @ x
            if s <= 0:
                raise InfeasibleError(f"counter {i} is positive but its routes are all zero")
            x[masks[i]] *= y[i] / s
        viol = constraint_violation(a, y, x)
        if viol < tol:
            return x
    raise NonConvergence(f"IPFP did not converge: violation {viol:.3g}", x=x, violation=viol)


def _polish(P, x):
    # Re-derive pivot coordinates so A x = y holds to rounding.
    out = P.complete(x[P._free])
    out[P.fixed] = 0.0
    if np.any(out[P._piv] < -1e-9 * max(1.0, np.abs(P.y).max())):
        return None
    return np.maximum(out, 0.0)


def _lp_point(P):
    sub = P.sub
    k = P.active.size
    rows = np.sort(sub.rows)
    a_eq = np.hstack([sub.entries[rows], np.zeros((rows.size, 1))])
    b_eq = P.y_active[rows]
    a_ub = np.hstack([-np.eye(k), np.ones((k, 1))])
    cost = np.zeros(k + 1)
    cost[-1] = -1.0
    res = linprog(cost, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=b_eq,
                  bounds=[(0, None)] * (k + 1), method="highs")
    if res.status == 2:
        raise InfeasibleError("no nonnegative route vector reproduces the counters")
    if not res.success:
        raise InfeasibleError(f"phase-one LP failed: {res.message}")
    x = np.zeros(P.n)
    x[P.active] = res.x[:k]
    return x


def feasible_point(P: Polytope, seed=None):
    """A feasible route vector, in the interior of ``P`` whenever possible.

    Tries IPFP from a positive seed and falls back to a max-min-slack linear
    program.  Raises :class:`InfeasibleError` if ``y`` is inconsistent.
    """
    x0 = np.zeros(P.n)
    if P.active.size == 0:
        return x0
    tol = 1e-8 * (1 + np.abs(P.y).max())
    if P.dim == 0:
        x = P.complete(np.zeros(0))
        if np.any(x < -tol) or P.residual(x) > tol:
            raise InfeasibleError("counters are inconsistent with the routing matrix")
        return np.maximum(x, 0.0)
    if seed is None:
        seed = np.ones(P.n)
    seed = np.where(np.asarray(seed, dtype=float) > 0, seed, 1e-3 * np.mean(P.y) + 1e-12)
    try:
        x = ipfp(P.routing, P.y, seed, max_iter=2000, tol=1e-12)
    except (NonConvergence, InfeasibleError):
        x = None
    if x is not None:
        x = _polish(P, x)
        if x is not None and P.residual(x) <= tol:
            return x
    x = _polish(P, _lp_point(P))
    if x is None or P.residual(x) > tol:
        raise InfeasibleError("counters are inconsistent with the routing matrix")
    return x
