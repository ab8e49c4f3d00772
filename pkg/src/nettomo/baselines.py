"""Gravity and tomogravity estimators of origin-destination traffic."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, MissingTotals, NonConvergence
from .network import RoutingMatrix, Topology
from .polytope import ipfp

log = logging.getLogger(__name__)

__all__ = [
    "NodeTotals",
    "TomogravityResult",
    "gravity",
    "tomogravity",
    "tomogravity_objective",
    "node_totals_from_counters",
    "gravity_series",
    "tomogravity_series",
]

CONSERVATION_RTOL = 1e-6


@dataclass(frozen=True)
class NodeTotals:
    """Per-node inbound and outbound traffic at one epoch."""

    inbound: np.ndarray
    outbound: np.ndarray
    total: float

    def __post_init__(self):
        inb = np.asarray(self.inbound, dtype=float)
        out = np.asarray(self.outbound, dtype=float)
        if inb.shape != out.shape or inb.ndim != 1:
            raise ValueError("inbound and outbound must be vectors of equal length")
        if np.any(inb < 0) or np.any(out < 0):
            raise ValueError("node totals must be nonnegative")
        object.__setattr__(self, "inbound", inb)
        object.__setattr__(self, "outbound", out)
        object.__setattr__(self, "total", float(self.total))

    @classmethod
    def from_margins(cls, outbound, inbound):
        out = np.asarray(outbound, dtype=float)
        inb = np.asarray(inbound, dtype=float)
        return cls(inb, out, float(out.sum()))

    @property
    def conserved(self) -> bool:
        s_in, s_out = self.inbound.sum(), self.outbound.sum()
        return abs(s_in - s_out) <= CONSERVATION_RTOL * max(s_in, s_out, 1e-300) and (
            abs(s_out - self.total) <= CONSERVATION_RTOL * max(self.total, 1e-300)
        )


def gravity(totals: NodeTotals) -> np.ndarray:
    """Rank-one estimate ``x[o, d] = outbound[o] * inbound[d] / total``.

    Routes are ordered origin-major, matching the network builders.
    """
    if not totals.conserved:
        log.warning("node totals do not balance: in %.6g, out %.6g, total %.6g",
                    totals.inbound.sum(), totals.outbound.sum(), totals.total)
    if totals.total <= 0:
        return np.zeros(totals.outbound.size * totals.inbound.size)
    return np.outer(totals.outbound, totals.inbound).ravel() / totals.total


def node_totals_from_counters(y_t, A, topology: Topology | None = None) -> NodeTotals:
    """Read per-node totals off the access counters.

    ``topology`` defaults to the one attached to ``A``.  Raises
    :class:`MissingTotals` if some node lacks an inbound or outbound counter.
    """
    if topology is None:
        topology = A.topology if isinstance(A, RoutingMatrix) else None
    if topology is None:
        raise MissingTotals("no counter map available for this routing matrix")
    y_t = np.asarray(y_t, dtype=float)
    k = topology.node_count
    out = np.full(k, np.nan)
    inb = np.full(k, np.nan)
    for i, entry in enumerate(topology.counter_map):
        if entry is None:
            continue
        node, direction = entry
        (out if direction == "out" else inb)[node] = y_t[i]
    missing = sorted(set(np.flatnonzero(np.isnan(out))) | set(np.flatnonzero(np.isnan(inb))))
    if missing:
        raise MissingTotals(f"no inbound/outbound counter for nodes {missing}")
    return NodeTotals.from_margins(out, inb)


def tomogravity_objective(x, y, A, g, lam=0.01) -> float:
    """``|y - A x|^2 + lam^2 * sum((x - g)^2 / g)`` over routes with ``g > 0``."""
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    pos = g > 0
    pen = np.sum((x[pos] - g[pos]) ** 2 / g[pos])
    return float(np.sum((np.asarray(y) - a @ x) ** 2) + lam ** 2 * pen)


@dataclass(frozen=True)
class TomogravityResult:
    x: np.ndarray
    fallback: bool


def _tomogravity(y, a, g, lam):
    pos = g > 0
    x = np.zeros_like(g)
    if not pos.any():
        return x, False
    sg = np.sqrt(g[pos])
    lhs = np.vstack([a[:, pos], lam * np.diag(1.0 / sg)])
    rhs = np.concatenate([y, lam * sg])
    sol, _, rank, _ = np.linalg.lstsq(lhs, rhs, rcond=None)
    if rank < pos.sum() or not np.all(np.isfinite(sol)):
        return g.copy(), True
    x[pos] = np.maximum(sol, 0.0)
    # one proportional sweep restores the counters after clipping
    seed = np.where(pos, np.maximum(x, 1e-12 * max(g.max(), 1e-300)), 0.0)
    try:
        x = ipfp(a, y, seed, max_iter=1, tol=1e-10)
    except NonConvergence as exc:
        x = exc.x
    except InfeasibleError:
        log.info("proportional sweep failed after tomogravity; keeping clipped solution")
    return x, False


def tomogravity(y, A, totals: NodeTotals | None = None, lam=0.01, return_flag=False):
    """Least squares on the counters, regularised toward the gravity estimate.

    Minimises ``|y - A x|^2 + lam^2 * sum_j (x_j - g_j)^2 / g_j``, clips
    negative routes and runs one proportional-fitting sweep.  Routes with
    zero gravity estimate stay at zero.  When the stacked system is
    singular the gravity estimate is returned; pass ``return_flag=True`` to
    receive a :class:`TomogravityResult` carrying that flag.
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if totals is None:
        totals = node_totals_from_counters(y, A)
    g = gravity(totals)
    if g.size != a.shape[1]:
        raise ValueError("gravity estimate does not match the routing matrix")
    x, flag = _tomogravity(y, a, g, lam)
    if flag:
        warnings.warn("tomogravity system is singular; returning the gravity estimate")
    return TomogravityResult(x, flag) if return_flag else x


def gravity_series(y, A, topology=None) -> np.ndarray:
    """Gravity estimate at every epoch of a ``T x m`` counter series."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return np.vstack([gravity(node_totals_from_counters(yt, A, topology)) for yt in y])


def tomogravity_series(y, A, lam=0.01, topology=None) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return np.vstack([tomogravity(yt, A, node_totals_from_counters(yt, A, topology), lam)
                      for yt in y])
