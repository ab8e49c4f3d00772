"""Routing matrices, topology builders and structural checks.

A routing matrix maps the ``n`` origin-destination (OD) route volumes onto
the ``m`` aggregate counters a router reports, ``y = A @ x``.  Routes are
ordered origin-major, so route ``(o, d)`` of a ``k``-node network sits in
column ``o * k + d``.  Self-pairs are included.
"""
from __future__ import annotations

import csv
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "RoutingMatrix",
    "Topology",
    "build_star",
    "build_chain",
    "build_two_router",
    "build_custom",
    "decompose",
    "aggregate",
    "check_unimodular",
    "check_identifiability",
    "infer_topology",
    "read_routing_csv",
    "write_routing_csv",
]

_RANK_TOL = 1e-9


@dataclass(frozen=True)
class Topology:
    """Which counter measures which node, for the networks built here.

    ``counter_map[i]`` is ``(node, "out")`` when counter ``i`` records all
    traffic originating at ``node``, ``(node, "in")`` for traffic destined
    to it, and ``None`` for internal links.
    """

    kind: str
    node_count: int
    edges: tuple = ()
    counter_map: tuple = ()


@dataclass(frozen=True, eq=False)
class RoutingMatrix:
    """An ``m x n`` routing matrix together with its rank decomposition.

    On construction the rows are scanned in order and the linearly
    independent ones are kept (``rows``); redundant rows stay in
    ``entries`` but are listed in ``redundant_rows``.  Greedy partial
    pivoting picks one pivot column per kept row, giving the column
    permutation ``col_perm = pivots + free``.  With ``A1`` the square block
    of kept rows and pivot columns and ``A2`` the kept rows on the free
    columns, ``a1_inv = inv(A1)`` and ``c = a1_inv @ A2``.
    """

    entries: np.ndarray
    row_names: tuple = ()
    col_names: tuple = ()
    topology: Optional[Topology] = None
    rank: int = field(init=False)
    rows: np.ndarray = field(init=False)
    redundant_rows: np.ndarray = field(init=False)
    col_perm: np.ndarray = field(init=False)
    a1_inv: np.ndarray = field(init=False)
    c: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2:
            raise ValueError("routing matrix must be 2-dimensional")
        if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise ValueError("routing entries must lie in [0, 1]")
        if a.size == 0 or not np.any(a):
            raise ValueError("routing matrix has no nonzero entry")
        zero_cols = np.flatnonzero(~a.any(axis=0))
        if zero_cols.size:
            raise ValueError(f"routes {zero_cols.tolist()} are not observed by any counter")
        m, n = a.shape
        row_names = tuple(self.row_names) or tuple(f"c{i}" for i in range(m))
        col_names = tuple(self.col_names) or tuple(f"r{j}" for j in range(n))
        if len(row_names) != m or len(col_names) != n:
            raise ValueError("name lists do not match the matrix shape")

        rows, pivots = _independent_rows(a)
        free = np.setdiff1d(np.arange(n), pivots)
        a1 = a[np.ix_(rows, pivots)]
        a1_inv = np.linalg.inv(a1)
        if not np.allclose(a1_inv @ a1, np.eye(len(rows)), rtol=0, atol=1e-10):
            raise np.linalg.LinAlgError("pivot block is numerically singular")
        c = a1_inv @ a[np.ix_(rows, free)]

        for arr in (a, a1_inv, c):
            arr.flags.writeable = False
        redundant = np.setdiff1d(np.arange(m), rows)
        set_ = object.__setattr__
        set_(self, "entries", a)
        set_(self, "row_names", row_names)
        set_(self, "col_names", col_names)
        set_(self, "rank", len(rows))
        set_(self, "rows", _frozen(rows))
        set_(self, "redundant_rows", _frozen(redundant))
        set_(self, "col_perm", _frozen(np.concatenate([pivots, free]).astype(int)))
        set_(self, "a1_inv", a1_inv)
        set_(self, "c", c)

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    @property
    def dim(self) -> int:
        """Dimension of the solution polytope for a generic ``y``."""
        return self.n - self.rank

    @property
    def pivots(self) -> np.ndarray:
        return self.col_perm[: self.rank]

    @property
    def free(self) -> np.ndarray:
        return self.col_perm[self.rank:]

    def independent(self) -> "RoutingMatrix":
        """The matrix restricted to its linearly independent rows."""
        idx = np.sort(self.rows)
        return RoutingMatrix(
            self.entries[idx],
            tuple(self.row_names[i] for i in idx),
            self.col_names,
            self.topology,
        )

    def submatrix(self, rows=None, cols=None) -> "RoutingMatrix":
        rows = np.arange(self.m) if rows is None else np.asarray(rows, dtype=int)
        cols = np.arange(self.n) if cols is None else np.asarray(cols, dtype=int)
        return RoutingMatrix(
            self.entries[np.ix_(rows, cols)],
            tuple(self.row_names[i] for i in rows),
            tuple(self.col_names[j] for j in cols),
        )

    def __repr__(self):
        return f"RoutingMatrix(m={self.m}, n={self.n}, rank={self.rank})"


def _frozen(arr):
    arr = np.asarray(arr, dtype=int)
    arr.flags.writeable = False
    return arr


def _independent_rows(a):
    # Row-by-row elimination; each accepted row pivots on its largest
    # remaining entry.  Returns (kept row indices, pivot columns).
    scale = max(1.0, np.abs(a).max())
    basis, pivots, rows = [], [], []
    for i, row in enumerate(a):
        v = row.copy()
        for b, p in zip(basis, pivots):
            if v[p] != 0.0:
                v -= v[p] * b
        k = int(np.argmax(np.abs(v)))
        if abs(v[k]) > _RANK_TOL * scale:
            basis.append(v / v[k])
            pivots.append(k)
            rows.append(i)
    return np.array(rows, dtype=int), np.array(pivots, dtype=int)


def decompose(A) -> RoutingMatrix:
    """Return ``A`` as a decomposed :class:`RoutingMatrix`.

    The decomposition is computed when a ``RoutingMatrix`` is built, so this
    only wraps plain arrays.
    """
    if isinstance(A, RoutingMatrix):
        return A
    return RoutingMatrix(np.asarray(A, dtype=float))


def aggregate(A, x):
    """Counter readings ``A @ x`` for one route vector or a ``(T, n)`` series."""
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != a.shape[1]:
        raise ValueError(f"expected {a.shape[1]} routes, got {x.shape[-1]}")
    return x @ a.T


# -- builders ---------------------------------------------------------------

def _od_pairs(k):
    return [(o, d) for o in range(k) for d in range(k)]


def _access_rows(k, pairs):
    rows = [[1.0 if o == node else 0.0 for o, _ in pairs] for node in range(k)]
    rows += [[1.0 if d == node else 0.0 for _, d in pairs] for node in range(k)]
    names = [f"out:{i}" for i in range(k)] + [f"in:{i}" for i in range(k)]
    cmap = [(i, "out") for i in range(k)] + [(i, "in") for i in range(k)]
    return rows, names, cmap


def _route_names(pairs):
    return tuple(f"{o}->{d}" for o, d in pairs)


def build_star(node_count: int) -> RoutingMatrix:
    """Star network: one router, one outbound and one inbound counter per node.

    Route ``(o, d)`` is seen by counter ``out:o`` and counter ``in:d``.
    """
    if int(node_count) != node_count or node_count < 2:
        raise ValueError("a star needs at least 2 nodes")
    k = int(node_count)
    pairs = _od_pairs(k)
    rows, names, cmap = _access_rows(k, pairs)
    topo = Topology("star", k, (), tuple(cmap))
    return RoutingMatrix(np.array(rows), tuple(names), _route_names(pairs), topo)


def _shortest_paths(k, edges):
    adj = {i: [] for i in range(k)}
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    for i in adj:
        adj[i].sort()
    paths = {}
    for src in range(k):
        parent = {src: None}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in parent:
                    parent[v] = u
                    queue.append(v)
        for dst in range(k):
            if dst not in parent:
                raise ValueError(f"node {dst} unreachable from {src}")
            hops, v = [], dst
            while parent[v] is not None:
                hops.append((parent[v], v))
                v = parent[v]
            paths[src, dst] = set(hops)
    return paths


def build_custom(node_count: int, edges: Sequence[tuple], kind: str = "custom") -> RoutingMatrix:
    """Nodes joined by undirected ``edges``, each carrying its own subnet.

    Every node gets outbound/inbound access counters and every edge one
    counter per direction.  Routes follow BFS shortest paths, ties broken
    towards the lower-numbered neighbour.
    """
    k = int(node_count)
    if k < 2:
        raise ValueError("need at least 2 nodes")
    edges = tuple(sorted({(min(u, v), max(u, v)) for u, v in edges}))
    for u, v in edges:
        if u == v or not (0 <= u < k and 0 <= v < k):
            raise ValueError(f"bad edge {(u, v)}")
    pairs = _od_pairs(k)
    paths = _shortest_paths(k, edges)
    rows, names, cmap = _access_rows(k, pairs)
    for u, v in edges:
        for hop in ((u, v), (v, u)):
            rows.append([1.0 if hop in paths[p] else 0.0 for p in pairs])
            names.append(f"{hop[0]}>{hop[1]}")
            cmap.append(None)
    topo = Topology(kind, k, edges, tuple(cmap))
    return RoutingMatrix(np.array(rows), tuple(names), _route_names(pairs), topo)


def build_chain(node_count: int) -> RoutingMatrix:
    """Bidirectional chain ``0 - 1 - ... - (k-1)``."""
    if int(node_count) != node_count or node_count < 2:
        raise ValueError("a chain needs at least 2 nodes")
    k = int(node_count)
    return build_custom(k, [(i, i + 1) for i in range(k - 1)], kind="chain")


def build_two_router(nodes_router1: int, nodes_router2: int) -> RoutingMatrix:
    """Two routers joined by one link, with the nodes split between them.

    Counters are the per-node access counters followed by the two
    directions of the inter-router link.
    """
    a, b = int(nodes_router1), int(nodes_router2)
    if a < 1 or b < 1 or a != nodes_router1 or b != nodes_router2:
        raise ValueError("each router needs at least one node")
    k = a + b
    pairs = _od_pairs(k)
    rows, names, cmap = _access_rows(k, pairs)
    rows.append([1.0 if o < a <= d else 0.0 for o, d in pairs])
    rows.append([1.0 if d < a <= o else 0.0 for o, d in pairs])
    names += ["r1>r2", "r2>r1"]
    cmap += [None, None]
    topo = Topology("two-router", k, ((a, b),), tuple(cmap))
    return RoutingMatrix(np.array(rows), tuple(names), _route_names(pairs), topo)


# -- structural checks ------------------------------------------------------

def check_unimodular(A, cap: int = 10**6):
    """Test whether every maximal square submatrix has determinant in {-1, 0, 1}.

    Returns ``(True, None)`` or ``(False, cols)`` where ``cols`` are the
    columns of the first offending ``m x m`` submatrix.  ``A`` must be an
    integer matrix of full row rank.
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    if np.any(a != np.round(a)):
        raise ValueError("unimodularity is only defined for integer matrices")
    m, n = a.shape
    if np.linalg.matrix_rank(a) < m:
        raise ValueError("matrix must have full row rank; drop redundant rows first")
    count = math.comb(n, m)
    if count > cap:
        raise ValueError(f"{count} submatrices exceed the enumeration cap of {cap}")
    combos = itertools.combinations(range(n), m)
    while True:
        chunk = list(itertools.islice(combos, 4096))
        if not chunk:
            return True, None
        idx = np.array(chunk)
        dets = np.rint(np.linalg.det(a[:, idx].transpose(1, 0, 2)))
        bad = np.flatnonzero(np.abs(dets) > 1)
        if bad.size:
            return False, tuple(int(j) for j in idx[bad[0]])


def check_identifiability(A) -> bool:
    """True when A's rows and their pairwise products span all routes."""
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    m, n = a.shape
    i, j = np.triu_indices(m)
    b = np.vstack([a, a[i] * a[j]])
    return int(np.linalg.matrix_rank(b)) == n


# -- CSV --------------------------------------------------------------------

def infer_topology(entries) -> Optional[Topology]:
    """Recover the access-counter map from the matrix alone.

    Routes are taken in origin-major order over ``k`` nodes (``n = k**2``).
    A row equal to the indicator of every route leaving node ``o`` is its
    outbound counter, and likewise for destinations.  Returns ``None`` when
    ``n`` is not a square or no row matches.
    """
    a = np.asarray(entries, dtype=float)
    k = int(round(np.sqrt(a.shape[1])))
    if k * k != a.shape[1]:
        return None
    eye = np.eye(k)
    outs = np.kron(eye, np.ones(k))
    ins = np.kron(np.ones(k), eye)
    cmap = []
    for row in a:
        hit = None
        for node in range(k):
            if np.array_equal(row, outs[node]):
                hit = (node, "out")
            elif np.array_equal(row, ins[node]):
                hit = (node, "in")
        cmap.append(hit)
    if all(c is None for c in cmap):
        return None
    return Topology("inferred", k, (), tuple(cmap))


def read_routing_csv(path) -> RoutingMatrix:
    """Read a routing matrix: route names in the header, counter name first."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names, rows = [], []
        for rec in reader:
            if not rec:
                continue
            names.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    a = np.array(rows)
    return RoutingMatrix(a, tuple(names), tuple(header[1:]), infer_topology(a))


def write_routing_csv(A: RoutingMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["counter", *A.col_names])
        for name, row in zip(A.row_names, A.entries):
            w.writerow([name, *(f"{v:g}" for v in row)])
