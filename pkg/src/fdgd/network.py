"""Control graph, doubly stochastic mixing matrix, and consensus helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ConnectivityError, DimensionError, NotStochasticError

STOCHASTIC_TOL = 1e-12


def _connected_components(N, edges):
    parent = list(range(N))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for v in range(N):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values())


@dataclass(frozen=True)
class ControlGraph:
    """Undirected, connected communication graph over the N controllers."""

    N: int
    edges: frozenset

    def __post_init__(self):
        if self.N < 1:
            raise DimensionError("graph needs at least one node")
        norm = set()
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop ({i},{i}) not allowed in the edge set")
            if not (0 <= i < self.N and 0 <= j < self.N):
                raise ValueError(f"edge ({i},{j}) out of range for N={self.N}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        comps = _connected_components(self.N, norm)
        if len(comps) > 1:
            raise ConnectivityError(
                f"graph is disconnected ({len(comps)} components)", components=comps
            )

    def degrees(self):
        deg = np.zeros(self.N, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbors(self, i):
        return sorted(
            j for a, b in self.edges for j in ((b,) if a == i else (a,) if b == i else ())
        )


def ring_graph(N: int) -> ControlGraph:
    """Plain N-cycle (for N=2 a single edge, for N=1 an isolated node)."""
    if N == 1:
        return ControlGraph(N=1, edges=frozenset())
    if N == 2:
        return ControlGraph(N=2, edges=frozenset({(0, 1)}))
    return ControlGraph(N=N, edges=frozenset((i, (i + 1) % N) for i in range(N)))


def complete_graph(N: int) -> ControlGraph:
    return ControlGraph(
        N=N, edges=frozenset((i, j) for i in range(N) for j in range(i + 1, N))
    )


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly stochastic consensus weights with spectral gap 1 - beta."""

    W: np.ndarray
    beta: float

    @classmethod
    def from_matrix(cls, W, graph: ControlGraph | None = None) -> "MixingMatrix":
        """Validate an explicit W against all mixing-matrix requirements."""
        W = linalg.require_square(W, "W")
        N = W.shape[0]
        if np.abs(W - W.T).max() > STOCHASTIC_TOL:
            raise NotStochasticError("W must be symmetric")
        ones = np.ones(N)
        if np.abs(W @ ones - ones).max() > STOCHASTIC_TOL:
            raise NotStochasticError("rows of W must sum to 1")
        if np.abs(W.T @ ones - ones).max() > STOCHASTIC_TOL:
            raise NotStochasticError("columns of W must sum to 1")
        if graph is not None:
            if graph.N != N:
                raise DimensionError("graph size does not match W")
            allowed = np.eye(N, dtype=bool)
            for i, j in graph.edges:
                allowed[i, j] = allowed[j, i] = True
            if np.any(W[~allowed] != 0.0):
                raise NotStochasticError("W has weight on a non-edge")
        b = beta(W)
        vals = linalg.sym_eigenvalues(W)
        if vals[-1] <= -1.0 + 1e-10:
            raise NotStochasticError(
                f"smallest eigenvalue of W too close to -1 ({vals[-1]:.12g})"
            )
        if b >= 1.0:
            raise NotStochasticError(f"spectral parameter beta must be < 1, got {b:.12g}")
        return cls(W=W, beta=b)

    @property
    def N(self) -> int:
        return self.W.shape[0]

    def lambda_min(self) -> float:
        return float(linalg.sym_eigenvalues(self.W)[-1])


def metropolis_weights(graph: ControlGraph) -> MixingMatrix:
    """Metropolis rule: w_ij = 1/(1 + max(deg_i, deg_j)) on edges.

    Self-weights absorb the remainder so rows sum to one; the result is
    symmetric doubly stochastic for any connected graph.
    """
    N = graph.N
    deg = graph.degrees()
    W = np.zeros((N, N))
    for i, j in graph.edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        W[i, j] = W[j, i] = w
    for i in range(N):
        W[i, i] = 1.0 - W[i].sum()
    return MixingMatrix.from_matrix(W, graph)


def beta(W) -> float:
    """max(|lambda_2|, |lambda_N|) of a symmetric doubly stochastic W."""
    vals = linalg.sym_eigenvalues(W)
    if abs(vals[0] - 1.0) > 1e-10:
        raise NotStochasticError(
            f"largest eigenvalue must be 1 for a stochastic matrix, got {vals[0]:.12g}"
        )
    if len(vals) == 1:
        return 0.0
    return float(max(abs(vals[1]), abs(vals[-1])))


def kron_apply(W, u_stack, m: int) -> np.ndarray:
    """Apply (W kron I_m) to a stacked vector without materializing the product.

    The stack is interpreted as N blocks of length m; block i of the result
    is the W-weighted sum of all blocks.
    """
    W = linalg.require_square(W, "W")
    u = linalg.as_vector(u_stack, "u_stack")
    N = W.shape[0]
    if m < 1 or u.shape[0] != N * m:
        raise DimensionError(
            f"stack length {u.shape[0]} incompatible with N={N}, m={m}"
        )
    return (W @ u.reshape(N, m)).reshape(-1)


def graph_to_json(graph: ControlGraph) -> str:
    return json.dumps(
        {"N": graph.N, "edges": sorted([list(e) for e in graph.edges])}
    )


def graph_from_json(text: str) -> ControlGraph:
    payload = json.loads(text)
    return ControlGraph(
        N=int(payload["N"]),
        edges=frozenset(tuple(e) for e in payload["edges"]),
    )
