"""Cyclic-path QUBO over the edge variables of the market graph.

The decision variable ``b[i][j]`` (i != j, nodes 0..N) marks edge (i, j) as
part of the chosen cycle, giving N(N+1) binary variables.  The objective is

    H = m_c * sum_ij w_ij b_ij + m_p * P(b)

where the penalty P sums, with ordered-pair conventions,

1. sum_i sum_{j != j'} b_ij b_ij'        (out-degree at most one)
2. sum_j sum_{i != i'} b_ij b_i'j        (in-degree at most one)
3. sum_i (out_i - in_i)^2                (flow balance)
4. sum_ij b_ij b_ji                      (no edge used both ways)
5. sum_ij T_ij b_0j b_i0                 (tabu pairs at the dummy node)

Evaluation works on the structure directly (row/column sums), never on a
materialized quartic coefficient tensor.  All ``eval_*`` functions accept a
single (N+1, N+1) assignment or a batch with leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

from .marketgraph import MarketGraph


class DimensionMismatch(ValueError):
    pass


def edge_index(n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (row, col) of every off-diagonal edge variable."""
    rows, cols = np.nonzero(~np.eye(n_nodes, dtype=bool))
    return rows, cols


def to_flat(x: np.ndarray) -> np.ndarray:
    rows, cols = edge_index(x.shape[-1])
    return x[..., rows, cols]


def from_flat(v: np.ndarray, n_nodes: int) -> np.ndarray:
    rows, cols = edge_index(n_nodes)
    out = np.zeros(v.shape[:-1] + (n_nodes, n_nodes), dtype=v.dtype)
    out[..., rows, cols] = v
    return out


def tabu_matrix(pairs: Iterable[tuple[int, int]], n_nodes: int) -> np.ndarray:
    """Tabu matrix for (short, long) pairs: pair (s, l) sets ``t[l][s]``.

    That entry penalizes exactly the cycles leaving the dummy toward ``s``
    and returning from ``l``.
    """
    t = np.zeros((n_nodes, n_nodes), dtype=np.int64)
    for short, long in pairs:
        if not (0 < short < n_nodes and 0 < long < n_nodes) or short == long:
            raise ValueError(f"bad tabu pair ({short}, {long})")
        t[long, short] = 1
    return t


def tabu_pairs(t: np.ndarray) -> list[tuple[int, int]]:
    longs, shorts = np.nonzero(t)
    return sorted(zip(shorts.tolist(), longs.tolist()))


def default_penalty_weight(graph: MarketGraph) -> float:
    """``1 + sum |w|``: one violation always outweighs any cost improvement."""
    return 1.0 + math.fsum(np.abs(graph.w).ravel().tolist())


@dataclass(frozen=True)
class QuboProblem:
    graph: MarketGraph
    tabu: np.ndarray
    m_c: float = 1.0
    m_p: float = 1.0

    def __post_init__(self) -> None:
        if not (self.m_c > 0 and self.m_p > 0):
            raise ValueError("m_c and m_p must be positive")
        m = self.graph.n_nodes
        if self.tabu.shape != (m, m):
            raise DimensionMismatch(f"tabu must be {m}x{m}, got {self.tabu.shape}")
        t = np.asarray(self.tabu, dtype=np.int64).copy()
        if np.any((t != 0) & (t != 1)):
            raise ValueError("tabu entries must be 0 or 1")
        t[0, :] = 0
        t[:, 0] = 0
        np.fill_diagonal(t, 0)
        object.__setattr__(self, "tabu", t)

    @classmethod
    def build(
        cls,
        graph: MarketGraph,
        tabu: Iterable[tuple[int, int]] | np.ndarray = (),
        m_c: float = 1.0,
        m_p: float | None = None,
    ) -> "QuboProblem":
        if not isinstance(tabu, np.ndarray):
            tabu = tabu_matrix(tabu, graph.n_nodes)
        if m_p is None:
            m_p = default_penalty_weight(graph)
        return cls(graph, tabu, m_c, m_p)

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def n_vars(self) -> int:
        m = self.graph.n_nodes
        return m * (m - 1)

    @cached_property
    def ising(self) -> "IsingModel":
        return to_ising(self)


def _binary(q: QuboProblem, x: np.ndarray) -> np.ndarray:
    m = q.graph.n_nodes
    x = np.asarray(x)
    if x.shape[-2:] != (m, m):
        raise DimensionMismatch(f"expected (..., {m}, {m}) assignment, got {x.shape}")
    b = x.astype(np.int64)
    b = b * (1 - np.eye(m, dtype=np.int64))
    return b


def penalty_terms(q: QuboProblem, x: np.ndarray) -> tuple[np.ndarray, ...]:
    """The five penalty terms separately (integers, batch-shaped)."""
    b = _binary(q, x)
    out_deg = b.sum(-1)
    in_deg = b.sum(-2)
    t1 = (out_deg * (out_deg - 1)).sum(-1)
    t2 = (in_deg * (in_deg - 1)).sum(-1)
    t3 = ((out_deg - in_deg) ** 2).sum(-1)
    t4 = (b * np.swapaxes(b, -1, -2)).sum((-2, -1))
    t5 = np.einsum("ij,...j,...i->...", q.tabu, b[..., 0, :], b[..., :, 0])
    return t1, t2, t3, t4, t5


def eval_penalty(q: QuboProblem, x: np.ndarray):
    total = sum(penalty_terms(q, x))
    return int(total) if np.ndim(total) == 0 else total


def eval_cost(q: QuboProblem, x: np.ndarray):
    b = _binary(q, x)
    if b.ndim == 2:
        return math.fsum(q.graph.w[b == 1].tolist())
    return (q.graph.w * b).sum((-2, -1))


def eval_total(q: QuboProblem, x: np.ndarray):
    return q.m_c * eval_cost(q, x) + q.m_p * eval_penalty(q, x)


@dataclass(frozen=True)
class IsingModel:
    """Spin model ``E(s) = offset + h.s + sum_{k<l} J_kl s_k s_l`` over s in {-1, +1}.

    ``J`` is stored symmetric with a zero diagonal, so the pair sum equals
    ``s.J.s / 2``.
    """

    J: np.ndarray
    h: np.ndarray
    offset: float

    @property
    def n(self) -> int:
        return self.h.shape[0]

    def energy(self, spins: np.ndarray):
        s = np.asarray(spins, dtype=np.float64)
        return self.offset + s @ self.h + 0.5 * np.einsum("...k,kl,...l->...", s, self.J, s)


def qubo_to_ising(linear: np.ndarray, pair: np.ndarray, constant: float = 0.0) -> IsingModel:
    """Substitute b = (1 + s)/2 into ``constant + linear.b + sum_{k<l} pair_kl b_k b_l``.

    ``pair`` is symmetric with zero diagonal and holds the full coefficient
    of each unordered product.
    """
    linear = np.asarray(linear, dtype=np.float64)
    pair = np.asarray(pair, dtype=np.float64)
    J = pair / 4.0
    h = linear / 2.0 + pair.sum(axis=1) / 4.0
    offset = constant + linear.sum() / 2.0 + pair.sum() / 8.0
    return IsingModel(J, h, float(offset))


def structure_pairs(n_nodes: int, tabu: np.ndarray | None = None) -> np.ndarray:
    """Pair coefficients of the unit-weight penalty, indexed by flat edge variables.

    Same-tail or same-head edges couple with +4, head-to-tail chains with
    -2, opposite edges with -2 (flow term -4, opposite-edge term +2) and each
    tabu entry T_ij adds +1 between (0, j) and (i, 0).
    """
    rows, cols = edge_index(n_nodes)
    rk, ck = rows[:, None], cols[:, None]
    rl, cl = rows[None, :], cols[None, :]
    pair = (
        4 * (rk == rl)
        + 4 * (ck == cl)
        - 2 * (ck == rl)
        - 2 * (rk == cl)
        + 2 * ((rk == cl) & (ck == rl))
    ).astype(np.float64)
    if tabu is not None:
        hit = (rk == 0) & (cl == 0)
        pair += np.where(hit, tabu[rl, ck], 0)
        hit = (ck == 0) & (rl == 0)
        pair += np.where(hit, tabu[rk, cl], 0)
    np.fill_diagonal(pair, 0.0)
    return pair


def to_ising(q: QuboProblem) -> IsingModel:
    """Dense spin-model coefficients of the full problem (flat edge ordering)."""
    rows, cols = edge_index(q.n_nodes)
    linear = q.m_c * q.graph.w[rows, cols] + 2.0 * q.m_p
    pair = q.m_p * structure_pairs(q.n_nodes, q.tabu)
    return qubo_to_ising(linear, pair)


def spins_to_binary(spins: np.ndarray) -> np.ndarray:
    return ((1 + np.asarray(spins)) // 2).astype(np.int64)


def binary_to_spins(b: np.ndarray) -> np.ndarray:
    return 2 * np.asarray(b, dtype=np.int64) - 1


# -- dump files ---------------------------------------------------------------
#
#   N,m_c,m_p          header names
#   3,1.0,default      values; m_p "default" means 1 + sum |w|
#   i,j,w              edge rows, node numbers 0..N, zero rows may be omitted
#
# A tabu file holds rows ``i,j,1`` that set tabu matrix entry t[i][j].


def write_graph_dump(graph: MarketGraph, path, m_c: float = 1.0, m_p: float | None = None) -> None:
    m = graph.n_nodes
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("N,m_c,m_p\n")
        fh.write(f"{m - 1},{m_c!r},{'default' if m_p is None else repr(float(m_p))}\n")
        fh.write("i,j,w\n")
        for i in range(m):
            for j in range(m):
                if i != j and graph.w[i, j] != 0.0:
                    fh.write(f"{i},{j},{float(graph.w[i, j])!r}\n")


def _rows(path) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append([f.strip() for f in line.split(",")])
    return out


def load_graph_dump(path) -> tuple[MarketGraph, float, float | None]:
    """Returns (graph, m_c, m_p or None for the default)."""
    rows = _rows(path)
    data = [r for r in rows if r and r[0].lstrip("-").isdigit()]
    if not data or len(data[0]) != 3:
        raise ValueError(f"{path}: missing N,m_c,m_p row")
    try:
        n = int(data[0][0])
        m_c = float(data[0][1])
        m_p = None if data[0][2] in ("default", "") else float(data[0][2])
        if n < 1:
            raise ValueError("N must be >= 1")
        w = np.zeros((n + 1, n + 1))
        for r in data[1:]:
            if len(r) != 3:
                raise ValueError(f"bad edge row {r}")
            i, j = int(r[0]), int(r[1])
            if not (0 <= i <= n and 0 <= j <= n) or i == j:
                raise ValueError(f"bad edge ({i}, {j})")
            if (i == 0 or j == 0) and float(r[2]) != 0.0:
                raise ValueError("dummy edges must have zero weight")
            w[i, j] = float(r[2])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{path}: non-finite weight")
    return MarketGraph(w), m_c, m_p


def load_tabu(path, n_nodes: int) -> np.ndarray:
    t = np.zeros((n_nodes, n_nodes), dtype=np.int64)
    for r in _rows(path):
        if not r[0].isdigit():
            continue
        if len(r) != 3:
            raise ValueError(f"{path}: bad tabu row {r}")
        i, j, v = int(r[0]), int(r[1]), int(r[2])
        if not (0 < i < n_nodes and 0 < j < n_nodes) or i == j or v not in (0, 1):
            raise ValueError(f"{path}: bad tabu row {r}")
        t[i, j] = v
    return t


def write_tabu(t: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("i,j,t\n")
        for i, j in zip(*np.nonzero(t)):
            fh.write(f"{i},{j},1\n")
