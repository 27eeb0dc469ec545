"""Exhaustive ground truth for the cycle search.

Every ordered choice of 2..max_len distinct stocks v1..vk gives the cycle
0 -> v1 -> ... -> vk -> 0.  Sums are first computed vectorised per cycle
length, then the contenders for any requested rank are recomputed with
``math.fsum`` so that reported weights match :meth:`MarketGraph.path_weight`
bit for bit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .marketgraph import MarketGraph, build_similarity
from .qubo import tabu_matrix
from .verify import CyclePath

MAX_ORACLE_STOCKS = 10
_SLACK = 1e-9


class UniverseTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class OracleResult:
    graph: MarketGraph
    count: int
    _weights: np.ndarray = field(repr=False)
    _paths: list[np.ndarray] = field(repr=False)
    _offsets: np.ndarray = field(repr=False)

    def _nodes(self, flat: int) -> tuple[int, ...]:
        block = int(np.searchsorted(self._offsets, flat, side="right")) - 1
        row = self._paths[block][flat - self._offsets[block]]
        return (0, *row.tolist(), 0)

    def top(self, k: int) -> list[CyclePath]:
        """The k best cycles by (weight_sum, node list)."""
        if self.count == 0 or k <= 0:
            return []
        k = min(k, self.count)
        kth = np.partition(self._weights, k - 1)[k - 1]
        scale = 1.0 + float(np.abs(self._weights).max())
        idx = np.flatnonzero(self._weights <= kth + _SLACK * scale)
        paths = []
        for flat in idx.tolist():
            nodes = self._nodes(flat)
            paths.append(CyclePath(nodes, self.graph.path_weight(nodes)))
        paths.sort(key=lambda p: (p.weight_sum, p.nodes))
        return paths[:k]

    @property
    def best(self) -> CyclePath | None:
        top = self.top(1)
        return top[0] if top else None

    @property
    def ranked(self) -> list[CyclePath]:
        """All cycles, ascending; intended for small universes."""
        return self.top(self.count)


def _tabu(tabu, n_nodes: int) -> np.ndarray:
    if tabu is None:
        return np.zeros((n_nodes, n_nodes), dtype=np.int64)
    if isinstance(tabu, np.ndarray):
        return tabu
    return tabu_matrix(tabu, n_nodes)


def enumerate_cycles(
    graph: MarketGraph,
    tabu: np.ndarray | Iterable[tuple[int, int]] | None = None,
    max_len: int | None = None,
) -> OracleResult:
    """All dummy cycles with 2..max_len stocks, minus tabu (short, long) pairs.

    Tabu pairs only exclude cycles that start at the short stock and end at
    the long one; their edge stays usable inside longer bypass paths.
    """
    n = graph.n_stocks
    if n > MAX_ORACLE_STOCKS:
        raise UniverseTooLarge(f"{n} stocks; the oracle is limited to {MAX_ORACLE_STOCKS}")
    t = _tabu(tabu, graph.n_nodes)
    max_len = n if max_len is None else min(max_len, n)
    w = graph.w
    weights, paths = [], []
    for k in range(2, max_len + 1):
        perms = np.array(list(itertools.permutations(range(1, n + 1), k)), dtype=np.int64)
        if perms.size == 0:
            continue
        keep = t[perms[:, -1], perms[:, 0]] == 0
        perms = perms[keep]
        s = w[0, perms[:, 0]] + w[perms[:, -1], 0]
        for c in range(k - 1):
            s = s + w[perms[:, c], perms[:, c + 1]]
        weights.append(s)
        paths.append(perms)
    if weights:
        flat_w = np.concatenate(weights)
        offsets = np.cumsum([0] + [len(p) for p in paths[:-1]])
    else:
        flat_w = np.empty(0)
        offsets = np.zeros(0, dtype=np.int64)
    return OracleResult(graph, int(flat_w.size), flat_w, paths, np.asarray(offsets))


def optimal_pair(
    graph: MarketGraph,
    tabu: np.ndarray | Iterable[tuple[int, int]] | None = None,
    threshold: float = math.inf,
    max_len: int | None = None,
) -> CyclePath | None:
    """Minimum-weight cycle if its weight is at most ``threshold``."""
    best = enumerate_cycles(graph, tabu, max_len).best
    if best is None or best.weight_sum > threshold:
        return None
    return best


def cycle_count(n_stocks: int, max_len: int | None = None) -> int:
    """Sum of P(N, k) for k = 2..max_len."""
    max_len = n_stocks if max_len is None else min(max_len, n_stocks)
    return sum(math.perm(n_stocks, k) for k in range(2, max_len + 1))


def random_similarity_graph(
    n_stocks: int,
    rng: np.random.Generator,
    weight_range: float = 0.05,
    days: int = 5,
    samples: int = 30,
    sigma: float = 0.01,
) -> MarketGraph:
    """Benchmark instance: ``w[i][j] = s[i][j] * u[i][j]`` with u uniform in
    [-weight_range, weight_range] and s built from random-walk histories."""
    hist = [[np.cumsum(rng.normal(0.0, sigma, samples)) for _ in range(days)] for _ in range(n_stocks)]
    s = build_similarity(hist, days=days).node_matrix()
    w = s * rng.uniform(-weight_range, weight_range, (n_stocks + 1, n_stocks + 1))
    w[0, :] = 0.0
    w[:, 0] = 0.0
    np.fill_diagonal(w, 0.0)
    return MarketGraph(w)
