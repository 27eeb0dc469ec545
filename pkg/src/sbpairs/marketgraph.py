"""DTW-based similarity factors and the weighted market graph.

The graph has N+1 nodes; node 0 is the dummy node whose in/out edges all
weigh zero.  Edge (i, j) stands for "short i, long j" and weighs

    w[i][j] = s[i][j] * (norm_ask[j] - norm_bid[i])

so a strongly similar pair whose long leg is cheap relative to the short
leg gets a large negative weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .feed import (
    BookSnapshot,
    EventKind,
    FeedEvent,
    IncompleteBook,
    MalformedRecord,
    Universe,
)

NS_PER_DAY = 86_400 * 10**9


class EmptySequence(ValueError):
    pass


class MissingHistory(ValueError):
    pass


@njit(cache=True)
def _dtw(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.full(m + 1, np.inf)
    prev[0] = 0.0
    cur = np.empty(m + 1)
    for i in range(1, n + 1):
        cur[0] = np.inf
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            if prev[j - 1] < best:
                best = prev[j - 1]
            cur[j] = abs(ai - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Full-window DTW with |a_t - b_u| local cost and match/insert/delete steps."""
    x = np.ascontiguousarray(a, dtype=np.float64)
    y = np.ascontiguousarray(b, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise EmptySequence("dtw needs two non-empty sequences")
    return float(_dtw(x, y))


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise similarity in [0, 1]; ``s`` is N x N, diagonal set to 1 and unused."""

    codes: tuple[str, ...]
    s: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.codes)
        if self.s.shape != (n, n):
            raise ValueError(f"similarity must be {n}x{n}, got {self.s.shape}")
        off = ~np.eye(n, dtype=bool)
        if np.any(self.s[off] < 0) or np.any(self.s[off] > 1) or np.any(np.isnan(self.s[off])):
            raise ValueError("similarity entries must lie in [0, 1]")

    def get(self, code_i: str, code_j: str) -> float:
        return float(self.s[self.codes.index(code_i), self.codes.index(code_j)])

    def for_universe(self, universe: Universe) -> "SimilarityMatrix":
        """Reorder (and subset) to the universe's node order."""
        pos = {c: k for k, c in enumerate(self.codes)}
        missing = [c for c in universe.codes if c not in pos]
        if missing:
            raise MissingHistory(f"no similarity for {', '.join(missing)}")
        idx = [pos[c] for c in universe.codes]
        return SimilarityMatrix(tuple(universe.codes), self.s[np.ix_(idx, idx)].copy())

    def node_matrix(self) -> np.ndarray:
        """(N+1) x (N+1) copy with zero dummy row/column and zero diagonal."""
        n = len(self.codes)
        full = np.zeros((n + 1, n + 1))
        full[1:, 1:] = self.s
        np.fill_diagonal(full, 0.0)
        return full


def average_dtw(histories: Sequence[Sequence[Sequence[float]]], days: int = 5) -> np.ndarray:
    """Mean DTW distance over the trailing common days for every stock pair."""
    n = len(histories)
    for k, h in enumerate(histories):
        if len(h) == 0:
            raise MissingHistory(f"stock #{k + 1} has no daily sequences")
        if any(len(day) == 0 for day in h):
            raise MissingHistory(f"stock #{k + 1} has an empty daily sequence")
    seqs = [[np.asarray(day, dtype=np.float64) for day in h[-days:]] for h in histories]
    dbar = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            common = min(len(seqs[i]), len(seqs[j]))
            a, b = seqs[i][-common:], seqs[j][-common:]
            dbar[i, j] = dbar[j, i] = sum(float(_dtw(x, y)) for x, y in zip(a, b)) / common
    return dbar


def build_similarity(
    histories: Sequence[Sequence[Sequence[float]]],
    codes: Sequence[str] | None = None,
    days: int = 5,
) -> SimilarityMatrix:
    """Similarity s = 1 - dbar / max(dbar) from per-stock daily price sequences.

    ``histories[k]`` is the list of daily (normalized) price sequences of
    stock k, oldest first.  Identical histories give s = 1 everywhere.
    """
    dbar = average_dtw(histories, days)
    top = dbar.max() if dbar.size else 0.0
    s = np.ones_like(dbar) if top == 0 else 1.0 - dbar / top
    np.fill_diagonal(s, 1.0)
    np.clip(s, 0.0, 1.0, out=s)
    if codes is None:
        codes = [str(k + 1) for k in range(len(histories))]
    return SimilarityMatrix(tuple(codes), s)


def load_similarity(path: str | Path, universe: Universe | None = None) -> SimilarityMatrix:
    """Read ``code_i,code_j,s`` rows, one per unordered pair."""
    values: dict[tuple[str, str], float] = {}
    order: dict[str, None] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or rec[0].startswith("#"):
                continue
            if lineno == 1 and rec[0].strip() == "code_i":
                continue
            if len(rec) != 3:
                raise MalformedRecord(f"{path}:{lineno}: expected code_i,code_j,s")
            ci, cj = rec[0].strip(), rec[1].strip()
            try:
                v = float(rec[2])
            except ValueError:
                raise MalformedRecord(f"{path}:{lineno}: bad similarity value") from None
            if not 0.0 <= v <= 1.0:
                raise MalformedRecord(f"{path}:{lineno}: similarity outside [0, 1]")
            values[(ci, cj)] = values[(cj, ci)] = v
            order.setdefault(ci)
            order.setdefault(cj)
    codes = universe.codes if universe is not None else list(order)
    n = len(codes)
    s = np.ones((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            key = (codes[a], codes[b])
            if key not in values:
                raise MissingHistory(f"{path}: no similarity for pair {key[0]},{key[1]}")
            s[a, b] = s[b, a] = values[key]
    return SimilarityMatrix(tuple(codes), s)


def write_similarity(sim: SimilarityMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("code_i,code_j,s\n")
        n = len(sim.codes)
        for a in range(n):
            for b in range(a + 1, n):
                fh.write(f"{sim.codes[a]},{sim.codes[b]},{float(sim.s[a, b])!r}\n")


def minute_histories(
    events: Iterable[FeedEvent],
    universe: Universe,
    interval_ns: int = 60 * 10**9,
) -> list[list[list[float]]]:
    """Sample each stock's normalized mid price on a fixed grid, per day.

    A day's grid starts at its first event; the sample at grid point g is the
    stock's last mid strictly before g, divided by the day's base price, plus
    one closing sample after the day's last event.  Stocks not yet quoted on
    a day contribute no samples.
    """
    n = len(universe)
    base = [s.base_price for s in universe]
    days: list[list[list[float]]] = []
    current_day = None
    mids: list[Decimal | None] = [None] * n
    next_slot = 0

    def emit(seqs: list[list[float]]) -> None:
        for i in range(n):
            if mids[i] is not None:
                seqs[i].append(float(mids[i] / base[i]))

    for ev in events:
        day = ev.timestamp_ns // NS_PER_DAY
        if day != current_day:
            if days:
                emit(days[-1])
            days.append([[] for _ in range(n)])
            current_day = day
            mids = [None] * n
            next_slot = ev.timestamp_ns
        while next_slot < ev.timestamp_ns:
            emit(days[-1])
            next_slot += interval_ns
        k = universe.get(ev.code).index - 1
        mid = (ev.bid + ev.ask) / 2
        if ev.kind is EventKind.SESSION_OPEN and mid > 0:
            base[k] = mid
        mids[k] = mid
    if days:
        emit(days[-1])
    return [[d[i] for d in days if d[i]] for i in range(n)]


@dataclass(frozen=True)
class MarketGraph:
    """(N+1)-node weighted directed graph; ``w[0][k] = w[k][0] = 0``."""

    w: np.ndarray
    codes: tuple[str, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.w.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.w.shape[0] - 1

    def label(self, node: int) -> str:
        if node == 0:
            return "0"
        return self.codes[node - 1] if self.codes else str(node)

    def path_weight(self, nodes: Sequence[int]) -> float:
        """Exactly rounded sum of the edge weights along ``nodes``."""
        return math.fsum(self.w[a, b] for a, b in zip(nodes, nodes[1:]))


def graph_weights(s_nodes: np.ndarray, norm_bid: np.ndarray, norm_ask: np.ndarray) -> np.ndarray:
    """Edge weights from a node-indexed similarity matrix and normalized quotes."""
    return s_nodes * (norm_ask[None, :] - norm_bid[:, None])


def build_graph(book: BookSnapshot, sim: SimilarityMatrix) -> MarketGraph:
    """Build the market graph from a complete book snapshot."""
    if not book.complete:
        missing = [s.code for s, q in zip(book.stocks, book.quotes) if q is None]
        raise IncompleteBook(f"never quoted: {', '.join(missing)}")
    codes = tuple(s.code for s in book.stocks)
    if tuple(sim.codes) != codes:
        raise ValueError("similarity matrix is not in universe order")
    n = len(codes)
    nb = np.zeros(n + 1)
    na = np.zeros(n + 1)
    for k, q in enumerate(book.quotes, 1):
        nb[k] = float(q.norm_bid)
        na[k] = float(q.norm_ask)
    return MarketGraph(graph_weights(sim.node_matrix(), nb, na), codes)
