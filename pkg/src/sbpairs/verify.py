"""Decode an edge assignment into a trading cycle and judge it.

Once every node has in-degree equal to out-degree and both are at most one,
the chosen edges split into disjoint simple cycles.  Exactly one cycle,
passing through the dummy node and visiting at least two stocks, encodes a
pair trade: the stock after the dummy is sold short, the stock before it is
bought.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .marketgraph import MarketGraph


class Violation(Enum):
    EMPTY = "empty"
    DEGREE = "degree-violation"
    FLOW = "flow-imbalance"
    OPPOSITE_EDGE = "opposite-edge"
    NO_DUMMY_CYCLE = "no-dummy-cycle"
    SPLIT_CYCLES = "split-cycles"
    TABU = "tabu"


class Outcome(Enum):
    TRADABLE = "valid-and-tradable"
    BELOW_THRESHOLD = "valid-below-threshold"
    INVALID = "invalid"


DEFAULT_THRESHOLD = -0.002


@dataclass(frozen=True)
class CyclePath:
    """A cycle 0 -> v1 -> ... -> vk -> 0 with k >= 2 distinct stocks."""

    nodes: tuple[int, ...]
    weight_sum: float | None = None

    def __post_init__(self) -> None:
        nodes = tuple(int(v) for v in self.nodes)
        object.__setattr__(self, "nodes", nodes)
        inner = nodes[1:-1]
        if len(nodes) < 4 or nodes[0] != 0 or nodes[-1] != 0:
            raise ValueError(f"not a dummy cycle: {nodes}")
        if 0 in inner or len(set(inner)) != len(inner):
            raise ValueError(f"interior nodes must be distinct stocks: {nodes}")

    @classmethod
    def through(cls, interior: Sequence[int], graph: MarketGraph | None = None) -> "CyclePath":
        nodes = (0, *interior, 0)
        return cls(nodes, graph.path_weight(nodes) if graph is not None else None)

    @property
    def pair(self) -> tuple[int, int]:
        """(short, long) as stock indices."""
        return self.nodes[1], self.nodes[-2]

    @property
    def interior(self) -> tuple[int, ...]:
        return self.nodes[1:-1]

    @property
    def is_direct(self) -> bool:
        return len(self.nodes) == 4

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.nodes, self.nodes[1:]))

    def edge_vars(self, n_nodes: int) -> np.ndarray:
        b = np.zeros((n_nodes, n_nodes), dtype=np.int64)
        for i, j in self.edges():
            b[i, j] = 1
        return b

    def notation(self, graph: MarketGraph | None = None) -> str:
        """``0>a>c>b>0`` using stock codes when a graph is given."""
        if graph is None:
            return ">".join(str(v) for v in self.nodes)
        return ">".join(graph.label(v) for v in self.nodes)


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    reason: Violation | None = None

    @property
    def tradable(self) -> bool:
        return self.outcome is Outcome.TRADABLE


def _successors(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b = np.asarray(x).astype(bool)
    b = b & ~np.eye(b.shape[0], dtype=bool)
    return b, b.sum(axis=1), b.sum(axis=0)


def decode(x: np.ndarray, graph: MarketGraph | None = None) -> CyclePath | Violation:
    """Return the encoded cycle, or the reason the assignment encodes none.

    Checks run in order: empty, degree (some node with two outgoing or two
    incoming edges), flow (in != out somewhere), then on the remaining union
    of disjoint cycles: split-cycles (more than one), opposite-edge (a lone
    two-node cycle) and no-dummy-cycle.
    """
    b, out_deg, in_deg = _successors(x)
    if not b.any():
        return Violation.EMPTY
    if out_deg.max() > 1 or in_deg.max() > 1:
        return Violation.DEGREE
    if np.any(out_deg != in_deg):
        return Violation.FLOW
    nxt = np.argmax(b, axis=1)
    start = int(np.flatnonzero(out_deg)[0])
    cycle = [start]
    cur = int(nxt[start])
    while cur != start:
        cycle.append(cur)
        cur = int(nxt[cur])
    if len(cycle) != int(out_deg.sum()):
        return Violation.SPLIT_CYCLES
    if len(cycle) == 2:
        return Violation.OPPOSITE_EDGE
    if 0 not in cycle:
        return Violation.NO_DUMMY_CYCLE
    k = cycle.index(0)
    path = CyclePath.through(cycle[k + 1:] + cycle[:k], graph)
    return path


def evaluate(
    path: CyclePath,
    graph: MarketGraph,
    tabu: np.ndarray | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> Verdict:
    """Compare the path's weight sum with the opening threshold.

    A pair on the tabu list is never tradable; it is reported below
    threshold with reason ``TABU``.
    """
    weight = path.weight_sum if path.weight_sum is not None else graph.path_weight(path.nodes)
    short, long = path.pair
    if tabu is not None and tabu[long, short]:
        return Verdict(Outcome.BELOW_THRESHOLD, Violation.TABU)
    if weight <= threshold:
        return Verdict(Outcome.TRADABLE)
    return Verdict(Outcome.BELOW_THRESHOLD)


def verify(
    x: np.ndarray,
    graph: MarketGraph,
    tabu: np.ndarray | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[Verdict, CyclePath | None]:
    """decode + evaluate in one call."""
    decoded = decode(x, graph)
    if isinstance(decoded, Violation):
        return Verdict(Outcome.INVALID, decoded), None
    return evaluate(decoded, graph, tabu, threshold), decoded

