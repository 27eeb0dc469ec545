from __future__ import annotations

from decimal import Decimal

import numpy as np
import pytest

from sbpairs.feed import EventKind, FeedEvent, Universe
from sbpairs.marketgraph import MarketGraph, SimilarityMatrix

DAY = 19_726 * 86_400 * 10**9  # 2024-01-04 00:00
OPEN = DAY + 9 * 3600 * 10**9


def at(seconds_after_open: float, day: int = 0) -> int:
    return OPEN + day * 86_400 * 10**9 + int(seconds_after_open * 10**9)


def universe(codes, prices=None, lot=100) -> Universe:
    prices = prices or [1000] * len(codes)
    return Universe.from_rows((c, lot, Decimal(p)) for c, p in zip(codes, prices))


def quote(ts, code, bid, ask, kind=EventKind.QUOTE) -> FeedEvent:
    return FeedEvent(ts, code, Decimal(str(bid)), Decimal(str(ask)), kind)


def similarity(codes, s) -> SimilarityMatrix:
    s = np.array(s, dtype=float)
    return SimilarityMatrix(tuple(codes), s)


def graph(w) -> MarketGraph:
    w = np.array(w, dtype=float)
    w[0, :] = 0.0
    w[:, 0] = 0.0
    np.fill_diagonal(w, 0.0)
    return MarketGraph(w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240104)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """One pass/fail line per acceptance criterion, echoed at session end."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
