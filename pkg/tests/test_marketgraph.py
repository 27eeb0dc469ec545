import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sbpairs.feed import IncompleteBook, PriceBook
from sbpairs.marketgraph import (
    EmptySequence,
    MissingHistory,
    average_dtw,
    build_graph,
    build_similarity,
    dtw_distance,
    load_similarity,
    minute_histories,
    write_similarity,
)

from conftest import quote, similarity, universe

seq = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8)


def test_dtw_examples():
    assert dtw_distance([1, 2, 3], [1, 2, 3]) == 0
    assert dtw_distance([0, 0], [1, 1]) == 2
    assert dtw_distance([4.5], [1.0]) == 3.5
    with pytest.raises(EmptySequence):
        dtw_distance([], [1.0])


@given(seq, seq)
def test_dtw_is_a_pseudometric(a, b):
    d = dtw_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(dtw_distance(b, a), abs=1e-12)
    assert dtw_distance(a, a) == 0


def test_similarity_hand_fixture():
    # values frozen from a recursive exact-fraction DTW evaluation
    hist = [
        [[1, 2, 3], [2, 2]],
        [[1, 3], [2, 1, 2]],
        [[3, 3, 3], [0, 1]],
    ]
    sim = build_similarity(hist, ["A", "B", "C"])
    assert sim.get("A", "B") == pytest.approx(2 / 3, abs=1e-15)
    assert sim.get("A", "C") == 0.0
    assert sim.get("B", "C") == pytest.approx(1 / 6, abs=1e-15)
    assert np.array_equal(sim.s, sim.s.T)


def test_identical_histories_give_unit_similarity():
    h = [[0.1, 0.2, 0.15]] * 3
    sim = build_similarity([h, h, h])
    assert np.all(sim.s == 1.0)


def test_most_distant_pair_has_zero_similarity(rng):
    hist = [[list(np.cumsum(rng.normal(0, 1, 10))) for _ in range(5)] for _ in range(4)]
    sim = build_similarity(hist)
    d = average_dtw(hist)
    i, j = np.unravel_index(np.argmax(d), d.shape)
    assert sim.s[i, j] == 0.0
    off = ~np.eye(4, dtype=bool)
    assert np.all((sim.s[off] >= 0) & (sim.s[off] <= 1))


def test_missing_history():
    with pytest.raises(MissingHistory):
        build_similarity([[[1.0]], []])


def _book(codes, quotes, prices=None):
    book = PriceBook(universe(codes, prices))
    for k, (c, b, a) in enumerate(quotes):
        book.apply(quote(k, c, b, a))
    return book


def test_build_graph_substitution():
    # s = 0.8, norm_ask_j = 0.99, norm_bid_i = 1.01 -> -0.016
    book = _book(["I", "J"], [("I", 1010, 1020), ("J", 980, 990)])
    g = build_graph(book.snapshot(), similarity(["I", "J"], [[1, 0.8], [0.8, 1]]))
    assert g.w[1, 2] == pytest.approx(-0.016, abs=1e-15)
    assert np.all(g.w[0, :] == 0) and np.all(g.w[:, 0] == 0)


def test_zero_similarity_zero_weight():
    book = _book(["I", "J"], [("I", 1010, 1020), ("J", 980, 990)])
    g = build_graph(book.snapshot(), similarity(["I", "J"], [[1, 0], [0, 1]]))
    assert g.w[1, 2] == 0.0 and g.w[2, 1] == 0.0


def test_incomplete_book():
    book = _book(["I", "J"], [("I", 1010, 1020)])
    with pytest.raises(IncompleteBook):
        build_graph(book.snapshot(), similarity(["I", "J"], [[1, 1], [1, 1]]))


@given(
    st.lists(st.tuples(st.integers(900, 1100), st.integers(0, 5)), min_size=3, max_size=3),
    st.permutations([1, 2, 3]),
)
def test_bypass_costs_exactly_the_transit_spread(levels, order):
    codes = ["A", "B", "C"]
    book = _book(codes, [(c, b, b + s) for c, (b, s) in zip(codes, levels)])
    g = build_graph(book.snapshot(), similarity(codes, np.ones((3, 3))))
    a, c, b = order
    extra = g.w[a, c] + g.w[c, b] - g.w[a, b]
    assert extra == pytest.approx(levels[c - 1][1] / 1000, abs=1e-12)
    assert extra >= -1e-15


def test_bypass_can_beat_direct_with_partial_similarity():
    codes = ["A", "B", "C"]
    book = _book(codes, [("A", 1000, 1001), ("B", 995, 996), ("C", 990, 991)])
    s = [[1, 0.1, 0.9], [0.1, 1, 0.9], [0.9, 0.9, 1]]
    g = build_graph(book.snapshot(), similarity(codes, s))
    assert g.w[1, 3] + g.w[3, 2] < g.w[1, 2]


def test_similarity_file_round_trip(tmp_path):
    sim = similarity(["A", "B", "C"], [[1, 0.25, 0.5], [0.25, 1, 1 / 3], [0.5, 1 / 3, 1]])
    p = tmp_path / "s.csv"
    write_similarity(sim, p)
    assert p.read_text().splitlines()[0] == "code_i,code_j,s"
    back = load_similarity(p)
    assert np.array_equal(back.s, sim.s)


def test_minute_histories_sample_on_grid():
    u = universe(["A", "B"], [1000, 1000])
    events = [quote(0, "A", 999, 1001), quote(0, "B", 1999, 2001), quote(90 * 10**9, "A", 1099, 1101)]
    hist = minute_histories(events, u)
    assert hist[0] == [[1.0, 1.0, 1.1]]
    assert hist[1] == [[2.0, 2.0, 2.0]]
    assert all(math.isfinite(v) for d in hist[0] for v in d)
