import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbpairs.qubo import (
    DimensionMismatch,
    IsingModel,
    QuboProblem,
    binary_to_spins,
    default_penalty_weight,
    eval_cost,
    eval_penalty,
    eval_total,
    from_flat,
    load_graph_dump,
    load_tabu,
    qubo_to_ising,
    tabu_matrix,
    to_flat,
    to_ising,
    write_graph_dump,
    write_tabu,
)

from conftest import graph


def all_assignments(m):
    n = m * (m - 1)
    bits = ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(np.int64)
    return bits, from_flat(bits, m)


def rand_graph(rng, n):
    return graph(rng.uniform(-0.05, 0.05, (n + 1, n + 1)))


def edges(m, *pairs):
    b = np.zeros((m, m), dtype=np.int64)
    for i, j in pairs:
        b[i, j] = 1
    return b


def test_flat_layout_round_trip(rng):
    b = rng.integers(0, 2, (5, 5))
    np.fill_diagonal(b, 0)
    assert np.array_equal(from_flat(to_flat(b), 5), b)
    assert to_flat(b).shape == (20,)


def test_cost_examples(rng):
    q = QuboProblem.build(rand_graph(rng, 3))
    w = q.graph.w
    assert eval_cost(q, np.zeros((4, 4))) == 0
    assert eval_cost(q, edges(4, (1, 2))) == w[1, 2]
    assert eval_cost(q, edges(4, (0, 1), (1, 2), (2, 0))) == w[1, 2]


def test_penalty_examples():
    q = QuboProblem.build(graph(np.zeros((4, 4))))
    assert eval_penalty(q, edges(4, (0, 1), (1, 2), (2, 0))) == 0
    assert eval_penalty(q, edges(4, (1, 2), (2, 1))) == 2
    t = tabu_matrix([(2, 1)], 4)  # short 2, long 1 -> t[1][2]
    qt = QuboProblem.build(q.graph, t)
    assert t[1, 2] == 1
    assert eval_penalty(qt, edges(4, (0, 2), (2, 1), (1, 0))) == 1
    assert eval_penalty(qt, edges(4, (0, 2), (2, 3), (3, 0))) == 0
    assert eval_penalty(qt, edges(4, (0, 1), (1, 2), (2, 0))) == 0


def test_total_examples():
    g = graph([[0, 0, 0], [0, 0, -0.016], [0, 0.004, 0]])
    q = QuboProblem(g, np.zeros((3, 3), dtype=np.int64), 1.0, 10.0)
    assert eval_total(q, edges(3, (0, 1), (1, 2), (2, 0))) == pytest.approx(-0.016, abs=1e-18)
    assert eval_total(q, edges(3, (0, 1), (1, 0))) == 20.0
    assert eval_total(q, np.zeros((3, 3))) == 0


def test_dimension_mismatch():
    q = QuboProblem.build(graph(np.zeros((4, 4))))
    with pytest.raises(DimensionMismatch):
        eval_cost(q, np.zeros((3, 3)))
    with pytest.raises(DimensionMismatch):
        QuboProblem(q.graph, np.zeros((3, 3), dtype=np.int64))


def test_default_penalty_weight():
    assert default_penalty_weight(graph(np.zeros((3, 3)))) == 1.0
    g = graph([[0, 0, 0], [0, 0, -0.016], [0, 0.004, 0]])
    assert default_penalty_weight(g) == pytest.approx(1.02, abs=1e-15)


def test_single_violation_dominates_any_cost(rng):
    bits, x = all_assignments(4)
    for _ in range(10):
        q = QuboProblem.build(rand_graph(rng, 3))
        pen = eval_penalty(q, x)
        tot = eval_total(q, x)
        best_cost = eval_cost(q, x).min()
        assert np.all(tot[pen >= 1] >= q.m_p + best_cost)
        assert q.m_p > abs(best_cost)


def test_ising_small_identities():
    single = qubo_to_ising(np.array([3.0]), np.zeros((1, 1)))
    assert single.h[0] == 1.5 and single.offset == 1.5
    pair = np.array([[0.0, 1.0], [1.0, 0.0]])
    m = qubo_to_ising(np.zeros(2), pair)
    assert m.J[0, 1] == 0.25 and list(m.h) == [0.25, 0.25] and m.offset == 0.25


def test_ising_matches_eval_total_exhaustively(rng):
    bits, x = all_assignments(4)
    spins = binary_to_spins(bits)
    for tabu in ([], [(1, 2)], [(2, 3), (3, 1)]):
        q = QuboProblem.build(rand_graph(rng, 3), tabu)
        model = to_ising(q)
        assert isinstance(model, IsingModel)
        e = model.energy(spins)
        ref = eval_total(q, x)
        assert np.allclose(e, ref, rtol=1e-9, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.floats(0.1, 10), st.integers(0, 2**31))
def test_total_homogeneity(n, k, seed):
    rng = np.random.default_rng(seed)
    g = rand_graph(rng, n)
    q = QuboProblem(g, np.zeros((n + 1, n + 1), dtype=np.int64), 1.0, 2.0)
    qk = QuboProblem(graph(g.w * k), q.tabu, 1.0, 2.0 * k)
    x = rng.integers(0, 2, (n + 1, n + 1))
    assert eval_total(qk, x) == pytest.approx(k * eval_total(q, x), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31))
def test_penalty_nonnegative_and_integral(n, seed):
    rng = np.random.default_rng(seed)
    t = (rng.random((n + 1, n + 1)) < 0.3).astype(np.int64)
    q = QuboProblem.build(rand_graph(rng, n), t)
    x = rng.integers(0, 2, (8, n + 1, n + 1))
    p = eval_penalty(q, x)
    assert np.all(p >= 0) and np.all(p == np.round(p))


def test_graph_dump_round_trip(tmp_path, rng):
    g = rand_graph(rng, 3)
    p = tmp_path / "g.csv"
    write_graph_dump(g, p, 1.0, 2.5)
    back, m_c, m_p = load_graph_dump(p)
    assert np.array_equal(back.w, g.w) and (m_c, m_p) == (1.0, 2.5)
    write_graph_dump(g, p)
    assert load_graph_dump(p)[2] is None
    t = tabu_matrix([(1, 2)], 4)
    write_tabu(t, tmp_path / "t.csv")
    assert np.array_equal(load_tabu(tmp_path / "t.csv", 4), t)


def test_graph_dump_rejects_dummy_weight(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("N,m_c,m_p\n2,1,default\ni,j,w\n0,1,0.5\n")
    with pytest.raises(ValueError):
        load_graph_dump(p)


def test_tabu_orientation_matches_pair():
    for s, l in itertools.permutations(range(1, 4), 2):
        t = tabu_matrix([(s, l)], 4)
        assert t[l, s] == 1 and t.sum() == 1
