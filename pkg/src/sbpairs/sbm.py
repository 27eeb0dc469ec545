"""Ballistic simulated bifurcation (bSB) over the cyclic-path QUBO.

Each oscillator k has a position x_k in [-1, 1] and a momentum y_k.  One
symplectic-Euler step at ramp value a_t = a0 * t / n_steps is

    y_k += (-(a0 - a_t) * x_k + c0 * f_k) * dt
    x_k += a0 * y_k * dt

with perfectly inelastic walls (|x_k| > 1 puts x_k on the wall and zeroes
y_k).  ``f_k = -(sum_l J_kl x_l + h_k)`` is the force of the spin model
``E = offset + h.s + s.J.s/2``; the local fields act through an ancilla
oscillator pinned at +1.  The answer is read off the signs, with sign(0)
taken as +1.

Two kernels implement the force: a dense one for arbitrary
:class:`~sbpairs.qubo.IsingModel` instances and a structured one for
:class:`~sbpairs.qubo.QuboProblem` that works from row/column sums in
O(N^2) per step and skips every zero coupling.  State is float32.

Restarts draw their initial positions from a 32-bit xorshift stream
(13, 17, 5), uniform in [-0.1, 0.1], momenta zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .qubo import IsingModel, QuboProblem, from_flat

MASK32 = 0xFFFFFFFF
_TWO32 = 4294967296.0
INIT_SPREAD = 0.1


class ZeroState(ValueError):
    """xorshift cannot leave the all-zero state."""


def xorshift_next(state: int) -> tuple[int, int]:
    """One xorshift32 step; the output value is the new state."""
    if state & MASK32 == 0:
        raise ZeroState("xorshift state must be nonzero")
    s = state & MASK32
    s ^= (s << 13) & MASK32
    s ^= s >> 17
    s ^= (s << 5) & MASK32
    return s, s


class XorshiftRng:
    """Mutable xorshift32 stream used for restart seeds."""

    def __init__(self, seed: int) -> None:
        if seed & MASK32 == 0:
            raise ZeroState("seed must be nonzero modulo 2**32")
        self.state = seed & MASK32

    def next(self) -> int:
        value, self.state = xorshift_next(self.state)
        return value

    def uniform(self, n: int, spread: float = INIT_SPREAD) -> np.ndarray:
        out = np.empty(n, dtype=np.float32)
        self.state = _fill_uniform(self.state, out, spread)
        return out


@dataclass(frozen=True)
class SbParams:
    """Solver knobs.  ``a0``/``c0`` left as None are derived from the problem.

    For a :class:`QuboProblem` with M nodes the defaults are
    ``a0 = a0_scale * M**-0.75`` and ``c0 = c0_gain / (a0 * m_p * lam)`` where
    ``lam = 1.5 M - 2.5`` is the top eigenvalue of the unit penalty coupling.
    A bare :class:`IsingModel` uses ``a0 = 1`` and the mean-square rule of
    :func:`auto_c0`.
    """

    n_steps: int = 50
    dt: float = 0.65
    a0: float | None = None
    c0: float | None = None
    machine_size: int = 256
    a0_scale: float = 4.24
    c0_gain: float = 3.3

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name in ("a0", "c0"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive or None for auto")
        if not (self.a0_scale > 0 and self.c0_gain > 0):
            raise ValueError("a0_scale and c0_gain must be positive")
        if self.machine_size < 1:
            raise ValueError("machine_size must be positive")


@dataclass
class SbState:
    x: np.ndarray
    y: np.ndarray
    step: int = 0


def init_state(rng: XorshiftRng, n_vars: int) -> SbState:
    """Positions uniform in [-0.1, 0.1] from the rng stream, momenta zero."""
    if n_vars < 1:
        raise ValueError("n_vars must be >= 1")
    x = rng.uniform(n_vars)
    return SbState(x, np.zeros(n_vars, dtype=np.float32), 0)


# --- kernels -----------------------------------------------------------------


@njit(cache=True)
def _xs(s):
    s ^= (s << 13) & 0xFFFFFFFF
    s ^= s >> 17
    s ^= (s << 5) & 0xFFFFFFFF
    return s


@njit(cache=True)
def _fill_uniform(state, out, spread):
    for k in range(out.shape[0]):
        state = _xs(state)
        out[k] = np.float32(spread * (2.0 * state / 4294967296.0 - 1.0))
    return state


@njit(cache=True)
def _step(x, y, f, a_t, a0, c0, dt):
    peak = 0.0
    for k in range(x.shape[0]):
        yk = y[k] + (-(a0 - a_t) * x[k] + c0 * f[k]) * dt
        xk = x[k] + a0 * yk * dt
        if xk > 1.0:
            xk = 1.0
            yk = 0.0
        elif xk < -1.0:
            xk = -1.0
            yk = 0.0
        x[k] = np.float32(xk)
        y[k] = np.float32(yk)
        if abs(xk) > peak:
            peak = abs(xk)
    return peak


@njit(cache=True)
def _dense_force(J, h, x, f):
    n = x.shape[0]
    for k in range(n):
        acc = h[k]
        for l in range(n):
            acc += J[k, l] * x[l]
        f[k] = -acc


@njit(cache=True)
def _run_dense(J, h, x, y, n_steps, dt, a0, c0, peaks):
    f = np.empty(x.shape[0])
    for t in range(1, n_steps + 1):
        _dense_force(J, h, x, f)
        peaks[t - 1] = _step(x, y, f, a0 * t / n_steps, a0, c0, dt)


# The structured kernels keep positions and momenta as (M, M) float64
# matrices whose entries are always float32-representable (each step rounds
# through float32).  The diagonal is pinned at x = -1, i.e. b = 0, so row and
# column sums need no special-casing.


@njit(cache=True)
def _structured_force(X, W, tabu, m_p, F, out_s, in_s):
    """Force on every edge variable from row/column sums of b = (1+x)/2.

    ``W`` is m_c * w.  The penalty gradient per edge (i, j) is
    4(R_i - b_ij) + 4(C_j - b_ij) + 2 - 2C_i - 2R_j + 2b_ji plus the tabu
    contribution for dummy edges; the force is minus half of it.
    """
    M = X.shape[0]
    for i in range(M):
        in_s[i] = 0.0
    for i in range(M):
        acc = 0.0
        for j in range(M):
            acc += X[i, j]
            in_s[j] += X[i, j]
        out_s[i] = 0.5 * M + 0.5 * acc
    for i in range(M):
        in_s[i] = 0.5 * M + 0.5 * in_s[i]
    for i in range(M):
        oi = out_s[i]
        ci = in_s[i]
        for j in range(M):
            g = 4.0 * (oi + in_s[j]) - 4.0 * X[i, j] - 2.0 * (ci + out_s[j]) - 1.0 + X[j, i]
            F[i, j] = -0.5 * (W[i, j] + m_p * g)
    # tabu products only touch edges at the dummy node
    for i in range(1, M):
        for j in range(1, M):
            if tabu[i, j] != 0:
                F[0, j] -= 0.5 * m_p * tabu[i, j] * (0.5 + 0.5 * X[i, 0])
                F[i, 0] -= 0.5 * m_p * tabu[i, j] * (0.5 + 0.5 * X[0, j])


@njit(cache=True)
def _step_matrix(X, Y, F, a_t, a0, c0, dt):
    M = X.shape[0]
    peak = 0.0
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            yk = Y[i, j] + (-(a0 - a_t) * X[i, j] + c0 * F[i, j]) * dt
            xk = X[i, j] + a0 * yk * dt
            if xk > 1.0:
                xk = 1.0
                yk = 0.0
            elif xk < -1.0:
                xk = -1.0
                yk = 0.0
            X[i, j] = np.float32(xk)
            Y[i, j] = np.float32(yk)
            if abs(xk) > peak:
                peak = abs(xk)
    return peak


@njit(cache=True)
def _evolve_structured(W, tabu, m_p, X, Y, n_steps, dt, a0, c0, peaks, F, out_s, in_s):
    for t in range(1, n_steps + 1):
        _structured_force(X, W, tabu, m_p, F, out_s, in_s)
        peaks[t - 1] = _step_matrix(X, Y, F, a0 * t / n_steps, a0, c0, dt)


@njit(cache=True)
def _scatter(v, X, fill):
    M = X.shape[0]
    k = 0
    for i in range(M):
        for j in range(M):
            if i == j:
                X[i, j] = fill
            else:
                X[i, j] = v[k]
                k += 1


@njit(cache=True)
def _gather(X, v):
    M = X.shape[0]
    k = 0
    for i in range(M):
        for j in range(M):
            if i != j:
                v[k] = X[i, j]
                k += 1


@njit(cache=True)
def _run_structured(w, tabu, m_c, m_p, x, y, n_steps, dt, a0, c0, peaks):
    """Evolve flat float32 state vectors ``x``/``y`` in place."""
    M = w.shape[0]
    W = m_c * w
    X = np.empty((M, M))
    Y = np.empty((M, M))
    _scatter(x, X, -1.0)
    _scatter(y, Y, 0.0)
    F = np.zeros((M, M))
    out_s = np.empty(M)
    in_s = np.empty(M)
    _evolve_structured(W, tabu, m_p, X, Y, n_steps, dt, a0, c0, peaks, F, out_s, in_s)
    _gather(X, x)
    _gather(Y, y)


@njit(cache=True)
def _structured_energy(B, w, tabu, m_c, m_p):
    """eval_total of a binary (M, M) matrix with zero diagonal."""
    M = B.shape[0]
    cost = 0.0
    pen = 0
    out_s = np.zeros(M, dtype=np.int64)
    in_s = np.zeros(M, dtype=np.int64)
    for i in range(M):
        for j in range(M):
            if B[i, j]:
                cost += w[i, j]
                out_s[i] += 1
                in_s[j] += 1
                pen += B[j, i]
    for i in range(M):
        pen += out_s[i] * (out_s[i] - 1) + in_s[i] * (in_s[i] - 1)
        d = out_s[i] - in_s[i]
        pen += d * d
    for i in range(1, M):
        if B[i, 0]:
            for j in range(1, M):
                pen += tabu[i, j] * B[0, j]
    return m_c * cost + m_p * pen


@njit(cache=True)
def _is_dummy_cycle(B, tabu):
    """True iff B is one simple cycle through node 0 with at least two
    interior nodes and no tabu pair at the dummy."""
    M = B.shape[0]
    nxt = np.full(M, -1, dtype=np.int64)
    indeg = np.zeros(M, dtype=np.int64)
    n_edges = 0
    for i in range(M):
        for j in range(M):
            if B[i, j]:
                if nxt[i] >= 0:
                    return False
                nxt[i] = j
                indeg[j] += 1
                if indeg[j] > 1:
                    return False
                n_edges += 1
    if nxt[0] < 0:
        return False
    cur = 0
    last = 0
    length = 0
    while True:
        last = cur
        cur = nxt[cur]
        length += 1
        if cur < 0 or length > M:
            return False
        if cur == 0:
            break
    if length != n_edges or length < 3:
        return False
    return tabu[last, nxt[0]] == 0


@njit(cache=True)
def _best_of_structured(w, tabu, m_c, m_p, n_steps, dt, a0, c0, state, restarts, spread):
    """Valid dummy cycles beat everything else; then lowest energy, earliest
    restart on ties.  Returns the best (M, M) binary matrix."""
    M = w.shape[0]
    n = M * (M - 1)
    W = m_c * w
    x = np.empty(n, dtype=np.float32)
    X = np.empty((M, M))
    Y = np.zeros((M, M))
    F = np.zeros((M, M))
    out_s = np.empty(M)
    in_s = np.empty(M)
    B = np.zeros((M, M), dtype=np.int64)
    best = np.zeros((M, M), dtype=np.int64)
    best_e = np.inf
    best_valid = False
    peaks = np.empty(n_steps)
    for r in range(restarts):
        state = _fill_uniform(state, x, spread)
        _scatter(x, X, -1.0)
        Y[:, :] = 0.0
        _evolve_structured(W, tabu, m_p, X, Y, n_steps, dt, a0, c0, peaks, F, out_s, in_s)
        for i in range(M):
            for j in range(M):
                B[i, j] = 1 if (i != j and X[i, j] >= 0.0) else 0
        e = _structured_energy(B, w, tabu, m_c, m_p)
        valid = _is_dummy_cycle(B, tabu)
        if (valid and not best_valid) or (valid == best_valid and e < best_e):
            best_e = e
            best_valid = valid
            best[:, :] = B
    return best, best_e, state


# --- coupling scale ----------------------------------------------------------


def auto_c0(a0: float, sum_j2: float, sum_h2: float, n_vars: int) -> float:
    """c0 = a0 / (2 sqrt(mean(J'^2) n')) with the ancilla folded into J'.

    J' is the (n+1) x (n+1) coupling matrix whose extra row/column holds the
    local fields; ``sum_j2`` is the sum of J^2 over ordered off-diagonal
    entries.
    """
    n_aug = n_vars + 1
    total = sum_j2 + 2.0 * sum_h2
    if total == 0:
        return a0
    mean = total / (n_aug * (n_aug - 1))
    return a0 / (2.0 * math.sqrt(mean * n_aug))


def penalty_top_eigenvalue(n_nodes: int) -> float:
    """Largest eigenvalue of J for the unit-weight penalty without tabu."""
    return 1.5 * n_nodes - 2.5


def solver_penalty_weight(w: np.ndarray, scale: float = 1.5) -> float:
    """Penalty weight sized to the graph for the SB dynamics: scale * max|w|.

    Much smaller than the dominance bound of ``default_penalty_weight``;
    validity is then enforced by the reduction and by verification.
    """
    top = float(np.abs(w).max()) if w.size else 0.0
    return scale * top if top > 0 else 1.0


def resolve_a0(problem: IsingModel | QuboProblem, params: SbParams) -> float:
    if params.a0 is not None:
        return params.a0
    if isinstance(problem, QuboProblem):
        return params.a0_scale * problem.n_nodes**-0.75
    return 1.0


def resolve_c0(problem: IsingModel | QuboProblem, params: SbParams) -> float:
    if params.c0 is not None:
        return params.c0
    a0 = resolve_a0(problem, params)
    if isinstance(problem, QuboProblem):
        return params.c0_gain / (a0 * problem.m_p * penalty_top_eigenvalue(problem.n_nodes))
    J = problem.J
    return auto_c0(a0, float((J * J).sum()), float(problem.h @ problem.h), problem.n)


# --- public solver API -------------------------------------------------------


def _n_vars(problem: IsingModel | QuboProblem) -> int:
    return problem.n_vars if isinstance(problem, QuboProblem) else problem.n


def sb_evolve(
    problem: IsingModel | QuboProblem, params: SbParams, initial: SbState
) -> tuple[SbState, np.ndarray]:
    """Integrate ``params.n_steps`` steps from ``initial``.

    Returns the final state and the per-step maximum |x|.
    """
    n = _n_vars(problem)
    if n > params.machine_size:
        raise ValueError(f"{n} variables exceed machine size {params.machine_size}")
    if initial.x.shape != (n,) or initial.y.shape != (n,):
        raise ValueError(f"initial state must have {n} oscillators")
    x = initial.x.astype(np.float32, copy=True)
    y = initial.y.astype(np.float32, copy=True)
    peaks = np.empty(params.n_steps)
    a0 = resolve_a0(problem, params)
    c0 = resolve_c0(problem, params)
    if isinstance(problem, QuboProblem):
        _run_structured(
            problem.graph.w, problem.tabu, problem.m_c, problem.m_p,
            x, y, params.n_steps, params.dt, a0, c0, peaks,
        )
    else:
        _run_dense(
            np.ascontiguousarray(problem.J, dtype=np.float64),
            np.ascontiguousarray(problem.h, dtype=np.float64),
            x, y, params.n_steps, params.dt, a0, c0, peaks,
        )
    return SbState(x, y, initial.step + params.n_steps), peaks


def decode_signs(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) >= 0).astype(np.int64)


def sb_run(problem: IsingModel | QuboProblem, params: SbParams, initial: SbState) -> np.ndarray:
    """One SB run; binary assignment as an (N+1)x(N+1) matrix for a QUBO
    problem, or a flat vector for a bare Ising model."""
    final, _ = sb_evolve(problem, params, initial)
    bits = decode_signs(final.x)
    if isinstance(problem, QuboProblem):
        return from_flat(bits, problem.n_nodes)
    return bits


def solve_best_of(
    problem: QuboProblem, params: SbParams, rng: XorshiftRng, restarts: int
) -> tuple[np.ndarray, float]:
    """Best assignment over ``restarts`` runs.

    Assignments that form a single cycle through the dummy node (and avoid
    the tabu pairs) win over all others; within each class the lowest
    eval_total wins, earliest restart on ties.

    Each restart consumes n_vars draws from ``rng``; the result depends only
    on the problem, the parameters, the rng state and ``restarts``.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    n = problem.n_vars
    if n > params.machine_size:
        raise ValueError(f"{n} variables exceed machine size {params.machine_size}")
    a0 = resolve_a0(problem, params)
    c0 = resolve_c0(problem, params)
    x, energy, rng.state = _best_of_structured(
        problem.graph.w, problem.tabu, problem.m_c, problem.m_p,
        params.n_steps, params.dt, a0, c0, rng.state, restarts, INIT_SPREAD,
    )
    return x, float(energy)
