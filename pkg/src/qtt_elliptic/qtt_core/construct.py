"""Closed-form QTT representations of structured vectors and matrices.

Each builder writes the cores of a small finite automaton (or a rank-r
recurrence) directly, so ranks are known a priori and nothing of size
``2**L`` is ever allocated.  Grids are affine in the 0-based index:
``x_i = offset + step * i`` for ``i = 0 .. 2**L - 1``.
"""

from __future__ import annotations

from math import comb

import numpy as np

from .tensor import QttMatrix, QttVector, Tol, add, cls_round, diag, hadamard, outer, scale


def _check_level(L: int):
    if L < 1:
        raise ValueError(f"level must be >= 1, got {L}")


def ones(L: int) -> QttVector:
    _check_level(L)
    return QttVector([np.ones((1, 2, 1)) for _ in range(L)])


def constant(L: int, value: float) -> QttVector:
    return scale(ones(L), value)


def zeros(L: int) -> QttVector:
    return scale(ones(L), 0.0)


def unit_vector(L: int, index: int) -> QttVector:
    """Indicator of the 0-based grid index ``index``."""
    _check_level(L)
    if not 0 <= index < 2 ** L:
        raise IndexError(index)
    cores = []
    for _ in range(L):
        c = np.zeros((1, 2, 1))
        c[0, index & 1, 0] = 1.0
        cores.append(c)
        index >>= 1
    return QttVector(cores)


def identity(L: int) -> QttMatrix:
    _check_level(L)
    return QttMatrix([np.eye(2).reshape(1, 2, 2, 1) for _ in range(L)])


def ones_matrix(L: int) -> QttMatrix:
    _check_level(L)
    return QttMatrix([np.ones((1, 2, 2, 1)) for _ in range(L)])


def _automaton_cores(L: int, step, start, accept, nstates: int, ndigit_axes: int):
    """Cores of a deterministic automaton read from the least significant digit.

    ``step(state, digits) -> state | None`` (None rejects); ``accept(state)``
    decides the final output.  ``digits`` is a tuple of one bit per axis.
    """
    shape_modes = (2,) * ndigit_axes
    cores = []
    for k in range(L):
        rin = 1 if k == 0 else nstates
        rout = 1 if k == L - 1 else nstates
        c = np.zeros((rin,) + shape_modes + (rout,))
        states_in = [start] if k == 0 else range(nstates)
        for a_idx, s in enumerate(states_in):
            for digits in np.ndindex(*shape_modes):
                t = step(s, digits)
                if t is None:
                    continue
                if k == L - 1:
                    if accept(t):
                        c[(a_idx,) + digits + (0,)] += 1.0
                else:
                    c[(a_idx,) + digits + (t,)] += 1.0
        cores.append(c)
    return cores


def shift_matrix(L: int) -> QttMatrix:
    """Upper shift ``S`` with ``S[i, i+1] = 1``: ``(S x)_i = x_{i+1}``.

    Rank 2 (the carry of ``i + 1``).
    """
    _check_level(L)

    def step(carry, d):
        i, j = d
        s = i + carry
        if s % 2 != j:
            return None
        return s // 2

    return QttMatrix(_automaton_cores(L, step, 1, lambda c: c == 0, 2, 2))


def upper_mask(L: int, strict: bool = False) -> QttMatrix:
    """Indicator matrix of ``i <= j`` (``i < j`` when strict); rank 2."""
    _check_level(L)

    # state 1: lower digits of i compare <= (or <) lower digits of j
    def step(le, d):
        i, j = d
        if i < j:
            return 1
        if i > j:
            return 0
        return le

    start = 0 if strict else 1
    return QttMatrix(_automaton_cores(L, step, start, lambda s: s == 1, 2, 2))


def index_below(L: int, p: int) -> QttVector:
    """Indicator of 0-based indices ``i < p``; rank <= 2."""
    _check_level(L)
    n = 2 ** L
    if p <= 0:
        return zeros(L)
    if p >= n:
        return ones(L)
    bits = [(p >> k) & 1 for k in range(L)]
    cores = []
    for k in range(L):
        rin = 1 if k == 0 else 2
        rout = 1 if k == L - 1 else 2
        c = np.zeros((rin, 2, rout))
        # state 1: lower digits of i < lower digits of p
        states_in = [0] if k == 0 else (0, 1)
        for a_idx, s in enumerate(states_in):
            for j in (0, 1):
                t = 1 if j < bits[k] else (0 if j > bits[k] else s)
                if k == L - 1:
                    c[a_idx, j, 0] += float(t == 1)
                else:
                    c[a_idx, j, t] += 1.0
        cores.append(c)
    return QttVector(cores)


def step_function(L: int, thresholds, values, tol: Tol = 1e-14) -> QttVector:
    """Piecewise constant in the index: ``values[k]`` on ``thresholds[k-1] <= i < thresholds[k]``.

    ``thresholds`` has ``len(values) - 1`` increasing entries.
    """
    values = [float(v) for v in values]
    thresholds = [int(t) for t in thresholds]
    if len(thresholds) != len(values) - 1:
        raise ValueError("need len(values) - 1 thresholds")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be non-decreasing")
    acc = constant(L, values[-1])
    for t, lo, hi in zip(thresholds, values[:-1], values[1:]):
        if lo != hi:
            acc = add(acc, scale(index_below(L, t), lo - hi))
    return cls_round(acc, tol)


def affine(L: int, offset: float, step: float) -> QttVector:
    """``offset + step * i``; rank 2 (rank 1 when ``step == 0``)."""
    return polynomial(L, [offset, step], 0.0, 1.0) if step else constant(L, offset)


def polynomial(L: int, coeffs, offset: float, step: float) -> QttVector:
    """Samples of ``sum_m coeffs[m] * x**m`` at ``x_i = offset + step * i``.

    Exact rank ``<= deg + 1``: the state carries the powers of the partial sum
    of ``offset + step * sum_k j_k 2**(k-1)`` and each digit applies the
    binomial shift.
    """
    _check_level(L)
    coeffs = np.asarray(coeffs, dtype=float)
    M = len(coeffs) - 1
    if M < 0:
        raise ValueError("empty coefficient list")
    while M > 0 and coeffs[M] == 0.0:
        M -= 1
    coeffs = coeffs[: M + 1]
    if M == 0:
        return constant(L, coeffs[0])

    def shift(alpha):
        # row-vector convention: powers(y + alpha) = powers(y) @ T
        T = np.zeros((M + 1, M + 1))
        for p in range(M + 1):
            for q in range(p + 1):
                T[q, p] = comb(p, q) * alpha ** (p - q)
        return T

    start = np.array([offset ** p for p in range(M + 1)])[None, :]
    cores = []
    for k in range(L):
        w = step * 2.0 ** k
        mats = [shift(0.0), shift(w)]
        c = np.stack(mats, axis=1)  # (M+1, 2, M+1)
        if k == 0:
            c = np.einsum("ab,bjc->ajc", start, c)
        if k == L - 1:
            c = np.einsum("ajb,b->aj", c, coeffs)[..., None]
        cores.append(c)
    return QttVector(cores)


def sinusoid(L: int, omega: float, offset: float, step: float, phase: float = 0.0) -> QttVector:
    """Samples of ``sin(omega * x + phase)`` at ``x_i = offset + step * i``; rank 2.

    The state is ``(cos theta, sin theta)`` of the accumulated angle; each digit
    rotates it by ``omega * step * 2**(k-1) * j``.
    """
    _check_level(L)
    theta0 = omega * offset + phase
    cores = []
    for k in range(L):
        alphas = (0.0, omega * step * 2.0 ** k)
        if L == 1:
            c = np.array([np.sin(theta0 + a) for a in alphas]).reshape(1, 2, 1)
        elif k == 0:
            c = np.array([[np.cos(theta0 + a), np.sin(theta0 + a)] for a in alphas])[None, :, :]
        elif k == L - 1:
            c = np.stack([np.array([[np.sin(a)], [np.cos(a)]]) for a in alphas], axis=1)
        else:
            c = np.stack(
                [np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]]) for a in alphas], axis=1
            )
        cores.append(c)
    return QttVector(cores)


def cumulative_sum_matrix(L: int) -> QttMatrix:
    """Lower triangular ones (``i >= j``): ``(C x)_i = sum_{j <= i} x_j``."""
    return upper_mask(L).T


def green_matrix(left: QttVector, right: QttVector, scale_by: float, tol: Tol = 1e-14) -> QttMatrix:
    """``G[i, j] = scale_by * left[min(i,j)] * right[max(i,j)]``.

    Assembled from the rank-2 triangular masks and the outer products
    ``left right^T`` / ``right left^T``, then recompressed.
    """
    L = left.level
    up = upper_mask(L)
    low = up.T
    # i <= j: left_i right_j ; i > j: right_i left_j (strict lower = low - diagonal)
    strict_low = add(low, scale(diag(ones(L)), -1.0))
    G = add(hadamard(up, outer(left, right)), hadamard(strict_low, outer(right, left)))
    return cls_round(scale(G, scale_by), tol)

