"""Quantized tensor-train vectors and matrices over binary grids.

A vector of length ``2**L`` is stored as ``L`` cores of shape ``(r_{k-1}, 2, r_k)``.
Grid index ``i`` (0-based here) maps to binary digits ``j_1 .. j_L`` with
``i = sum_k j_k * 2**(k-1)``, i.e. the first core carries the least
significant bit.  Matrices use cores of shape ``(r_{k-1}, 2, 2, r_k)`` with
row digit on axis 1 and column digit on axis 2.

Everything here works core by core; dense ``2**L`` arrays only appear in
:func:`fold` and :func:`unfold`, which are guarded by :data:`DENSE_MAX_LEVEL`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

DENSE_MAX_LEVEL = 24


class LevelMismatchError(ValueError):
    pass


class DenseGuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class TruncationTolerance:
    """Relative Euclidean accuracy ``delta`` with an optional hard rank cap."""

    delta: float = 0.0
    rmax: int | None = None

    def __post_init__(self):
        if not self.delta >= 0.0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        if self.rmax is not None and self.rmax < 1:
            raise ValueError(f"rmax must be >= 1, got {self.rmax}")


Tol = Union[float, TruncationTolerance, None]


def as_tolerance(tol: Tol) -> TruncationTolerance:
    if tol is None:
        return TruncationTolerance(0.0)
    if isinstance(tol, TruncationTolerance):
        return tol
    return TruncationTolerance(float(tol))


class _TT:
    """Shared storage for vector and matrix trains (flat mode view)."""

    _mode_shape: tuple[int, ...] = ()

    __slots__ = ("cores",)

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = tuple(np.asarray(c, dtype=float) for c in cores)
        if not cores:
            raise ValueError("a train needs at least one core")
        nd = 2 + len(self._mode_shape)
        for k, c in enumerate(cores):
            if c.ndim != nd or c.shape[1:-1] != self._mode_shape:
                raise ValueError(f"core {k} has shape {c.shape}, expected mode shape {self._mode_shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[-1] != 1:
            raise ValueError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[-1] != cores[k + 1].shape[0]:
                raise ValueError(f"rank mismatch between cores {k} and {k + 1}")
        if not all(np.isfinite(c).all() for c in cores):
            raise ValueError("cores must be finite")
        for c in cores:
            c.setflags(write=False)
        object.__setattr__(self, "cores", cores)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    @property
    def level(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[-1] for c in self.cores)

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    def _flat(self) -> list[np.ndarray]:
        n = int(np.prod(self._mode_shape))
        return [c.reshape(c.shape[0], n, c.shape[-1]) for c in self.cores]

    @classmethod
    def _from_flat(cls, cores):
        return cls([c.reshape((c.shape[0],) + cls._mode_shape + (c.shape[-1],)) for c in cores])

    def round(self, tol: Tol):
        return cls_round(self, tol)

    def __neg__(self):
        return scale(self, -1.0)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, alpha):
        if isinstance(alpha, _TT):
            return hadamard(self, alpha)
        return scale(self, alpha)

    __rmul__ = __mul__

    def __repr__(self):
        return f"{type(self).__name__}(level={self.level}, ranks={self.ranks})"


class QttVector(_TT):
    """Length ``2**L`` vector in QTT format."""

    _mode_shape = (2,)
    __slots__ = ()

    @property
    def size(self) -> int:
        return 2 ** self.level

    def entry(self, index: int) -> float:
        """Value at 0-based grid index, in O(L r^2)."""
        if not 0 <= index < self.size:
            raise IndexError(index)
        row = np.ones((1,))
        for c in self.cores:
            row = row @ c[:, index & 1, :]
            index >>= 1
        return float(row[0])


class QttMatrix(_TT):
    """``2**L x 2**L`` operator in QTT format."""

    _mode_shape = (2, 2)
    __slots__ = ()

    @property
    def size(self) -> int:
        return 2 ** self.level

    def __matmul__(self, other):
        if isinstance(other, QttVector):
            return matvec(self, other)
        if isinstance(other, QttMatrix):
            return matmul(self, other)
        return NotImplemented

    @property
    def T(self) -> "QttMatrix":
        return QttMatrix([c.transpose(0, 2, 1, 3) for c in self.cores])


def _check_levels(*xs):
    levels = {x.level for x in xs}
    if len(levels) != 1:
        raise LevelMismatchError(f"level mismatch: {sorted(levels)}")


def _check_same_kind(x, y):
    if type(x) is not type(y):
        raise TypeError(f"cannot combine {type(x).__name__} with {type(y).__name__}")
    _check_levels(x, y)


# ----------------------------------------------------------------------------
# dense conversion


def _level_of_length(n: int) -> int:
    if n < 2 or n & (n - 1):
        raise ValueError(f"length {n} is not a power of two >= 2")
    return n.bit_length() - 1


def _guard(level: int):
    if level > DENSE_MAX_LEVEL:
        raise DenseGuardError(f"refusing dense materialization at L={level} (limit {DENSE_MAX_LEVEL})")


def fold(dense, tol: Tol = 0.0) -> QttVector:
    """TT-SVD of a length ``2**L`` vector.

    With ``tol.delta > 0`` each of the ``L-1`` truncations discards at most
    ``delta * ||v|| / sqrt(L-1)``, so the total relative error is at most delta.
    """
    v = np.asarray(dense, dtype=float).ravel()
    L = _level_of_length(v.size)
    _guard(L)
    return QttVector(_fold_base(v, 2, L, as_tolerance(tol)))


def fold_matrix(dense, tol: Tol = 0.0) -> QttMatrix:
    """Matrix analogue of :func:`fold` (rows and columns share the level)."""
    m = np.asarray(dense, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    L = _level_of_length(m.shape[0])
    _guard(2 * L)
    # F-reshape gives axes (i_1..i_L, j_1..j_L); base-4 digit k is 2*i_k + j_k
    t = m.reshape([2] * (2 * L), order="F")
    perm = [a for k in range(L) for a in (L + k, k)]
    t = t.transpose(perm)
    flat = t.reshape(-1, order="F")
    tol = as_tolerance(tol)
    # reuse the vector TT-SVD on base-4 digits
    x = _fold_base(flat, 4, L, tol)
    return QttMatrix._from_flat(x)


def _fold_base(v, n, L, tol: TruncationTolerance):
    eps = tol.delta * np.linalg.norm(v) / math.sqrt(max(L - 1, 1))
    if L == 1:
        return [v.reshape(1, n, 1)]
    cores = []
    rest = v.reshape(-1, n).T.copy()
    r = 1
    for k in range(L - 1):
        u, s, vt = np.linalg.svd(rest, full_matrices=False)
        rk = _chop(s, eps, tol.rmax)
        cores.append(u[:, :rk].reshape(r, n, rk))
        rest = s[:rk, None] * vt[:rk]
        r = rk
        if k < L - 2:
            rest = rest.reshape(r, -1, n).transpose(0, 2, 1).reshape(n * r, -1)
    cores.append(rest.reshape(r, n, 1))
    return cores


def unfold(x: QttVector | QttMatrix) -> np.ndarray:
    """Dense vector (or matrix) of a train; inverse of :func:`fold`."""
    if isinstance(x, QttMatrix):
        _guard(2 * x.level)
        flat = _unfold_flat(x._flat())
        L = x.level
        t = flat.reshape([2] * (2 * L), order="F")
        # axes are (j_1, i_1, j_2, i_2, ...)
        perm = [2 * k + 1 for k in range(L)] + [2 * k for k in range(L)]
        t = t.transpose(perm)
        return t.reshape(2 ** L, 2 ** L, order="F")
    _guard(x.level)
    return _unfold_flat(x._flat())


def _unfold_flat(cores) -> np.ndarray:
    res = cores[0].reshape(cores[0].shape[1], cores[0].shape[2])
    for c in cores[1:]:
        m = res.shape[0]
        r, n, r2 = c.shape
        res = (res @ c.reshape(r, n * r2)).reshape(m, n, r2)
        res = res.transpose(1, 0, 2).reshape(n * m, r2)
    return res[:, 0]


# ----------------------------------------------------------------------------
# rounding


def _chop(s: np.ndarray, eps: float, rmax: int | None = None) -> int:
    """Smallest rank whose discarded singular-value tail has norm <= eps."""
    if s.size == 0:
        return 1
    tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]  # tail[r] = ||s[r:]||
    keep = s.size
    if eps > 0:
        ok = np.nonzero(tail <= eps)[0]
        if ok.size:
            keep = int(ok[0])
    keep = max(keep, 1)
    if rmax is not None:
        keep = min(keep, rmax)
    return keep


def _orthogonalize_right(cores: list[np.ndarray]) -> list[np.ndarray]:
    """Right-orthogonalize cores 2..L; the norm ends up in the first core."""
    cores = list(cores)
    for k in range(len(cores) - 1, 0, -1):
        r, n, r2 = cores[k].shape
        q, R = np.linalg.qr(cores[k].reshape(r, n * r2).T)
        cores[k] = q.T.reshape(-1, n, r2)
        cores[k - 1] = np.tensordot(cores[k - 1], R.T, axes=(2, 0))
    return cores


def _round_flat(cores: list[np.ndarray], tol: TruncationTolerance) -> list[np.ndarray]:
    L = len(cores)
    cores = _orthogonalize_right(cores)
    if L == 1:
        return cores
    nrm = np.linalg.norm(cores[0])
    eps = tol.delta * nrm / math.sqrt(L - 1)
    for k in range(L - 1):
        r, n, r2 = cores[k].shape
        u, s, vt = np.linalg.svd(cores[k].reshape(r * n, r2), full_matrices=False)
        rk = _chop(s, eps, tol.rmax)
        cores[k] = u[:, :rk].reshape(r, n, rk)
        cores[k + 1] = np.tensordot(s[:rk, None] * vt[:rk], cores[k + 1], axes=(1, 0))
    return cores


def cls_round(x, tol: Tol):
    """``T_delta``: quasi-optimal recompression with ``||x' - x|| <= delta ||x||``."""
    tol = as_tolerance(tol)
    return type(x)._from_flat(_round_flat(x._flat(), tol))


round_qtt = cls_round


# ----------------------------------------------------------------------------
# exact arithmetic


def scale(x, alpha: float):
    cores = list(x.cores)
    cores[0] = cores[0] * float(alpha)
    return type(x)(cores)


def add(x, y):
    """Exact sum; ranks add."""
    _check_same_kind(x, y)
    xs, ys = x._flat(), y._flat()
    L = len(xs)
    if L == 1:
        return type(x)._from_flat([xs[0] + ys[0]])
    out = []
    for k, (a, b) in enumerate(zip(xs, ys)):
        ra, n, ra2 = a.shape
        rb, _, rb2 = b.shape
        if k == 0:
            out.append(np.concatenate([a, b], axis=2))
        elif k == L - 1:
            out.append(np.concatenate([a, b], axis=0))
        else:
            c = np.zeros((ra + rb, n, ra2 + rb2))
            c[:ra, :, :ra2] = a
            c[ra:, :, ra2:] = b
            out.append(c)
    return type(x)._from_flat(out)


def linear_combination(terms: Sequence[tuple[float, _TT]]):
    """Exact ``sum(alpha_k * x_k)``; a convenience over repeated :func:`add`."""
    if not terms:
        raise ValueError("empty combination")
    alpha, acc = terms[0]
    acc = scale(acc, alpha)
    for alpha, x in terms[1:]:
        acc = add(acc, scale(x, alpha))
    return acc


def hadamard(x, y):
    """Entrywise product; ranks multiply."""
    _check_same_kind(x, y)
    out = []
    for a, b in zip(x._flat(), y._flat()):
        ra, n, ra2 = a.shape
        rb, _, rb2 = b.shape
        c = np.einsum("anc,bnd->abncd", a, b).reshape(ra * rb, n, ra2 * rb2)
        out.append(c)
    return type(x)._from_flat(out)


def inner(*xs) -> float:
    """``sum_i prod_k x_k[i]`` for trains of a common kind and level.

    Contracts core by core without forming the Hadamard product.
    """
    if not xs:
        raise ValueError("need at least one train")
    for y in xs[1:]:
        _check_same_kind(xs[0], y)
    flats = [x._flat() for x in xs]
    # state holds the left interface, axes (r_1, ..., r_m); absorb one factor at a time
    state = np.ones((1,) * len(xs))
    for k in range(len(flats[0])):
        cores = [f[k] for f in flats]
        n = cores[0].shape[1]
        y = state.reshape(cores[0].shape[0], -1)
        y = np.einsum("ar,anb->rnb", y, cores[0])  # (rest, n, B)
        for c in cores[1:]:
            rest, B = y.shape[0] // c.shape[0], y.shape[-1]
            y = y.reshape(c.shape[0], rest, n, B)
            y = np.einsum("arnB,anb->rnBb", y, c).reshape(rest, n, B * c.shape[-1])
        state = y.sum(axis=1).reshape([c.shape[-1] for c in cores])
    return float(state.reshape(-1)[0])


def dot(x, y) -> float:
    return inner(x, y)


def norm2(x) -> float:
    """Euclidean (Frobenius) norm, via orthogonalization for accuracy near zero."""
    cores = _orthogonalize_right(x._flat())
    return float(np.linalg.norm(cores[0]))


def matvec(A: QttMatrix, x: QttVector, tol: Tol = None) -> QttVector:
    """``A @ x``; exact when ``tol`` is None, otherwise rounded at ``tol``."""
    if not isinstance(A, QttMatrix) or not isinstance(x, QttVector):
        raise TypeError("matvec expects (QttMatrix, QttVector)")
    _check_levels(A, x)
    out = []
    for a, b in zip(A.cores, x.cores):
        ra, _, _, ra2 = a.shape
        rb, _, rb2 = b.shape
        c = np.einsum("aijc,bjd->abicd", a, b).reshape(ra * rb, 2, ra2 * rb2)
        out.append(c)
    y = QttVector(out)
    return y if tol is None else cls_round(y, tol)


def matmul(A: QttMatrix, B: QttMatrix, tol: Tol = None) -> QttMatrix:
    _check_same_kind(A, B)
    out = []
    for a, b in zip(A.cores, B.cores):
        ra, _, _, ra2 = a.shape
        rb, _, _, rb2 = b.shape
        c = np.einsum("aijc,bjkd->abikcd", a, b).reshape(ra * rb, 2, 2, ra2 * rb2)
        out.append(c)
    C = QttMatrix(out)
    return C if tol is None else cls_round(C, tol)


def diag(x: QttVector) -> QttMatrix:
    """Diagonal matrix with the ranks of ``x``."""
    eye = np.eye(2)
    return QttMatrix([np.einsum("aib,ij->aijb", c, eye) for c in x.cores])


def diagonal(A: QttMatrix) -> QttVector:
    return QttVector([np.einsum("aiib->aib", c) for c in A.cores])


def outer(x: QttVector, y: QttVector) -> QttMatrix:
    """Matrix ``x y^T`` with ranks ``r(x) * r(y)``."""
    _check_levels(x, y)
    out = []
    for a, b in zip(x.cores, y.cores):
        ra, _, ra2 = a.shape
        rb, _, rb2 = b.shape
        out.append(np.einsum("aic,bjd->abijcd", a, b).reshape(ra * rb, 2, 2, ra2 * rb2))
    return QttMatrix(out)


def average_rank(x) -> float:
    """Arithmetic mean of the internal ranks ``r_1 .. r_{L-1}``."""
    if x.level == 1:
        return 1.0
    inner_ranks = x.ranks[1:-1]
    return float(sum(inner_ranks)) / len(inner_ranks)


def storage(x) -> int:
    """Number of stored floats."""
    return int(sum(c.size for c in x.cores))
