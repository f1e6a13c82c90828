"""Piecewise-linear Galerkin discretization of ``-(a u')' = f`` on (0, 1).

Grid: ``N = 2**L`` interior nodes ``x_i = i h``, ``h = 1 / (N + 1)``, hence
``N + 1`` elements.  The coefficient is frozen at element midpoints
``x_{i-1/2}`` for ``i = 1 .. N``; the last element ``[x_N, 1]`` reuses
``a_N``, which gives the ``2 a_N`` corner entry of the stiffness matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import qtt_core as qc
from .qtt_core import QttMatrix, QttVector, Tol

TWO_PI = 2.0 * math.pi

# Dense sampling is only used for positivity scans and non-closed-form classes.
SCAN_MAX_LEVEL = 12

# Assembly is exact up to this relative recompression floor.
EXACT_FLOOR = 1e-14


class EllipticityError(ValueError):
    """Coefficient is not strictly positive."""


@dataclass(frozen=True)
class Grid:
    level: int

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level must be >= 1")

    @property
    def N(self) -> int:
        return 2 ** self.level

    @property
    def h(self) -> float:
        return 1.0 / (self.N + 1)

    def nodes(self) -> np.ndarray:
        """Interior nodes ``x_1 .. x_N`` (dense; small levels only)."""
        qc.tensor._guard(self.level)
        return np.arange(1, self.N + 1) * self.h

    def midpoints(self) -> np.ndarray:
        qc.tensor._guard(self.level)
        return (np.arange(1, self.N + 1) - 0.5) * self.h

    def midpoint_index_count(self, x: float) -> int:
        """Number of midpoints strictly left of ``x``."""
        return int(min(max(math.ceil(x * (self.N + 1) - 0.5), 0), self.N))


def sin_range(p0: float, p1: float) -> tuple[float, float]:
    """Exact (min, max) of ``sin`` over the phase interval ``[p0, p1]``."""
    if p1 < p0:
        p0, p1 = p1, p0
    if p1 - p0 >= TWO_PI:
        return -1.0, 1.0
    vals = [math.sin(p0), math.sin(p1)]
    lo, hi = min(vals), max(vals)
    # crests at pi/2 + 2 pi n, troughs at 3 pi/2 + 2 pi n
    n = math.ceil((p0 - math.pi / 2) / TWO_PI)
    if math.pi / 2 + TWO_PI * n <= p1:
        hi = 1.0
    n = math.ceil((p0 - 1.5 * math.pi) / TWO_PI)
    if 1.5 * math.pi + TWO_PI * n <= p1:
        lo = -1.0
    return lo, hi


@dataclass(frozen=True)
class CoefficientSpec:
    """``a(x) = C + g(x) sin(omega x**m)`` with a step modulator ``g``.

    ``steps`` lists ``(right_breakpoint, value)`` pairs; the last breakpoint
    must be >= 1.  Kinds: ``constant``, ``periodic`` (``m = 1``, ``g = 1``),
    ``modulated`` (``m = 1``), ``exotic`` (``m >= 2``), ``piecewise_constant``
    (``a = g``) and ``custom`` (midpoint samples).
    """

    kind: str
    C: float = 0.0
    omega: float = 0.0
    m: int = 1
    steps: tuple[tuple[float, float], ...] = ((1.0, 1.0),)
    samples: tuple[float, ...] | None = field(default=None, repr=False)

    KINDS = ("constant", "periodic", "modulated", "exotic", "piecewise_constant", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "custom":
            if not self.samples:
                raise ValueError("custom coefficient needs samples")
            return
        if self.m < 1:
            raise ValueError("exponent m must be >= 1")
        bps = [b for b, _ in self.steps]
        if not bps or any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])) or bps[-1] < 1.0 or bps[0] <= 0.0:
            raise ValueError(f"step breakpoints must increase within (0, 1] and end at >= 1: {bps}")
        if self.kind != "constant" and any(v <= 0 for _, v in self.steps):
            raise ValueError("step values must be positive")

    # ------------------------------------------------------------------ builders
    @classmethod
    def constant(cls, C: float) -> "CoefficientSpec":
        return cls("constant", C=float(C))

    @classmethod
    def periodic(cls, C: float = 2.0, K: float | None = 64, omega: float | None = None) -> "CoefficientSpec":
        return cls("periodic", C=float(C), omega=_omega(K, omega))

    @classmethod
    def modulated(cls, C: float = 2.0, K: float | None = 64, steps=None, omega: float | None = None):
        steps = DEFAULT_FOUR_STEPS if steps is None else steps
        return cls("modulated", C=float(C), omega=_omega(K, omega), steps=_steps(steps))

    @classmethod
    def exotic(cls, C: float = 2.0, K: float | None = 64, m: int = 3, steps=None, omega: float | None = None):
        steps = ((1.0, 1.0),) if steps is None else steps
        return cls("exotic", C=float(C), omega=_omega(K, omega), m=int(m), steps=_steps(steps))

    @classmethod
    def piecewise_constant(cls, steps) -> "CoefficientSpec":
        return cls("piecewise_constant", steps=_steps(steps))

    @classmethod
    def custom(cls, samples: Sequence[float]) -> "CoefficientSpec":
        return cls("custom", samples=tuple(float(s) for s in samples))

    # ------------------------------------------------------------------ queries
    @property
    def oscillates(self) -> bool:
        return self.kind in ("periodic", "modulated", "exotic")

    @property
    def period(self) -> float | None:
        """Spatial period for the strictly periodic classes."""
        if self.kind == "periodic":
            return TWO_PI / self.omega
        return None

    def modulator(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        bps = np.array([b for b, _ in self.steps])
        vals = np.array([v for _, v in self.steps])
        idx = np.searchsorted(bps, x, side="right")
        return vals[np.minimum(idx, len(vals) - 1)]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full_like(x, self.C)
        if self.kind == "piecewise_constant":
            return self.modulator(x)
        if self.kind == "custom":
            s = np.asarray(self.samples)
            n = s.size
            idx = np.clip(np.floor(x * (n + 1)).astype(int), 0, n - 1)
            return s[idx]
        return self.C + self.modulator(x) * np.sin(self.omega * x ** self.m)

    def intervals(self) -> list[tuple[float, float, float]]:
        """``(lo, hi, g)`` pieces of ``[0, 1]`` with constant modulator."""
        out, lo = [], 0.0
        for b, v in self.steps:
            hi = min(b, 1.0)
            if hi > lo:
                out.append((lo, hi, v))
            lo = hi
        return out

    def bounds(self, lo: float = 0.0, hi: float = 1.0) -> tuple[float, float]:
        """Analytic (inf, sup) of ``a`` over ``[lo, hi]``."""
        if self.kind == "constant":
            return self.C, self.C
        if self.kind == "custom":
            s = np.asarray(self.samples)
            return float(s.min()), float(s.max())
        mins, maxs = [], []
        for a, b, g in self.intervals():
            a, b = max(a, lo), min(b, hi)
            if b < a or (b == a and not (a == lo == hi)):
                continue
            if self.kind == "piecewise_constant":
                mins.append(g)
                maxs.append(g)
                continue
            s_lo, s_hi = sin_range(self.omega * a ** self.m, self.omega * b ** self.m)
            mins.append(self.C + g * s_lo)
            maxs.append(self.C + g * s_hi)
        return min(mins), max(maxs)

    def mean(self) -> float:
        """``integral_0^1 a dx`` (closed form for ``m = 1``, phase-split quadrature otherwise)."""
        if self.kind == "constant":
            return self.C
        if self.kind == "custom":
            s = np.asarray(self.samples)
            n = s.size
            return float((s.sum() + s[-1]) / (n + 1))
        total = 0.0
        for a, b, g in self.intervals():
            if self.kind == "piecewise_constant":
                total += g * (b - a)
                continue
            total += self.C * (b - a) + g * _sin_power_integral(self.omega, self.m, a, b)
        return total

    def harmonic_mean(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """``((1/(hi-lo)) integral 1/a)^-1`` over ``[lo, hi]``."""
        from scipy.integrate import quad

        if self.kind == "constant":
            return self.C
        total = 0.0
        for a, b, g in self.intervals():
            a, b = max(a, lo), min(b, hi)
            if b <= a:
                continue
            if self.kind == "piecewise_constant":
                total += (b - a) / g
                continue
            for p, q in _phase_panels(self.omega, self.m, a, b):
                val, _ = quad(lambda x: 1.0 / (self.C + g * math.sin(self.omega * x ** self.m)), p, q, limit=200)
                total += val
        return (hi - lo) / total


DEFAULT_FOUR_STEPS = ((0.25, 0.5), (0.5, 1.0), (0.75, 1.25), (1.0, 0.75))


def _omega(K, omega):
    if omega is not None:
        return float(omega)
    if K is None:
        raise ValueError("give K or omega")
    return TWO_PI * float(K)


def _steps(steps) -> tuple[tuple[float, float], ...]:
    return tuple((float(b), float(v)) for b, v in steps)


def _phase_panels(omega: float, m: int, a: float, b: float):
    """Split ``[a, b]`` where ``omega x**m`` crosses multiples of pi."""
    if omega == 0:
        return [(a, b)]
    n0 = math.floor(omega * a ** m / math.pi) + 1
    n1 = math.ceil(omega * b ** m / math.pi)
    cuts = [a] + [(n * math.pi / omega) ** (1.0 / m) for n in range(n0, n1)] + [b]
    cuts = sorted(c for c in cuts if a <= c <= b)
    return [(p, q) for p, q in zip(cuts, cuts[1:]) if q > p]


def _sin_power_integral(omega: float, m: int, a: float, b: float) -> float:
    if omega == 0:
        return 0.0
    if m == 1:
        return (math.cos(omega * a) - math.cos(omega * b)) / omega
    from scipy.integrate import quad

    total = 0.0
    for p, q in _phase_panels(omega, m, a, b):
        val, _ = quad(lambda x: math.sin(omega * x ** m), p, q, limit=200)
        total += val
    return total


# ---------------------------------------------------------------------------
# loads


@dataclass(frozen=True)
class LoadSpec:
    """Right-hand side ``f``: polynomial, ``amplitude * sin(k x + phase)`` or a callable."""

    kind: str = "constant"
    coeffs: tuple[float, ...] = (1.0,)
    amplitude: float = 1.0
    k: float = TWO_PI
    phase: float = 0.0
    func: Callable | None = field(default=None, compare=False, repr=False)

    KINDS = ("constant", "polynomial", "sine", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown load kind {self.kind!r}")
        if self.kind == "sine" and self.k == 0:
            raise ValueError("sine load needs k != 0")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom load needs func")

    @classmethod
    def constant(cls, value: float = 1.0) -> "LoadSpec":
        return cls("constant", coeffs=(float(value),))

    @classmethod
    def polynomial(cls, coeffs) -> "LoadSpec":
        return cls("polynomial", coeffs=tuple(float(c) for c in coeffs))

    @classmethod
    def sine(cls, amplitude: float = 1.0, k: float = TWO_PI, phase: float = 0.0) -> "LoadSpec":
        return cls("sine", amplitude=float(amplitude), k=float(k), phase=float(phase))

    @classmethod
    def custom(cls, func: Callable) -> "LoadSpec":
        return cls("custom", func=func)

    @classmethod
    def from_nodal_samples(cls, samples) -> "LoadSpec":
        """Piecewise-linear interpolant of values at ``x_1 .. x_N``."""
        s = np.asarray(samples, dtype=float)
        xs = np.arange(1, s.size + 1) / (s.size + 1)
        return cls.custom(lambda x: np.interp(x, xs, s))

    @property
    def is_polynomial(self) -> bool:
        return self.kind in ("constant", "polynomial")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_polynomial:
            return np.polynomial.polynomial.polyval(x, self.coeffs)
        if self.kind == "sine":
            return self.amplitude * np.sin(self.k * x + self.phase)
        return np.asarray(self.func(x), dtype=float)

    def antiderivative_coeffs(self) -> np.ndarray:
        return np.polynomial.polynomial.polyint(self.coeffs)

    def antiderivative(self, x) -> np.ndarray:
        """``g(x) = integral_0^x f``."""
        x = np.asarray(x, dtype=float)
        if self.is_polynomial:
            return np.polynomial.polynomial.polyval(x, self.antiderivative_coeffs())
        if self.kind == "sine":
            return self.amplitude * (math.cos(self.phase) - np.cos(self.k * x + self.phase)) / self.k
        return _numeric_antiderivative(self, x)

    # QTT samplers on affine grids x_t = offset + step * t
    def sample_qtt(self, L: int, offset: float, step: float) -> QttVector:
        if self.is_polynomial:
            return qc.polynomial(L, self.coeffs, offset, step)
        if self.kind == "sine":
            return qc.scale(qc.sinusoid(L, self.k, offset, step, self.phase), self.amplitude)
        return qc.fold(self(offset + step * np.arange(2 ** L)))

    def antiderivative_qtt(self, L: int, offset: float, step: float) -> QttVector:
        if self.is_polynomial:
            return qc.polynomial(L, self.antiderivative_coeffs(), offset, step)
        if self.kind == "sine":
            c = qc.constant(L, self.amplitude * math.cos(self.phase) / self.k)
            wave = qc.sinusoid(L, self.k, offset, step, self.phase + math.pi / 2)
            return qc.round_qtt(qc.add(c, qc.scale(wave, -self.amplitude / self.k)), EXACT_FLOOR)
        return qc.fold(self.antiderivative(offset + step * np.arange(2 ** L)))


_GL2 = np.polynomial.legendre.leggauss(2)


def _numeric_antiderivative(load: LoadSpec, x: np.ndarray, panels: int = 2 ** 14) -> np.ndarray:
    """Composite 4-point Gauss on a fixed partition plus a partial last panel."""
    t, w = np.polynomial.legendre.leggauss(4)
    edges = np.linspace(0.0, 1.0, panels + 1)
    hp = 1.0 / panels
    pts = edges[:-1, None] + 0.5 * hp * (t[None, :] + 1.0)
    panel_int = 0.5 * hp * (load(pts) @ w)
    cum = np.concatenate([[0.0], np.cumsum(panel_int)])
    x = np.clip(x, 0.0, 1.0)
    k = np.minimum((x * panels).astype(int), panels - 1)
    a = edges[k]
    half = 0.5 * (x - a)
    part = half * (load(a[..., None] + half[..., None] * (t + 1.0)) @ w)
    return cum[k] + part


# ---------------------------------------------------------------------------
# sampling and assembly


def sample_coefficient(spec: CoefficientSpec, grid: Grid, tol: Tol = 1e-14) -> QttVector:
    """QTT vector of ``a(x_{i-1/2})``, ``i = 1 .. N``, recompressed at ``tol``."""
    L, h = grid.level, grid.h
    tol = qc.as_tolerance(tol)
    tol = qc.TruncationTolerance(max(tol.delta, EXACT_FLOOR), tol.rmax)
    if spec.kind == "custom":
        s = np.asarray(spec.samples, dtype=float)
        if s.size != grid.N:
            raise ValueError(f"custom samples have length {s.size}, grid needs {grid.N}")
        if s.min() <= 0:
            raise EllipticityError("custom coefficient has non-positive samples")
        return qc.fold(s, tol)
    if spec.kind == "constant":
        if spec.C <= 0:
            raise EllipticityError(f"constant coefficient {spec.C} is not positive")
        return qc.constant(L, spec.C)

    g = modulator_qtt(spec, grid)
    if spec.kind == "piecewise_constant":
        a = g
    else:
        if spec.m == 1:
            wave = qc.sinusoid(L, spec.omega, 0.5 * h, h)
        else:
            # no closed-form low-rank cores for sin(omega x^m); fold the samples
            wave = qc.fold(np.sin(spec.omega * grid.midpoints() ** spec.m), qc.TruncationTolerance(tol.delta / 4))
        a = qc.add(qc.constant(L, spec.C), qc.hadamard(g, wave))
    a = qc.round_qtt(a, tol)
    _check_positive(spec, grid, a)
    return a


def modulator_qtt(spec: CoefficientSpec, grid: Grid) -> QttVector:
    thresholds = [grid.midpoint_index_count(b) for b, _ in spec.steps[:-1]]
    return qc.step_function(grid.level, thresholds, [v for _, v in spec.steps])


def _check_positive(spec: CoefficientSpec, grid: Grid, a: QttVector):
    if grid.level <= SCAN_MAX_LEVEL:
        lo = float(qc.unfold(a).min())
    else:
        lo = spec.bounds()[0]
    if lo <= 0:
        raise EllipticityError(f"coefficient is not positive (min {lo:.3g})")


def stiffness_diagonals(a: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(sub, main, super) diagonals of the tridiagonal stiffness matrix."""
    a = np.asarray(a, dtype=float)
    ae = np.append(a, a[-1])
    main = (ae[:-1] + ae[1:]) / h
    off = -a[1:] / h
    return off.copy(), main, off


def assemble_stiffness_dense(a: np.ndarray, h: float) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size == 0 or np.any(a <= 0):
        raise EllipticityError("coefficient samples must be positive")
    lo, main, up = stiffness_diagonals(a, h)
    return np.diag(main) + np.diag(up, 1) + np.diag(lo, -1)


def thomas_solve(sub: np.ndarray, main: np.ndarray, sup: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Tridiagonal solve without pivoting (the matrices here are SPD)."""
    n = main.size
    c = np.empty(n - 1)
    d = np.empty(n)
    c_prev, d_prev, m_prev = 0.0, 0.0, 1.0
    b = np.asarray(rhs, dtype=float)
    for i in range(n):
        denom = main[i] - (sub[i - 1] * c_prev if i > 0 else 0.0)
        if i < n - 1:
            c[i] = sup[i] / denom
            c_prev = c[i]
        d[i] = (b[i] - (sub[i - 1] * d_prev if i > 0 else 0.0)) / denom
        d_prev = d[i]
    x = np.empty(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def clamped_shift(L: int) -> QttMatrix:
    """``I + S + e_N e_N^T``: maps ``a`` to ``a_i + a_{i+1}`` with ``a_{N+1} := a_N``; rank 3."""
    e = qc.unit_vector(L, 2 ** L - 1)
    M = qc.add(qc.add(qc.identity(L), qc.shift_matrix(L)), qc.diag(e))
    return qc.round_qtt(M, EXACT_FLOOR)


def assemble_stiffness_qtt(a: QttVector, h: float, tol: Tol = None) -> QttMatrix:
    """``(1/h) (diag((I + S')a) - S diag(a) - diag(a) S^T)``.

    Ranks are at most ``3r + 2r + 2r = 7r`` with ``r = r(a)``; with ``tol`` the
    result is recompressed.
    """
    L = a.level
    S = qc.shift_matrix(L)
    Da = qc.diag(a)
    main = qc.diag(qc.matvec(clamped_shift(L), a))
    A = qc.linear_combination([(1.0 / h, main), (-1.0 / h, qc.matmul(S, Da)), (-1.0 / h, qc.matmul(Da, S.T))])
    return A if tol is None else qc.round_qtt(A, tol)


def assemble_load(f: LoadSpec, grid: Grid, tol: Tol = 1e-14) -> QttVector:
    """``f_i = (f, phi_i)`` for the hat functions at ``x_1 .. x_N``.

    Exact for polynomial and sine loads; two-point Gauss per element otherwise.
    """
    L, h = grid.level, grid.h
    if f.is_polynomial:
        c = np.asarray(f.coeffs)
        q = np.zeros(len(c))
        # integral of (x_i + h t)^m (1 - |t|) dt over [-1, 1]; odd moments vanish
        for m, cm in enumerate(c):
            for p in range(0, m + 1, 2):
                q[m - p] += cm * math.comb(m, p) * h ** p * 2.0 / ((p + 1) * (p + 2))
        out = qc.polynomial(L, q * h, h, h)
    elif f.kind == "sine":
        kh = f.k * h
        factor = 2.0 * (1.0 - math.cos(kh)) / (kh * kh) if kh != 0 else 1.0
        out = qc.scale(qc.sinusoid(L, f.k, h, h, f.phase), f.amplitude * h * factor)
    else:
        x = grid.nodes()
        t, w = _GL2
        vals = np.zeros(grid.N)
        for side in (-1.0, 1.0):
            # element between x_i and x_i + side*h, hat decays linearly away from x_i
            s = 0.5 * (t + 1.0)
            pts = x[:, None] + side * h * s[None, :]
            vals += 0.5 * h * (f(pts) * (1.0 - s)[None, :]) @ w
        out = qc.fold(vals)
    return qc.round_qtt(out, tol)


def load_vector_dense(f: LoadSpec, grid: Grid) -> np.ndarray:
    return qc.unfold(assemble_load(f, grid, 0.0))


# ---------------------------------------------------------------------------
# preconditioner


def element_coefficient_qtt(a0, grid: Grid, tol: Tol = 1e-14) -> QttVector:
    if isinstance(a0, CoefficientSpec):
        return sample_coefficient(a0, grid, tol)
    a0 = float(a0)
    if a0 <= 0:
        raise EllipticityError(f"preconditioner coefficient {a0} is not positive")
    return qc.constant(grid.level, a0)


def _reciprocal_steps(a0, grid: Grid) -> QttVector:
    if isinstance(a0, CoefficientSpec):
        if a0.kind == "constant":
            return qc.constant(grid.level, 1.0 / a0.C)
        if a0.kind != "piecewise_constant":
            raise ValueError("the explicit inverse supports constant or piecewise-constant coefficients")
        thresholds = [grid.midpoint_index_count(b) for b, _ in a0.steps[:-1]]
        return qc.step_function(grid.level, thresholds, [1.0 / v for _, v in a0.steps])
    return qc.constant(grid.level, 1.0 / float(a0))


def inverse_preconditioner_qtt(a0, grid: Grid, tol: Tol = 1e-14) -> QttMatrix:
    """Exact inverse of the stiffness matrix for a constant or step coefficient.

    With ``P_i = h sum_{k<=i} 1/b_k`` and ``Q_j = P_{N+1} - P_j`` the discrete
    Green's function is ``P_min(i,j) Q_max(i,j) / P_{N+1}``; for constant
    ``b = a0`` this is ``(h/a0) min(i,j) (N+1-max(i,j)) / (N+1)``.
    """
    if not isinstance(a0, CoefficientSpec) and not float(a0) > 0:
        raise EllipticityError(f"preconditioner coefficient {a0} must be positive")
    L, h = grid.level, grid.h
    tol = qc.as_tolerance(tol)
    tol = qc.TruncationTolerance(max(tol.delta, EXACT_FLOOR), tol.rmax)
    if not isinstance(a0, CoefficientSpec) or a0.kind == "constant":
        c = float(a0.C if isinstance(a0, CoefficientSpec) else a0)
        P = qc.affine(L, h / c, h / c)
        total = 1.0 / c
    else:
        inv_b = _reciprocal_steps(a0, grid)
        P = qc.round_qtt(qc.scale(qc.matvec(qc.cumulative_sum_matrix(L), inv_b), h), EXACT_FLOOR)
        total = P.entry(grid.N - 1) + h * inv_b.entry(grid.N - 1)
    Q = qc.round_qtt(qc.add(qc.constant(L, total), qc.scale(P, -1.0)), EXACT_FLOOR)
    return qc.green_matrix(P, Q, 1.0 / total, tol)
