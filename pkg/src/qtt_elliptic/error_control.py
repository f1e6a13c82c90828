"""Guaranteed a posteriori bounds for the 1D model problem.

The model problem is ``-(a u')' = f`` on (0, 1) with zero boundary values
and ``a`` constant on each element (the midpoint samples used by the
Galerkin matrix; the last element reuses ``a_N``).  For this coefficient the
Galerkin system is exact, so every quantity below is an exact integral of a
piecewise polynomial, evaluated element by element in QTT format.

With ``g(x) = integral_0^x f`` the exact flux is ``a u' = c* - g``, and a
flux of the form ``y = rho (c - g)`` satisfies the equilibrium equation
``y' + rho f = 0`` exactly.  Integrals of ``g`` over an element are split
into the element mean ``gbar_e`` and the within-element variance
``V_e = integral_e (g - gbar_e)^2``, which keeps the small terms free of
cancellation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import qtt_core as qc
from .fem import CoefficientSpec, Grid, LoadSpec, element_coefficient_qtt, sample_coefficient
from .qtt_core import QttVector

log = logging.getLogger(__name__)

QUAD_POINTS = 4
_TOL = 1e-14
RECIPROCAL_TOL = 1e-13


def friedrichs_constant(*lengths: float) -> float:
    """``1 / (kappa pi)`` with ``kappa^2 = sum 1/l_s^2`` for a box with edges ``l_s``."""
    if not lengths:
        lengths = (1.0,)
    if any(not l > 0 for l in lengths):
        raise ValueError("edge lengths must be positive")
    kappa = math.sqrt(sum(1.0 / (l * l) for l in lengths))
    return 1.0 / (kappa * math.pi)


# ---------------------------------------------------------------------------
# element data


@dataclass(frozen=True)
class ElementField:
    """Element-wise constant positive field: ``values`` on elements ``1..N`` and the last one."""

    values: QttVector
    inverse: QttVector
    last: float

    @property
    def level(self) -> int:
        return self.values.level


def reciprocal(a: QttVector, lo: float, hi: float, tol: float = RECIPROCAL_TOL, max_iter: int = 60) -> QttVector:
    """Entrywise ``1 / a`` by the Newton iteration ``y <- y (2 - a y)``.

    ``lo, hi`` bound the entries of ``a``; the start ``2 / (lo + hi)`` makes
    ``|1 - a y|`` at most ``(hi - lo)/(hi + lo)`` and the error squares each step.
    """
    if not 0 < lo <= hi:
        raise ValueError("reciprocal needs 0 < lo <= hi")
    L = a.level
    y = qc.constant(L, 2.0 / (lo + hi))
    one = qc.ones(L)
    for _ in range(max_iter):
        ay = qc.round_qtt(qc.hadamard(a, y), tol)
        e = qc.round_qtt(qc.add(one, qc.scale(ay, -1.0)), tol)
        # y_new = y + y * e = y (2 - a y)
        y = qc.round_qtt(qc.add(y, qc.hadamard(y, e)), tol)
        if qc.norm2(e) <= 10 * tol * qc.norm2(one):
            break
    else:
        log.warning("reciprocal did not reach the requested accuracy")
    return y


def element_field(coef, grid: Grid, *, sampled: QttVector | None = None) -> ElementField:
    """Element field for a positive constant, a spec, or already-sampled QTT values."""
    L = grid.level
    if isinstance(coef, (int, float)):
        if not coef > 0:
            raise ValueError("coefficient must be positive")
        return ElementField(qc.constant(L, float(coef)), qc.constant(L, 1.0 / coef), float(coef))
    if isinstance(coef, ElementField):
        return coef
    if isinstance(coef, QttVector):
        sampled, spec = coef, None
    else:
        spec = coef
        if spec.kind == "constant":
            return element_field(spec.C, grid)
        sampled = sampled if sampled is not None else element_coefficient_qtt(spec, grid, 1e-14)
    last = sampled.entry(grid.N - 1)
    if spec is not None and spec.kind == "piecewise_constant":
        from .fem import _reciprocal_steps

        return ElementField(sampled, _reciprocal_steps(spec, grid), last)
    if spec is not None and spec.kind != "custom":
        lo, hi = spec.bounds()
    elif sampled.level <= 12:
        dense = qc.unfold(sampled)
        lo, hi = float(dense.min()), float(dense.max())
    else:
        raise ValueError("bounds of a bare QTT coefficient are unknown for large levels; pass the spec")
    return ElementField(sampled, reciprocal(sampled, lo, hi), last)


@dataclass(frozen=True)
class LoadMoments:
    """Element means and variances of ``g = integral_0^x f`` (Gauss-Legendre, exact to degree 7)."""

    gbar: QttVector
    var: QttVector
    gbar_last: float
    var_last: float
    load: LoadSpec | None


def load_moments(load: LoadSpec | None, grid: Grid) -> LoadMoments:
    L, h = grid.level, grid.h
    if load is None:
        z = qc.zeros(L)
        return LoadMoments(z, z, 0.0, 0.0, None)
    t, w = np.polynomial.legendre.leggauss(QUAD_POINTS)
    s = 0.5 * (t + 1.0)
    w = 0.5 * w
    samples = [load.antiderivative_qtt(L, h * sq, h) for sq in s]
    gbar = qc.round_qtt(qc.linear_combination(list(zip(w, samples))), _TOL)
    var = None
    for wq, gq in zip(w, samples):
        d = qc.round_qtt(qc.add(gq, qc.scale(gbar, -1.0)), _TOL)
        term = qc.scale(qc.hadamard(d, d), wq * h)
        var = term if var is None else qc.add(var, term)
    var = qc.round_qtt(var, _TOL)
    # last element [N h, 1]
    xq = grid.N * h + h * s
    gq = load.antiderivative(xq)
    gl = float(w @ gq)
    vl = float(h * (w @ (gq - gl) ** 2))
    return LoadMoments(gbar, var, gl, vl, load)


def slopes(v: QttVector, grid: Grid) -> tuple[QttVector, float]:
    """Element slopes of the piecewise-linear function with nodal values ``v``.

    Elements ``1..N`` as a QTT vector (``(v_e - v_{e-1}) / h``, ``v_0 = 0``) and
    the slope on the last element ``-v_N / h``.
    """
    S_down = qc.shift_matrix(v.level).T
    s = qc.scale(qc.add(v, qc.scale(qc.matvec(S_down, v), -1.0)), 1.0 / grid.h)
    return s, -v.entry(grid.N - 1) / grid.h


def energy_norms(v: QttVector, weight, grid: Grid) -> float:
    """``(integral weight |v'|^2)^{1/2}`` for the piecewise-linear ``v``."""
    w = weight if isinstance(weight, ElementField) else element_field(weight, grid)
    s, s_last = slopes(v, grid)
    val = grid.h * (qc.inner(w.values, s, s) + w.last * s_last * s_last)
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# fluxes and majorants


@dataclass(frozen=True)
class FluxField1D:
    """Reconstructed flux ``y = rho (c - g)``, ``g = integral_0^x load``; ``load=None`` means ``g = 0``."""

    rho: float
    c: float
    load: LoadSpec | None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = self.load.antiderivative(x) if self.load is not None else np.zeros_like(x)
        return self.rho * (self.c - g)

    def divergence(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f = self.load(x) if self.load is not None else np.zeros_like(x)
        return -self.rho * f


@dataclass(frozen=True)
class MajorantReport:
    value: float
    flux_term: float
    equilibrium_term: float
    norm: str
    friedrichs: float


@dataclass(frozen=True)
class TwoSidedBounds:
    lower: float
    upper: float
    q: float
    eta_norm: float


def _equilibrium_residual(y: FluxField1D, f: LoadSpec, rho: float) -> float:
    """``|| y' + rho f ||_{L2(0,1)}``; exactly zero when ``y`` was built from ``f``."""
    if y.load == f and y.rho == rho:
        return 0.0
    from scipy.integrate import quad

    def r(x):
        return float(y.divergence(x) + rho * f(x))

    val, _ = quad(lambda x: r(x) ** 2, 0.0, 1.0, limit=400)
    return math.sqrt(max(val, 0.0))


def _mismatch_sq(
    m: QttVector,
    m_last: float,
    w: ElementField,
    y: FluxField1D,
    mom: LoadMoments,
    grid: Grid,
) -> float:
    """``integral w^{-1} (m - y)^2`` with ``m`` element-wise constant.

    Per element: ``h (m_e - rho c + rho gbar_e)^2 + rho^2 V_e``.
    """
    if mom.load != y.load:
        raise ValueError("load moments do not match the flux")
    L, h, rho = grid.level, grid.h, y.rho
    d = qc.linear_combination([(1.0, m), (-rho * y.c, qc.ones(L)), (rho, mom.gbar)])
    d = qc.round_qtt(d, _TOL)
    total = h * qc.inner(w.inverse, d, d) + rho * rho * qc.dot(w.inverse, mom.var)
    d_last = m_last - rho * y.c + rho * mom.gbar_last
    total += (h * d_last * d_last + rho * rho * mom.var_last) / w.last
    if total < 0:
        log.warning("negative flux mismatch %.3e clamped to zero", total)
        total = 0.0
    return total


def _optimal_constant(m: QttVector, m_last: float, w: ElementField, rho: float, mom: LoadMoments, grid: Grid) -> float:
    """Minimizer over ``c`` of ``integral w^{-1} (m - rho (c - g))^2``."""
    h = grid.h
    num = h * (qc.dot(w.inverse, m) / rho + qc.dot(w.inverse, mom.gbar))
    num += h * (m_last / rho + mom.gbar_last) / w.last
    den = h * (qc.dot(w.inverse, qc.ones(grid.level)) + 1.0 / w.last)
    return num / den


def flux_reconstruct(v: QttVector, rho: float, f: LoadSpec, a0, a, grid: Grid, *, moments: LoadMoments | None = None):
    """``y = rho (c_k - g)`` with ``c_k = integral a0^{-1}(g + a v') / integral a0^{-1}``."""
    mom = moments or load_moments(f, grid)
    w0 = element_field(a0, grid)
    wa = element_field(a, grid)
    s, s_last = slopes(v, grid)
    m = qc.hadamard(wa.values, s)
    c = _optimal_constant(qc.scale(m, rho), rho * wa.last * s_last, w0, rho, mom, grid)
    return FluxField1D(rho, c, f)


def majorant_global(
    v: QttVector,
    y: FluxField1D,
    a,
    f: LoadSpec,
    grid: Grid,
    *,
    moments: LoadMoments | None = None,
) -> MajorantReport:
    """``||a v' - y||_{a^{-1}} + C_Omega ||y' + f||``, an upper bound of ``||u - v||_a``."""
    if y.rho != 1.0:
        raise ValueError("the global majorant takes a flux of the form c - g (rho = 1)")
    mom = moments or load_moments(y.load, grid)
    wa = element_field(a, grid)
    s, s_last = slopes(v, grid)
    m = qc.hadamard(wa.values, s)
    flux = math.sqrt(_mismatch_sq(m, wa.last * s_last, wa, y, mom, grid))
    cf = friedrichs_constant()
    eq = cf * _equilibrium_residual(y, f, 1.0)
    return MajorantReport(flux + eq, flux, eq, "energy_a", cf)


def certified_energy_error(v: QttVector, a, f: LoadSpec, grid: Grid, *, moments=None) -> MajorantReport:
    """Global majorant with the optimal reconstructed flux."""
    mom = moments or load_moments(f, grid)
    wa = element_field(a, grid)
    y = flux_reconstruct(v, 1.0, f, wa, wa, grid, moments=mom)
    return majorant_global(v, y, wa, f, grid, moments=mom)


def modeling_error_bound(v: QttVector, a, a0, grid: Grid) -> float:
    """``(integral a^{-1} ((a - a0) v')^2)^{1/2}``: majorant at the flux ``a0 v'``."""
    wa = element_field(a, grid)
    w0 = element_field(a0, grid)
    s, s_last = slopes(v, grid)
    d = qc.round_qtt(qc.add(wa.values, qc.scale(w0.values, -1.0)), _TOL)
    val = grid.h * qc.inner(wa.inverse, d, d, s, s)
    dl = wa.last - w0.last
    val += grid.h * dl * dl * s_last * s_last / wa.last
    return math.sqrt(max(val, 0.0))


def majorant_step(
    u_tilde: QttVector,
    v: QttVector,
    y: FluxField1D,
    rho: float,
    a0,
    a,
    f: LoadSpec,
    grid: Grid,
    *,
    lam0_lower: float | None = None,
    moments: LoadMoments | None = None,
) -> MajorantReport:
    """Bound on ``||u - u_tilde||_0`` where ``u`` is the exact image of ``v`` under one step.

    ``(integral a0|eta'|^2 + a0^{-1} tau^2 - 2 eta' tau)^{1/2} + (C_F / lam0) ||y' + rho f||``
    with ``eta = u_tilde - v`` and ``tau = y - rho a v'``; the first integrand is
    ``a0^{-1} (a0 eta' - tau)^2``, which is how it is evaluated.
    """
    mom = moments or load_moments(y.load, grid)
    w0 = element_field(a0, grid)
    wa = element_field(a, grid)
    eta = qc.add(u_tilde, qc.scale(v, -1.0))
    se, se_last = slopes(eta, grid)
    sv, sv_last = slopes(v, grid)
    # a0 eta' - tau = a0 eta' + rho a v' - y
    m = qc.round_qtt(qc.add(qc.hadamard(w0.values, se), qc.scale(qc.hadamard(wa.values, sv), rho)), _TOL)
    m_last = w0.last * se_last + rho * wa.last * sv_last
    flux = math.sqrt(_mismatch_sq(m, m_last, w0, y, mom, grid))
    cf = friedrichs_constant()
    if lam0_lower is None:
        lam0_lower = _field_min(a0)
    eq = cf / lam0_lower * _equilibrium_residual(y, f, rho)
    return MajorantReport(flux + eq, flux, eq, "energy_0", cf)


def _field_min(a0) -> float:
    if isinstance(a0, (int, float)):
        return float(a0)
    if isinstance(a0, CoefficientSpec):
        return a0.bounds()[0]
    raise ValueError("pass lam0_lower for a sampled preconditioner coefficient")


def two_sided(eta_norm: float, majorant: float, q: float) -> TwoSidedBounds:
    """Bracket of the error of the iterate that produced ``eta``."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"contraction factor must lie in [0, 1), got {q}")
    if eta_norm < 0 or majorant < 0:
        raise ValueError("norms must be non-negative")
    upper = (eta_norm + majorant) / (1.0 - q)
    lower = max(0.0, (eta_norm - majorant) / (1.0 + q))
    return TwoSidedBounds(lower, upper, q, eta_norm)


# ---------------------------------------------------------------------------
# solver hook


class StepCertifier:
    """Per-iterate bounds for the solver, reusing ``z = A0^{-1} r`` of the iterate.

    ``u_tilde = v + rho z`` is the discrete image of ``v`` under the fixed-point
    map with step ``rho``; its majorant and ``||rho z||_0`` give two-sided bounds
    on ``||v - u||_0`` for the exact solution ``u`` of the model problem.
    """

    def __init__(self, problem, rho: float, q: float):
        grid = problem.grid
        self.grid = grid
        self.rho = rho
        self.q = q
        self.load = problem.load
        self.moments = load_moments(problem.load, grid)
        spec = problem.coefficient
        self.wa = element_field(spec if spec.kind != "custom" else problem.a, grid, sampled=problem.a)
        self.w0 = element_field(problem.a0, grid)
        self.lam0 = _field_min(problem.a0)

    def __call__(self, v: QttVector, z: QttVector) -> tuple[MajorantReport, TwoSidedBounds]:
        u_tilde = qc.add(v, qc.scale(z, self.rho))
        y = flux_reconstruct(v, self.rho, self.load, self.w0, self.wa, self.grid, moments=self.moments)
        rep = majorant_step(
            u_tilde, v, y, self.rho, self.w0, self.wa, self.load, self.grid, lam0_lower=self.lam0, moments=self.moments
        )
        eta = self.rho * energy_norms(z, self.w0, self.grid)
        return rep, two_sided(eta, rep.value, self.q)

    def final(self, v: QttVector) -> MajorantReport:
        return certified_energy_error(v, self.wa, self.load, self.grid, moments=self.moments)
