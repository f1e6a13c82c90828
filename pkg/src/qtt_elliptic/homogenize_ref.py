"""One-dimensional homogenization baseline.

In 1D the periodic cell problem has the closed-form solution whose
effective coefficient is the harmonic mean of ``a`` over a period.  The
arithmetic mean is provided alongside for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import qtt_core as qc
from .error_control import energy_norms
from .fem import (
    CoefficientSpec,
    Grid,
    LoadSpec,
    assemble_load,
    assemble_stiffness_qtt,
    inverse_preconditioner_qtt,
    load_vector_dense,
    sample_coefficient,
    stiffness_diagonals,
    thomas_solve,
)
from .qtt_core import QttVector

AVERAGES = ("harmonic", "arithmetic")


class NotHomogenizableError(ValueError):
    """The coefficient has no period over which to average."""


@dataclass(frozen=True)
class Comparison:
    l2_diff: float
    h1_diff: float
    residual_norm: float

    def csv_row(self, K) -> str:
        return f"{K},{self.l2_diff:.12g},{self.h1_diff:.12g},{self.residual_norm:.12g}"


@dataclass(frozen=True)
class HomogenizedModel:
    a0_hom: float
    average: str
    u0: QttVector
    comparison: Comparison | None = None


def effective_coefficient_1d(spec: CoefficientSpec, window: tuple[float, float] | None = None) -> float:
    """Harmonic mean of ``a`` over one period, or over ``window`` when given.

    Periodic and constant coefficients need no window.  Modulated and
    piecewise-constant coefficients are averaged over ``window``
    (default ``(0, 1)``).  The ``x**m`` oscillator has no period and is refused.
    """
    if spec.kind == "constant":
        return spec.C
    if spec.kind == "exotic":
        raise NotHomogenizableError(
            "sin(omega x^m) with m > 1 is not periodic; average over an explicit window of a periodic coefficient instead"
        )
    if spec.kind == "custom":
        s = np.asarray(spec.samples, dtype=float)
        return float(s.size / np.sum(1.0 / s))
    if window is None:
        if spec.kind == "periodic":
            return spec.harmonic_mean(0.0, spec.period)
        window = (0.0, 1.0)
    lo, hi = window
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"averaging window must lie in [0, 1], got {window}")
    return spec.harmonic_mean(lo, hi)


def arithmetic_coefficient(spec: CoefficientSpec) -> float:
    return spec.mean()


def homogenized_coefficient(spec: CoefficientSpec, average: str = "harmonic") -> float:
    if average == "harmonic":
        return effective_coefficient_1d(spec)
    if average == "arithmetic":
        return arithmetic_coefficient(spec)
    raise ValueError(f"average must be one of {AVERAGES}")


def homogenized_solve(a0_hom: float, f: LoadSpec, grid: Grid) -> np.ndarray:
    """Nodal values of the constant-coefficient Galerkin solution (Thomas algorithm)."""
    if not a0_hom > 0:
        raise ValueError("homogenized coefficient must be positive")
    a = np.full(grid.N, float(a0_hom))
    sub, main, sup = stiffness_diagonals(a, grid.h)
    return thomas_solve(sub, main, sup, load_vector_dense(f, grid))


def homogenized_solve_qtt(a0_hom: float, f: LoadSpec, grid: Grid, tol=1e-12) -> QttVector:
    """Same solution in QTT format through the explicit inverse (any level)."""
    return qc.matvec(inverse_preconditioner_qtt(float(a0_hom), grid), assemble_load(f, grid), tol)


def l2_norm(e: QttVector, grid: Grid) -> float:
    """``L2(0, 1)`` norm of the piecewise-linear function with nodal values ``e``.

    Uses the P1 mass matrix ``(h/6) tridiag(1, 4, 1)``.
    """
    S = qc.shift_matrix(e.level)
    me = qc.linear_combination([(4.0, e), (1.0, qc.matvec(S, e)), (1.0, qc.matvec(S.T, e))])
    return math.sqrt(max(grid.h / 6.0 * qc.dot(e, me), 0.0))


def _as_qtt(u, tol=0.0) -> QttVector:
    return u if isinstance(u, QttVector) else qc.fold(np.asarray(u, dtype=float), tol)


def compare(u_eps, u0, a_eps: CoefficientSpec, f: LoadSpec, grid: Grid, *, a0=None) -> Comparison:
    """L2 difference, ``a0``-weighted energy difference and ``|f - A_eps u0|``.

    ``a0`` defaults to the harmonic mean for periodic coefficients and to the
    arithmetic mean otherwise.
    """
    ue, uh = _as_qtt(u_eps), _as_qtt(u0)
    e = qc.round_qtt(qc.add(ue, qc.scale(uh, -1.0)), 1e-13)
    if a0 is None:
        a0 = effective_coefficient_1d(a_eps) if a_eps.kind in ("constant", "periodic") else a_eps.mean()
    a = sample_coefficient(a_eps, grid, 1e-12)
    A = assemble_stiffness_qtt(a, grid.h)
    res = qc.add(assemble_load(f, grid), qc.scale(qc.matvec(A, uh), -1.0))
    return Comparison(l2_norm(e, grid), energy_norms(e, a0, grid), qc.norm2(res))
