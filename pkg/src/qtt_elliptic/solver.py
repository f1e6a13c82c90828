"""Rank-truncated preconditioned iterations for ``A_eps v = f`` in QTT format.

Two methods share the same building blocks: the preconditioned fixed-point
map ``v <- v - rho A0^{-1}(A v - f)`` and preconditioned steepest descent
(PSD), which picks the step by exact line search along ``z = A0^{-1} r``.
Every step applies one rounding at ``delta`` to the updated iterate; the
intermediate matrix-vector products are rounded at ``delta / 4``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import qtt_core as qc
from .contraction import contraction_factor, ratio_bounds, select_preconditioner
from .fem import (
    EXACT_FLOOR,
    CoefficientSpec,
    Grid,
    LoadSpec,
    assemble_load,
    assemble_stiffness_qtt,
    inverse_preconditioner_qtt,
    sample_coefficient,
)
from .qtt_core import QttMatrix, QttVector

log = logging.getLogger(__name__)

METHODS = ("fixed_point", "psd")
STOP_RULES = ("residual", "energy")

# the coefficient is sampled at least this accurately, whatever delta is
SAMPLE_TOL = 1e-10


class PositivityLossError(RuntimeError):
    """``(A z, z) <= 0`` during PSD: truncation destroyed the search direction."""


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of one solve.

    ``rho`` is a float or ``"auto"`` (sharp optimal step).  ``preconditioner``
    is ``mean``, ``harmonic_mean``, ``envelope_average`` or a positive
    constant.  ``stop_rule`` selects what is compared against ``stop_tol``:
    the relative Euclidean residual ``|f - A v| / |f|`` (``residual``) or the
    relative preconditioned residual ``|A0^{-1} r|_0 / |v_0|_0`` (``energy``).
    Truncation puts a floor under both; when the increment energy has not
    dropped below 0.9 of its best value for ``stall_window`` steps the run
    ends unconverged with reason ``stagnated`` (0 disables the check).
    """

    level: int
    delta: float = 1e-7
    method: str = "psd"
    rho: float | str = "auto"
    preconditioner: float | str = "mean"
    stop_tol: float = 1e-6
    max_iter: int = 50
    stop_rule: str = "residual"
    record_timing: bool = True
    certify: bool = False
    rmax: int | None = None
    stall_window: int = 5

    def __post_init__(self):
        if self.level < 1:
            raise ValueError("level must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not self.stop_tol > 0:
            raise ValueError("stop_tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.stall_window < 0:
            raise ValueError("stall_window must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"stop_rule must be one of {STOP_RULES}")
        if self.rho != "auto" and not (isinstance(self.rho, (int, float)) and self.rho > 0):
            raise ValueError(f"rho must be 'auto' or a positive number, got {self.rho!r}")

    @property
    def tolerance(self) -> qc.TruncationTolerance:
        return qc.TruncationTolerance(self.delta, self.rmax)


@dataclass(frozen=True)
class ConvergenceRecord:
    k: int
    residual_norm: float
    increment_energy: float
    avg_rank: float
    wall_ms: float
    majorant: float | None = None
    bounds: tuple[float, float] | None = None
    eta_norm: float | None = None

    def csv_fields(self) -> list[str]:
        lo, up = self.bounds if self.bounds is not None else (None, None)
        opt = lambda v: "" if v is None else f"{v:.12g}"  # noqa: E731
        return [
            str(self.k),
            f"{self.residual_norm:.12g}",
            f"{self.increment_energy:.12g}",
            f"{self.avg_rank:.6g}",
            opt(self.majorant),
            opt(lo),
            opt(up),
            f"{self.wall_ms:.3f}",
        ]


CSV_COLUMNS = ("iter", "residual", "increment_energy", "avg_rank_u", "majorant", "err_lower", "err_upper", "wall_ms")


@dataclass
class SolutionReport:
    solution: QttVector
    history: list[ConvergenceRecord]
    converged: bool
    q_used: float
    rho_used: float | None
    f_norm: float
    a0: float | CoefficientSpec = None
    warnings: list[str] = field(default_factory=list)
    stop_reason: str = "converged"
    energy_majorant: float | None = None

    @property
    def iterations(self) -> int:
        return self.history[-1].k

    def summary(self) -> dict:
        last = self.history[-1]
        return {
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "residual": last.residual_norm,
            "relative_residual": last.residual_norm / self.f_norm if self.f_norm else 0.0,
            "increment_energy": last.increment_energy,
            "avg_rank": last.avg_rank,
            "ranks": list(self.solution.ranks),
            "q": self.q_used,
            "rho": self.rho_used,
            "majorant": last.majorant,
            "bounds": list(last.bounds) if last.bounds else None,
            "energy_majorant": self.energy_majorant,
            "total_ms": sum(r.wall_ms for r in self.history),
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# single steps


def _sub(x: QttVector, y: QttVector) -> QttVector:
    return qc.add(x, qc.scale(y, -1.0))


def residual(v: QttVector, f: QttVector, A: QttMatrix, tol) -> QttVector:
    """``f - A v`` rounded at ``tol`` relative to the residual itself.

    ``A v`` is not rounded on its own: near convergence ``|f - A v|`` is far
    below ``|A v|`` and a relative rounding of the product would swamp it.
    """
    return qc.round_qtt(_sub(f, qc.matvec(A, v)), tol)


def initial_guess(A0_inv: QttMatrix, f: QttVector, tol) -> QttVector:
    """``v_0 = A0^{-1} f``, the solution of the simplified problem."""
    return qc.matvec(A0_inv, f, tol)


def _quarter(tol) -> qc.TruncationTolerance:
    t = qc.as_tolerance(tol)
    return qc.TruncationTolerance(t.delta / 4, t.rmax)


def _direction(v, f, A, A0_inv, tol, r, z):
    q4 = _quarter(tol)
    if r is None:
        r = residual(v, f, A, q4)
    if z is None:
        z = qc.matvec(A0_inv, r, q4)
    return r, z


def fixed_point_step(v, f, A, A0_inv, rho, tol, *, r=None, z=None):
    """``round(v - rho A0^{-1}(A v - f), tol)``.

    ``r = f - A v`` and ``z = A0^{-1} r`` may be passed in when already known.
    """
    r, z = _direction(v, f, A, A0_inv, tol, r, z)
    return qc.round_qtt(qc.add(v, qc.scale(z, rho)), tol)


def psd_step(v, f, A, A0_inv, tol, *, r=None, z=None, return_step=False):
    """One preconditioned steepest-descent step with exact line search.

    ``alpha = (z, r) / (A z, z)`` along ``z = A0^{-1} r``.
    """
    r, z = _direction(v, f, A, A0_inv, tol, r, z)
    zr = qc.dot(z, r)
    if zr == 0.0 or qc.norm2(r) == 0.0:
        return (v, 0.0) if return_step else v
    curv = qc.inner(z, qc.matvec(A, z, _quarter(tol)))
    if not curv > 0:
        raise PositivityLossError(f"(A z, z) = {curv:.3e} <= 0; truncation tolerance too coarse")
    alpha = zr / curv
    v_new = qc.round_qtt(qc.add(v, qc.scale(z, alpha)), tol)
    return (v_new, alpha) if return_step else v_new


# ---------------------------------------------------------------------------
# problem setup


@dataclass(frozen=True)
class Problem:
    grid: Grid
    coefficient: CoefficientSpec
    load: LoadSpec
    a: QttVector
    A: QttMatrix
    a0: float | CoefficientSpec
    A0_inv: QttMatrix
    f: QttVector


def build_problem(config: SolverConfig, coefficient: CoefficientSpec, load: LoadSpec) -> Problem:
    grid = Grid(config.level)
    sample_tol = min(config.delta, SAMPLE_TOL)
    a = sample_coefficient(coefficient, grid, sample_tol)
    A = assemble_stiffness_qtt(a, grid.h, 1e-13)
    a0 = select_preconditioner(coefficient, config.preconditioner)
    A0_inv = inverse_preconditioner_qtt(a0, grid, EXACT_FLOOR)
    f = assemble_load(load, grid, EXACT_FLOOR)
    return Problem(grid, coefficient, load, a, A, a0, A0_inv, f)


def _ratio(problem: Problem) -> tuple[float, float]:
    if problem.coefficient.kind == "custom":
        return ratio_bounds(problem.a, problem.a0 if not isinstance(problem.a0, CoefficientSpec) else problem.a0.C)
    return ratio_bounds(problem.coefficient, problem.a0)


def solve(
    config: SolverConfig,
    coefficient: CoefficientSpec,
    load: LoadSpec,
    *,
    problem: Problem | None = None,
    callback: Callable[[int, QttVector], None] | None = None,
) -> SolutionReport:
    """Iterate until the stopping rule is met or ``max_iter`` is reached.

    ``history[0]`` describes the initial guess; record ``k`` the iterate after
    ``k`` steps.  Non-convergence is reported, not raised.
    """
    problem = problem or build_problem(config, coefficient, load)
    tol = config.tolerance
    A, A0_inv, f = problem.A, problem.A0_inv, problem.f
    h_lo, h_hi = _ratio(problem)
    q_sharp = (h_hi - h_lo) / (h_hi + h_lo)
    warnings: list[str] = []

    rho_used = None
    q_used = q_sharp
    if config.method == "fixed_point":
        rho_used = 2.0 / (h_lo + h_hi) if config.rho == "auto" else float(config.rho)
        q_used = contraction_factor(rho_used, h_lo, h_hi)
        if q_used >= 1.0:
            msg = f"rho = {rho_used:g} outside the contraction window (0, {2.0 / h_hi:g}); q = {q_used:g}"
            log.warning(msg)
            warnings.append(msg)

    certifier = None
    if config.certify:
        from .error_control import StepCertifier

        rho_cert = rho_used if rho_used is not None else 2.0 / (h_lo + h_hi)
        q_cert = contraction_factor(rho_cert, h_lo, h_hi)
        if q_cert >= 1.0:
            warnings.append("certification skipped: no contraction")
        else:
            certifier = StepCertifier(problem, rho_cert, q_cert)

    q4 = _quarter(tol)
    f_norm = qc.norm2(f)

    def measure(k, v, r, z, inc, wall):
        maj = bounds = eta = None
        if certifier is not None:
            rep, tb = certifier(v, z)
            maj, bounds, eta = rep.value, (tb.lower, tb.upper), tb.eta_norm
        rec = ConvergenceRecord(
            k, qc.norm2(r), inc, qc.average_rank(v), wall if config.record_timing else 0.0, maj, bounds, eta
        )
        return rec, math.sqrt(max(qc.dot(z, r), 0.0))

    t0 = time.perf_counter()
    v = initial_guess(A0_inv, f, tol)
    r = residual(v, f, A, q4)
    z = qc.matvec(A0_inv, r, q4)
    wall = (time.perf_counter() - t0) * 1e3
    v0_energy = math.sqrt(max(qc.dot(v, f), 0.0))
    rec, pre = measure(0, v, r, z, 0.0, wall)
    history = [rec]
    converged = _stop(config, rec.residual_norm, f_norm, pre, v0_energy)
    k = 0
    best_inc, since_best, stalled = math.inf, 0, False
    while not converged and not stalled and k < config.max_iter:
        k += 1
        t0 = time.perf_counter()
        if config.method == "psd":
            v, step = psd_step(v, f, A, A0_inv, tol, r=r, z=z, return_step=True)
        else:
            v, step = fixed_point_step(v, f, A, A0_inv, rho_used, tol, r=r, z=z), rho_used
        # |step z|_{A0}^2 = step^2 (A0 z, z) = step^2 (z, r)
        inc = abs(step) * pre
        r = residual(v, f, A, q4)
        z = qc.matvec(A0_inv, r, q4)
        wall = (time.perf_counter() - t0) * 1e3
        rec, pre = measure(k, v, r, z, inc, wall)
        history.append(rec)
        if callback is not None:
            callback(k, v)
        converged = _stop(config, rec.residual_norm, f_norm, pre, v0_energy)
        if inc < 0.9 * best_inc:
            best_inc, since_best = inc, 0
        else:
            since_best += 1
            stalled = config.stall_window > 0 and since_best >= config.stall_window
    reason = "converged" if converged else ("stagnated" if stalled else "max_iter")
    final_majorant = certifier.final(v).value if certifier is not None else None
    return SolutionReport(
        v, history, converged, q_used, rho_used, f_norm, problem.a0, warnings, reason, final_majorant
    )


def _stop(config: SolverConfig, res: float, f_norm: float, pre_energy: float | None, v0_energy: float) -> bool:
    if config.stop_rule == "residual":
        return res <= config.stop_tol * f_norm
    if pre_energy is None:
        return False
    return pre_energy <= config.stop_tol * v0_energy


# ---------------------------------------------------------------------------
# dense reference


def dense_solution(coefficient: CoefficientSpec, load: LoadSpec, grid: Grid) -> np.ndarray:
    """Thomas solve of the same Galerkin system (dense vectors, small levels)."""
    from .fem import load_vector_dense, stiffness_diagonals, thomas_solve

    if coefficient.kind == "custom":
        a = np.asarray(coefficient.samples, dtype=float)
    else:
        a = coefficient(grid.midpoints())
    sub, main, sup = stiffness_diagonals(a, grid.h)
    return thomas_solve(sub, main, sup, load_vector_dense(load, grid))


def with_overrides(config: SolverConfig, **kw) -> SolverConfig:
    return replace(config, **kw)
