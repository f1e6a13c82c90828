"""Step parameter and contraction factor of the preconditioned fixed-point map.

For scalar coefficients the map ``v -> v - rho A0^{-1}(A v - f)`` contracts in
the ``A0`` energy norm with factor ``max |1 - rho a/a0|``; minimizing over
``rho`` gives ``rho* = 2/(lo + hi)`` and ``q = (hi - lo)/(hi + lo)`` with
``lo, hi`` the extreme values of ``a/a0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import qtt_core as qc
from .fem import SCAN_MAX_LEVEL, CoefficientSpec, EllipticityError
from .qtt_core import QttVector


@dataclass(frozen=True)
class SpectralBounds:
    lam1: float
    lam2: float
    h_lo: float
    h_hi: float
    c_plus: float


@dataclass(frozen=True)
class ContractionReport:
    rho_star: float
    q: float
    q_coarse: float
    a0: float | CoefficientSpec
    cond_bound: float
    h_lo: float
    h_hi: float

    def csv_row(self) -> str:
        return f"{self.rho_star:.12g},{self.q:.12g},{self.q_coarse:.12g},{self.cond_bound:.12g}"


def _breakpoints(*specs) -> list[float]:
    pts = {0.0, 1.0}
    for s in specs:
        if isinstance(s, CoefficientSpec) and s.kind != "custom":
            pts.update(min(b, 1.0) for b, _ in s.steps)
    return sorted(pts)


def _piece_value(spec: CoefficientSpec, lo: float, hi: float) -> float:
    """Value of a piecewise-constant spec on a piece where it does not jump."""
    if spec.kind == "constant":
        return spec.C
    return float(spec.modulator(np.array([0.5 * (lo + hi)]))[0])


def ratio_bounds(a_eps, a0) -> tuple[float, float]:
    """(min, max) of ``a_eps / a0``.

    ``a_eps`` may be a spec (analytic extrema per piece), a dense array, or a
    QTT vector (scanned densely, so only up to ``SCAN_MAX_LEVEL``).  ``a0`` is
    a positive constant, a constant/piecewise-constant spec, or matches the
    representation of ``a_eps``.
    """
    if isinstance(a_eps, CoefficientSpec) and a_eps.kind != "custom":
        if isinstance(a0, CoefficientSpec):
            if a0.kind not in ("constant", "piecewise_constant"):
                raise ValueError("a0 spec must be constant or piecewise constant")
            if a0.bounds()[0] <= 0:
                raise EllipticityError("a0 must be positive")
            lo, hi = math.inf, -math.inf
            pts = _breakpoints(a_eps, a0)
            for p, q in zip(pts, pts[1:]):
                b = _piece_value(a0, p, q)
                amin, amax = a_eps.bounds(p, q)
                lo, hi = min(lo, amin / b), max(hi, amax / b)
        else:
            a0 = float(a0)
            if a0 <= 0:
                raise EllipticityError("a0 must be positive")
            amin, amax = a_eps.bounds()
            lo, hi = amin / a0, amax / a0
        if lo <= 0:
            raise EllipticityError("a_eps must be positive")
        return lo, hi
    if isinstance(a_eps, CoefficientSpec):
        a_eps = np.asarray(a_eps.samples)
    if isinstance(a_eps, QttVector):
        if a_eps.level > SCAN_MAX_LEVEL:
            raise ValueError("QTT coefficient too large to scan; pass the coefficient spec")
        a_eps = qc.unfold(a_eps)
    if isinstance(a0, QttVector):
        a0 = qc.unfold(a0)
    a_eps = np.asarray(a_eps, dtype=float)
    a0 = np.asarray(a0, dtype=float)
    if np.any(a_eps <= 0) or np.any(a0 <= 0):
        raise EllipticityError("coefficients must be positive")
    r = a_eps / a0
    return float(r.min()), float(r.max())


def rho_star_and_q(h_lo: float, h_hi: float) -> tuple[float, float]:
    if not 0 < h_lo <= h_hi:
        raise ValueError(f"need 0 < h_lo <= h_hi, got ({h_lo}, {h_hi})")
    s = h_lo + h_hi
    return 2.0 / s, (h_hi - h_lo) / s


def contraction_factor(rho: float, h_lo: float, h_hi: float) -> float:
    """``max |1 - rho h|`` over ``h`` in ``[h_lo, h_hi]`` (any step ``rho``)."""
    return max(abs(1.0 - rho * h_lo), abs(1.0 - rho * h_hi))


def coarse_q_bound(lam_eps_lo: float, lam_eps_hi: float, lam0_lo: float, lam0_hi: float) -> float:
    """Contraction bound from the ellipticity constants alone (always >= the sharp q)."""
    for lo, hi in ((lam_eps_lo, lam_eps_hi), (lam0_lo, lam0_hi)):
        if not 0 < lo <= hi:
            raise ValueError(f"need 0 < lower <= upper, got ({lo}, {hi})")
    t = (lam_eps_lo * lam0_lo) / (lam_eps_hi * lam0_hi)
    return math.sqrt(max(0.0, 1.0 - t * t))


def spectral_bounds(a_eps: CoefficientSpec, a0) -> SpectralBounds:
    """Pointwise equivalence constants: ``lam1 a0 <= a_eps <= lam2 a0`` and ``c_plus``."""
    h_lo, h_hi = ratio_bounds(a_eps, a0)
    # scalar case: a_eps a0^{-1} a_eps <= c_plus a0  <=>  (a_eps/a0)^2 <= c_plus
    return SpectralBounds(lam1=h_lo, lam2=h_hi, h_lo=h_lo, h_hi=h_hi, c_plus=h_hi * h_hi)


def _objective(lo: float, hi: float) -> float:
    return (hi - lo) / (hi + lo)


def optimize_a0_constant(a_eps: CoefficientSpec, candidates: Iterable[float]) -> tuple[float, float, float]:
    """Candidate constant minimizing ``(max h - min h)/(max h + min h)``.

    For a constant ``a0`` the objective is scale invariant, so whole candidate
    sets tie.  Ties (within 1e-12) go to the candidate nearest the mean of
    ``a_eps``, then to the smaller one.
    """
    cands = sorted(float(c) for c in candidates)
    if not cands:
        raise ValueError("empty candidate set")
    scored = []
    for c in cands:
        lo, hi = ratio_bounds(a_eps, c)
        scored.append((c, 2.0 / (lo + hi), _objective(lo, hi)))
    q_min = min(q for _, _, q in scored)
    mean = a_eps.mean()
    ties = [s for s in scored if s[2] <= q_min + 1e-12]
    return min(ties, key=lambda s: (abs(s[0] - mean), s[0]))


def mean_coefficient(a_eps: CoefficientSpec) -> float:
    return a_eps.mean()


def harmonic_mean_coefficient(a_eps: CoefficientSpec) -> float:
    return a_eps.harmonic_mean()


@dataclass(frozen=True)
class AveragedCoefficient:
    a0: CoefficientSpec
    q_max: float
    cond_bound: float

    def q_of_x(self, x, a_plus: CoefficientSpec) -> np.ndarray:
        a0 = self.a0(x)
        return (a_plus(x) - a0) / a0


def averaged_coefficient(
    a_plus: CoefficientSpec,
    a_minus: CoefficientSpec,
    a_eps: CoefficientSpec | None = None,
    check_points: int = 4097,
) -> AveragedCoefficient:
    """Midpoint of piecewise-constant envelopes, ``(a+ + a-)/2``.

    Returns the averaged coefficient together with ``max q(x)`` where
    ``q = (a+ - a0)/a0`` and the bound ``max (1+q)/(1-q)`` on the condition
    number of ``A0^{-1} A`` (equivalence constant taken as 1).
    """
    for env in (a_plus, a_minus):
        if env.kind not in ("constant", "piecewise_constant"):
            raise ValueError("envelopes must be constant or piecewise constant")
    pts = _breakpoints(a_plus, a_minus)
    steps, q_max = [], 0.0
    for p, q in zip(pts, pts[1:]):
        up, dn = _piece_value(a_plus, p, q), _piece_value(a_minus, p, q)
        if dn <= 0 or up < dn:
            raise ValueError(f"invalid envelopes on [{p}, {q}]: minorant {dn}, majorant {up}")
        if a_eps is not None:
            lo, hi = a_eps.bounds(p, q)
            if lo < dn - 1e-12 or hi > up + 1e-12:
                raise ValueError(f"coefficient leaves the envelope on [{p}, {q}]")
        mid = 0.5 * (up + dn)
        steps.append((q, mid))
        q_max = max(q_max, (up - mid) / mid)
    if a_eps is not None and a_eps.kind == "custom":
        raise ValueError("envelope check needs an analytic coefficient")
    if a_eps is not None:
        # independent sampled check of the envelopes
        x = np.linspace(0.0, 1.0, check_points)
        vals = a_eps(x)
        if np.any(vals > a_plus(x) + 1e-12) or np.any(vals < a_minus(x) - 1e-12):
            raise ValueError("coefficient leaves the envelope")
    merged = _merge_steps(steps)
    a0 = (
        CoefficientSpec.constant(merged[0][1])
        if len(merged) == 1
        else CoefficientSpec.piecewise_constant(merged)
    )
    return AveragedCoefficient(a0=a0, q_max=q_max, cond_bound=(1 + q_max) / (1 - q_max))


def _merge_steps(steps):
    out = []
    for b, v in steps:
        if out and out[-1][1] == v:
            out[-1] = (b, v)
        else:
            out.append((b, v))
    return out


def envelopes(a_eps: CoefficientSpec) -> tuple[CoefficientSpec, CoefficientSpec]:
    """Piecewise-constant majorant and minorant from the analytic bounds per step."""
    if a_eps.kind == "constant":
        return a_eps, a_eps
    if a_eps.kind == "custom":
        raise ValueError("no analytic envelope for sampled coefficients")
    up, dn = [], []
    for lo, hi, _ in a_eps.intervals():
        mn, mx = a_eps.bounds(lo, hi)
        up.append((hi, mx))
        dn.append((hi, mn))
    mk = lambda s: CoefficientSpec.piecewise_constant(s)  # noqa: E731
    return mk(up), mk(dn)


def select_preconditioner(a_eps: CoefficientSpec, choice) -> float | CoefficientSpec:
    """Resolve ``mean | harmonic_mean | envelope_average | <float>`` to a coefficient."""
    if isinstance(choice, (int, float)):
        if choice <= 0:
            raise EllipticityError("explicit preconditioner constant must be positive")
        return float(choice)
    if choice == "mean":
        return mean_coefficient(a_eps)
    if choice == "harmonic_mean":
        return harmonic_mean_coefficient(a_eps)
    if choice == "envelope_average":
        up, dn = envelopes(a_eps)
        a0 = averaged_coefficient(up, dn).a0
        return a0.C if a0.kind == "constant" else a0
    try:
        return select_preconditioner(a_eps, float(choice))
    except (TypeError, ValueError):
        raise ValueError(f"unknown preconditioner {choice!r}") from None


def analyze(a_eps: CoefficientSpec, a0) -> ContractionReport:
    """Everything the ``contraction`` subcommand prints."""
    h_lo, h_hi = ratio_bounds(a_eps, a0)
    rho, q = rho_star_and_q(h_lo, h_hi)
    e_lo, e_hi = a_eps.bounds()
    if isinstance(a0, CoefficientSpec):
        z_lo, z_hi = a0.bounds()
    else:
        z_lo = z_hi = float(a0)
    return ContractionReport(
        rho_star=rho,
        q=q,
        q_coarse=coarse_q_bound(e_lo, e_hi, z_lo, z_hi),
        a0=a0,
        cond_bound=h_hi / h_lo,
        h_lo=h_lo,
        h_hi=h_hi,
    )
