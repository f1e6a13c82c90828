import functools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qtt_elliptic import qtt_core as qc
from qtt_elliptic.error_control import (
    FluxField1D,
    certified_energy_error,
    element_field,
    energy_norms,
    flux_reconstruct,
    friedrichs_constant,
    load_moments,
    majorant_global,
    majorant_step,
    modeling_error_bound,
    reciprocal,
    slopes,
    two_sided,
)
from qtt_elliptic.fem import CoefficientSpec, Grid, LoadSpec
from qtt_elliptic.homogenize_ref import homogenized_solve
from qtt_elliptic.solver import SolverConfig, dense_solution, solve

ONE_OVER_PI = 0.3183098861837907
SINE = CoefficientSpec.periodic(2.0, 64)
UNIT = LoadSpec.constant()


class ModelProblem:
    """Closed-form solution of ``-(a u')' = 1`` with ``a`` constant per element.

    On each element ``a u' = c* - x`` with ``c* = sum(x_m / a) / sum(1 / a)``;
    integrals of ``(A + x)^2`` over an element are ``h (A + x_m)^2 + h^3 / 12``.
    """

    def __init__(self, spec, level):
        self.grid = g = Grid(level)
        a = spec(g.midpoints()) if spec.kind != "custom" else np.asarray(spec.samples)
        self.ae = np.append(a, a[-1])
        self.h = g.h
        self.xm = (np.arange(1, g.N + 2) - 0.5) * g.h
        self.cstar = np.sum(self.xm / self.ae) / np.sum(1 / self.ae)

    def slopes(self, v):
        return np.diff(np.concatenate([[0.0], v, [0.0]])) / self.h

    def error(self, v, weight):
        """``(integral w |v' - u'|^2)^{1/2}`` for an element-wise weight."""
        w = np.broadcast_to(weight, self.ae.shape)
        s = self.slopes(v)
        return math.sqrt(np.sum(w / self.ae ** 2 * (self.h * (self.ae * s - self.cstar + self.xm) ** 2 + self.h ** 3 / 12)))

    def one_step_error(self, v, u_tilde, rho, a0):
        """``||T v - u_tilde||_0`` with ``T v`` the exact continuous image of one fixed-point step."""
        sv, st_ = self.slopes(v), self.slopes(u_tilde)
        c = (np.sum((self.xm + self.ae * sv) / a0)) / np.sum(np.full_like(self.ae, 1.0 / a0))
        # a0 (Tv - v)' = rho (c - x - a v')
        A = a0 * (st_ - sv) + rho * self.ae * sv - rho * c
        return math.sqrt(np.sum((self.h * (A + rho * self.xm) ** 2 + rho ** 2 * self.h ** 3 / 12) / a0))


def test_friedrichs_constant():
    assert friedrichs_constant(1.0) == pytest.approx(ONE_OVER_PI, rel=1e-15)
    assert friedrichs_constant(2.0) == pytest.approx(2 / math.pi)
    assert friedrichs_constant(1.0, 1.0) == pytest.approx(1 / (math.sqrt(2) * math.pi))
    with pytest.raises(ValueError):
        friedrichs_constant(0.0)


def test_reciprocal(rng):
    a = rng.uniform(1.0, 3.0, 256)
    y = reciprocal(qc.fold(a), 1.0, 3.0)
    assert np.allclose(qc.unfold(y), 1 / a, rtol=1e-11)


def test_slopes():
    g = Grid(3)
    v = np.arange(1.0, 9.0)
    s, last = slopes(qc.fold(v), g)
    assert np.allclose(qc.unfold(s), np.diff(np.concatenate([[0], v])) / g.h)
    assert last == pytest.approx(-8 / g.h)


def test_energy_norm_zero_and_quadratic():
    g = Grid(10)
    assert energy_norms(qc.zeros(10), 1.0, g) == 0.0
    errs = []
    for L in (6, 8, 10, 12):
        g = Grid(L)
        x = g.nodes()
        errs.append(abs(energy_norms(qc.fold(x * (1 - x) / 2), 1.0, g) ** 2 - 1 / 12))
    assert errs[-1] < 1e-7
    assert all(b < a for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize(
    "spec", [SINE, CoefficientSpec.modulated(2.0, 64), CoefficientSpec.exotic(2.0, 64)], ids=["sine", "four", "cubic"]
)
def test_energy_norm_matches_dense(spec, rng):
    g = Grid(10)
    v = rng.standard_normal(g.N)
    a = spec(g.midpoints())
    ae = np.append(a, a[-1])
    s = np.diff(np.concatenate([[0], v, [0]])) / g.h
    ref = math.sqrt(g.h * np.sum(ae * s ** 2))
    assert energy_norms(qc.fold(v), spec, g) == pytest.approx(ref, rel=1e-10)


def test_load_moments_unit_load():
    g = Grid(8)
    mom = load_moments(UNIT, g)
    xm = (np.arange(1, g.N + 1) - 0.5) * g.h
    assert np.allclose(qc.unfold(mom.gbar), xm)
    assert np.allclose(qc.unfold(mom.var), g.h ** 3 / 12, rtol=1e-8)
    assert mom.gbar_last == pytest.approx(1 - g.h / 2)


# ---------------------------------------------------------------- global majorant


def test_global_majorant_coincides_with_error():
    mp = ModelProblem(SINE, 10)
    u = dense_solution(SINE, UNIT, mp.grid)
    rep = certified_energy_error(qc.fold(u), SINE, UNIT, mp.grid)
    assert rep.equilibrium_term == 0.0
    assert rep.value == pytest.approx(mp.error(u, mp.ae), rel=1e-6)


def test_global_majorant_exact_flux_constant_coefficient():
    spec = CoefficientSpec.constant(1.0)
    mp = ModelProblem(spec, 8)
    v = dense_solution(spec, UNIT, mp.grid)
    y = FluxField1D(1.0, 0.5, UNIT)  # c* - x with c* = 1/2
    rep = majorant_global(qc.fold(v), y, spec, UNIT, mp.grid)
    assert rep.equilibrium_term == 0.0
    assert rep.value == pytest.approx(mp.error(v, 1.0), rel=1e-8)


def test_global_majorant_degenerate():
    g = Grid(6)
    rep = majorant_global(qc.zeros(6), FluxField1D(1.0, 0.0, None), SINE, UNIT, g)
    assert rep.flux_term == 0.0
    assert rep.value == pytest.approx(ONE_OVER_PI * 1.0, rel=1e-10)


def test_global_majorant_brackets_perturbations(rng):
    mp = ModelProblem(SINE, 10)
    u = dense_solution(SINE, UNIT, mp.grid)
    for _ in range(20):
        v = u + 1e-3 * rng.standard_normal(u.size) * rng.uniform(0, 1)
        true = mp.error(v, mp.ae)
        c = 0.5 + rng.uniform(-0.05, 0.05)
        rep = majorant_global(qc.fold(v), FluxField1D(1.0, c, UNIT), SINE, UNIT, mp.grid)
        assert rep.value >= true * (1 - 1e-12)
        assert certified_energy_error(qc.fold(v), SINE, UNIT, mp.grid).value >= true * (1 - 1e-10)


def test_global_majorant_rejects_scaled_flux():
    with pytest.raises(ValueError):
        majorant_global(qc.zeros(4), FluxField1D(2.0, 0.0, UNIT), SINE, UNIT, Grid(4))


# ---------------------------------------------------------------- modeling error


def test_modeling_error_zero_when_equal():
    g = Grid(8)
    assert modeling_error_bound(qc.fold(np.sin(g.nodes())), 2.0, 2.0, g) == pytest.approx(0.0, abs=1e-13)


def test_modeling_error_decreases_with_C():
    g = Grid(10)
    vals = []
    for C in (1.5, 2.0, 4.0, 8.0):
        spec = CoefficientSpec.periodic(C, 64)
        a0 = spec.harmonic_mean(0.0, spec.period)
        vals.append(modeling_error_bound(qc.fold(homogenized_solve(a0, UNIT, g)), spec, a0, g))
    assert all(v > 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_modeling_error_dominates_true_error():
    mp = ModelProblem(SINE, 10)
    a0 = math.sqrt(3.0)
    u0 = homogenized_solve(a0, UNIT, mp.grid)
    assert modeling_error_bound(qc.fold(u0), SINE, a0, mp.grid) >= mp.error(u0, mp.ae)


# ---------------------------------------------------------------- flux reconstruction


def test_flux_constant_closed_form():
    # a0 = a = 1, v = 0: c = integral x dx / integral 1 = 1/2
    g = Grid(8)
    y = flux_reconstruct(qc.zeros(8), 1.0, UNIT, 1.0, 1.0, g)
    assert y.c == pytest.approx(0.5, rel=1e-12)
    assert np.allclose(y(np.array([0.0, 0.25])), [0.5, 0.25])
    assert np.allclose(y.divergence(np.array([0.3])), -1.0)


def test_flux_at_solution_gives_cstar():
    spec = CoefficientSpec.constant(1.5)
    mp = ModelProblem(spec, 8)
    u = dense_solution(spec, UNIT, mp.grid)
    y = flux_reconstruct(qc.fold(u), 1.0, UNIT, 1.5, 1.5, mp.grid)
    assert y.c == pytest.approx(mp.cstar, rel=1e-10)
    rep = majorant_step(qc.fold(u), qc.fold(u), y, 1.0, 1.5, 1.5, UNIT, mp.grid)
    # only the within-element variation of c* - x is left: (N + 1) h^3 / 12 / a0
    h = mp.grid.h
    assert rep.flux_term == pytest.approx(math.sqrt((mp.grid.N + 1) * h ** 3 / 12 / 1.5), rel=1e-8)


def test_flux_constant_is_optimal(rng):
    g = Grid(8)
    mp = ModelProblem(SINE, 8)
    v = dense_solution(SINE, UNIT, g) + 1e-3 * rng.standard_normal(g.N)
    vq = qc.fold(v)
    rho, a0 = 1.0, 2.0
    y = flux_reconstruct(vq, rho, UNIT, a0, SINE, g)
    zq = qc.fold(rng.standard_normal(g.N) * 1e-4)
    ut = qc.add(vq, zq)
    best = majorant_step(ut, vq, y, rho, a0, SINE, UNIT, g).flux_term
    for dc in (-1e-3, 1e-3):
        other = majorant_step(ut, vq, FluxField1D(rho, y.c + dc, UNIT), rho, a0, SINE, UNIT, g).flux_term
        assert other >= best


# ---------------------------------------------------------------- step majorant


def test_step_majorant_no_gap_small_level(rng):
    for L in (4, 6, 8):
        mp = ModelProblem(SINE, L)
        v = dense_solution(SINE, UNIT, mp.grid) + 1e-2 * rng.standard_normal(mp.grid.N)
        ut = v + 1e-3 * rng.standard_normal(mp.grid.N)
        y = flux_reconstruct(qc.fold(v), 1.0, UNIT, 2.0, SINE, mp.grid)
        rep = majorant_step(qc.fold(ut), qc.fold(v), y, 1.0, 2.0, SINE, UNIT, mp.grid)
        assert rep.equilibrium_term == 0.0
        assert rep.value == pytest.approx(mp.one_step_error(v, ut, 1.0, 2.0), rel=1e-8)


def test_step_majorant_dense_image_small(rng):
    # u_tilde from the dense discrete step: the majorant is the one-step discretization error
    mp = ModelProblem(SINE, 8)
    g = mp.grid
    v = rng.standard_normal(g.N) * 1e-2
    from qtt_elliptic.fem import assemble_stiffness_dense, load_vector_dense

    A = assemble_stiffness_dense(SINE(g.midpoints()), g.h)
    A0 = assemble_stiffness_dense(np.full(g.N, 2.0), g.h)
    ut = v + np.linalg.solve(A0, load_vector_dense(UNIT, g) - A @ v)
    y = flux_reconstruct(qc.fold(v), 1.0, UNIT, 2.0, SINE, g)
    rep = majorant_step(qc.fold(ut), qc.fold(v), y, 1.0, 2.0, SINE, UNIT, g)
    assert rep.value == pytest.approx(mp.one_step_error(v, ut, 1.0, 2.0), rel=1e-8)
    assert rep.value < 1e-2 * np.sqrt(2.0) * mp.error(v, 2.0)


def test_step_majorant_upper_bound_random(rng):
    mp = ModelProblem(SINE, 8)
    g = mp.grid
    for _ in range(50):
        v = rng.standard_normal(g.N) * 1e-2
        ut = v + rng.standard_normal(g.N) * 1e-2
        c = rng.uniform(0.3, 0.7)
        rep = majorant_step(qc.fold(ut), qc.fold(v), FluxField1D(1.0, c, UNIT), 1.0, 2.0, SINE, UNIT, g)
        assert rep.value >= mp.one_step_error(v, ut, 1.0, 2.0) * (1 - 1e-10)


def test_step_majorant_equilibrium_term_for_foreign_flux():
    g = Grid(6)
    y = FluxField1D(1.0, 0.5, None)  # y' = 0, so ||y' + f|| = 1
    rep = majorant_step(qc.zeros(6), qc.zeros(6), y, 1.0, 2.0, SINE, UNIT, g)
    assert rep.equilibrium_term == pytest.approx(ONE_OVER_PI / 2.0, rel=1e-8)


# ---------------------------------------------------------------- two-sided bounds


def test_two_sided_formulas():
    b = two_sided(1.0, 0.0, 0.5)
    assert (b.lower, b.upper) == pytest.approx((1 / 1.5, 1 / 0.5))
    b = two_sided(0.3, 0.0, 0.0)
    assert b.lower == b.upper == 0.3
    assert two_sided(0.1, 0.5, 0.2).lower == 0.0
    with pytest.raises(ValueError):
        two_sided(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        two_sided(-1.0, 0.0, 0.5)


@given(eta=st.floats(0, 10), m=st.floats(0, 10), q=st.floats(0, 0.99))
def test_lower_never_exceeds_upper(eta, m, q):
    b = two_sided(eta, m, q)
    assert 0.0 <= b.lower <= b.upper


@functools.lru_cache(maxsize=None)
def _certified_run(level=10, delta=1e-10, spec=SINE):
    mp = ModelProblem(spec, level)
    errs = []
    a0 = spec.mean()
    cfg = SolverConfig(level=level, delta=delta, certify=True, max_iter=60)
    rep = solve(cfg, spec, UNIT, callback=lambda k, v: errs.append(mp.error(qc.unfold(v), a0)))
    return rep, errs, mp


def test_bounds_bracket_every_iteration():
    rep, errs, _ = _certified_run()
    assert len(errs) == rep.iterations >= 5
    for rec, e in zip(rep.history[1:], errs):
        lo, up = rec.bounds
        assert lo <= e <= up


def test_upper_bound_decays_geometrically():
    """Upper bound ratio <= q + 0.1 over every iteration, as specified.

    The reference is the continuous solution, so the bound levels off at the
    discretization error after a handful of steps.
    """
    rep, _, _ = _certified_run()
    ups = [r.bounds[1] for r in rep.history]
    ratios = [b / a for a, b in zip(ups, ups[1:])]
    assert max(ratios) <= rep.q_used + 0.1


def test_upper_bound_decays_while_iteration_error_dominates():
    rep, _, _ = _certified_run()
    ups = np.array([r.bounds[1] for r in rep.history])
    active = ups > 10 * ups[-1]
    ratios = ups[1:][active[:-1]] / ups[:-1][active[:-1]]
    assert len(ratios) >= 3
    assert ratios.max() <= rep.q_used + 0.1


def test_element_field_variants():
    g = Grid(6)
    w = element_field(2.0, g)
    assert w.last == 2.0 and np.allclose(qc.unfold(w.inverse), 0.5)
    pw = CoefficientSpec.piecewise_constant([(0.5, 1.0), (1.0, 4.0)])
    w = element_field(pw, g)
    assert np.allclose(qc.unfold(w.inverse) * qc.unfold(w.values), 1.0)
    with pytest.raises(ValueError):
        element_field(-1.0, g)
