import numpy as np
import pytest

from qtt_elliptic import qtt_core as qc
from qtt_elliptic.fem import CoefficientSpec, Grid, LoadSpec
from qtt_elliptic.homogenize_ref import (
    NotHomogenizableError,
    compare,
    effective_coefficient_1d,
    homogenized_coefficient,
    homogenized_solve,
    homogenized_solve_qtt,
    l2_norm,
)
from qtt_elliptic.solver import SolverConfig, dense_solution, solve

SQRT3 = 1.7320508075688772
UNIT = LoadSpec.constant()


def test_effective_constant():
    assert effective_coefficient_1d(CoefficientSpec.constant(2.5)) == 2.5


def test_effective_sine():
    spec = CoefficientSpec.periodic(2.0, 64)
    assert effective_coefficient_1d(spec) == pytest.approx(SQRT3, rel=1e-12)
    assert homogenized_coefficient(spec, "arithmetic") == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(ValueError):
        homogenized_coefficient(spec, "geometric")


@pytest.mark.parametrize("p,q", [(1.0, 4.0), (0.5, 0.75), (3.0, 3.0)])
def test_effective_two_phase(p, q):
    spec = CoefficientSpec.piecewise_constant([(0.5, p), (1.0, q)])
    assert effective_coefficient_1d(spec) == pytest.approx(2 * p * q / (p + q), rel=1e-14)


def test_effective_refuses_nonperiodic():
    with pytest.raises(NotHomogenizableError):
        effective_coefficient_1d(CoefficientSpec.exotic(2.0, 64))
    with pytest.raises(ValueError):
        effective_coefficient_1d(CoefficientSpec.modulated(), window=(0.5, 0.2))


def test_homogenized_solve_closed_form():
    g = Grid(10)
    x = g.nodes()
    u = homogenized_solve(SQRT3, UNIT, g)
    assert np.allclose(u, x * (1 - x) / (2 * SQRT3), rtol=1e-10)
    assert np.allclose(homogenized_solve(2 * SQRT3, UNIT, g), u / 2)
    assert np.allclose(qc.unfold(homogenized_solve_qtt(SQRT3, UNIT, g)), u, rtol=1e-9)
    with pytest.raises(ValueError):
        homogenized_solve(0.0, UNIT, g)


def test_homogenized_matches_solver():
    g = Grid(10)
    rep = solve(SolverConfig(level=10, delta=1e-12), CoefficientSpec.constant(SQRT3), UNIT)
    assert np.allclose(qc.unfold(rep.solution), homogenized_solve(SQRT3, UNIT, g), rtol=1e-9)


def test_l2_norm():
    g = Grid(10)
    x = g.nodes()
    assert l2_norm(qc.fold(x * (1 - x)), g) == pytest.approx(np.sqrt(1 / 30), rel=1e-5)
    assert l2_norm(qc.zeros(10), g) == 0.0


def test_compare_constant_is_quadrature_level():
    g = Grid(10)
    spec = CoefficientSpec.constant(2.0)
    u = dense_solution(spec, UNIT, g)
    c = compare(u, homogenized_solve(2.0, UNIT, g), spec, UNIT, g)
    assert c.l2_diff < 1e-12 and c.h1_diff < 1e-10 and c.residual_norm < 1e-9  # roundoff of A u0 with |A| ~ 8e3
    assert c.csv_row(1).startswith("1,")


def test_sine_l2_gap_shrinks_h1_does_not():
    g = Grid(12)
    rows = []
    for K in (16, 32, 64):
        spec = CoefficientSpec.periodic(2.0, K)
        u = dense_solution(spec, UNIT, g)
        rows.append(compare(u, homogenized_solve(SQRT3, UNIT, g), spec, UNIT, g))
    l2 = [r.l2_diff for r in rows]
    assert l2[0] > l2[1] > l2[2]
    assert min(r.h1_diff for r in rows) > 0.5 * max(r.h1_diff for r in rows)
    assert all(r.residual_norm > 0.1 for r in rows)


def test_four_step_gap_persists():
    g = Grid(12)
    gaps = []
    for K in (16, 32, 64, 128):
        spec = CoefficientSpec.modulated(2.0, K)
        u = dense_solution(spec, UNIT, g)
        u0 = homogenized_solve(effective_coefficient_1d(spec), UNIT, g)
        gaps.append(compare(u, u0, spec, UNIT, g).l2_diff)
    assert min(gaps) > 0.5 * max(gaps)
    assert min(gaps) > 1e-3
