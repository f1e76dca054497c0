import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lapguide.cci import cci_solve
from lapguide.errors import ConfigurationError, DecayCheckError, NoConvergenceError
from lapguide.fem import FieldOnCell
from lapguide.oracle import TruncatedRun, analytic_constant_modes, damped_truncated_solve, lap_extrapolate
from lapguide.problem import constant_field, zero_field

from conftest import disc, problem


def _uniform_guide():
    return dataclasses.replace(problem("remark2"), k=1.0, n=constant_field(1.0), name="uniform")


def test_zero_source_gives_zero_field():
    prob = dataclasses.replace(problem("example1"), f=zero_field(), name="nosource")
    run = damped_truncated_solve(prob, 0.1, 8, 0.2, decay_tol=np.inf)
    assert np.max(np.abs(run.field.values)) == 0.0


def test_heavily_damped_field_decays_cell_by_cell():
    run = damped_truncated_solve(_uniform_guide(), 1.0, 32, 0.1, cells=range(-6, 7))
    norms = [run.fields[c].l2_norm() for c in range(0, 7)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    # the source is mirror symmetric, the equilateral mesh only up to O(h²)
    assert np.allclose(norms, [run.fields[-c].l2_norm() for c in range(0, 7)], rtol=1e-3)
    assert run.decay_indicator < 1e-6


def test_short_strip_fails_the_decay_check():
    with pytest.raises(DecayCheckError):
        damped_truncated_solve(_uniform_guide(), 1.0, 8, 0.1)
    with pytest.raises(DecayCheckError):
        damped_truncated_solve(problem("example1"), 1e-2, 20, 0.1)


def test_bad_parameters_are_rejected():
    with pytest.raises(ConfigurationError):
        damped_truncated_solve(_uniform_guide(), 0.0, 16, 0.1)
    with pytest.raises(ConfigurationError):
        damped_truncated_solve(_uniform_guide(), 1.0, 4, 0.1)
    with pytest.raises(ConfigurationError):
        damped_truncated_solve(_uniform_guide(), 1.0, 8, 0.1, cells=(9,))


def _runs(values, eps=(4e-2, 2e-2, 1e-2)):
    d = disc("example1", 0.25)
    return [TruncatedRun(e, 64, 0.25, FieldOnCell(d.mesh, v)) for e, v in zip(eps, values)]


def test_extrapolating_identical_runs_returns_them():
    v = np.linspace(1, 2, disc("example1", 0.25).mesh.n_nodes) * (1 + 0.5j)
    ex = lap_extrapolate(_runs([v, v, v]))
    assert np.allclose(ex.field.values, v, rtol=1e-12, atol=0)
    assert ex.error_indicator == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_extrapolation_removes_a_quadratic_in_the_damping(a, b, c):
    n = disc("example1", 0.25).mesh.n_nodes
    base = np.cos(np.arange(n)) + 2.0
    eps = (4e-2, 2e-2, 1e-2)
    vals = [base * (1 + a * e + (b + 1j * c) * e * e) for e in eps]
    ex = lap_extrapolate(_runs(vals, eps))
    assert np.allclose(ex.field.values, base, rtol=1e-12, atol=1e-12)
    lin = lap_extrapolate(_runs([base * (1 + a * e) for e in eps], eps), order=1)
    assert np.allclose(lin.field.values, base, rtol=1e-12, atol=1e-12)


def test_growing_changes_are_reported_as_no_convergence():
    n = disc("example1", 0.25).mesh.n_nodes
    base = np.ones(n, dtype=complex)
    with pytest.raises(NoConvergenceError):
        lap_extrapolate(_runs([base, 1.1 * base, 1.5 * base]))


def test_extrapolation_needs_halving_schedule():
    n = disc("example1", 0.25).mesh.n_nodes
    v = np.ones(n)
    with pytest.raises(ConfigurationError):
        lap_extrapolate(_runs([v, v]))
    with pytest.raises(ConfigurationError):
        lap_extrapolate(_runs([v, v, v], eps=(3e-2, 2e-2, 1e-2)))


def test_limit_matches_cci_up_to_the_discretization_gap():
    # no propagating modes: small damping needs only a short strip; the two
    # methods use different finite element spaces, so they agree up to O(h²)
    gaps = []
    for h in (0.1, 0.05):
        prob = disc("remark2", h).problem
        runs = [damped_truncated_solve(prob, e, None, h) for e in (4e-3, 2e-3, 1e-3)]
        ex = lap_extrapolate(runs)
        u = cci_solve(prob, h, 128, disc=disc("remark2", h)).field
        gaps.append(u.rel_l2_diff(ex.field))
    print("oracle/cci gaps", gaps)
    assert gaps[0] / gaps[1] > 3.0


def test_cutoff_frequency_is_excluded():
    modes = analytic_constant_modes(1.0, np.pi)
    assert modes.cutoff_orders == (1,)
    assert [md.m for md in modes.modes] == [0, 0]
    assert np.allclose(sorted(modes.lambdas), [-1.0, 1.0])


def test_below_first_cutoff_one_pair_per_boundary_condition():
    modes = analytic_constant_modes(2.0, 2.0)
    assert len(modes.modes) == 2
    assert np.allclose(modes.exceptional, [-np.sqrt(8.0), np.sqrt(8.0)])
    assert len(analytic_constant_modes(2.0, 2.0, bc="dirichlet").modes) == 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 4.0), st.floats(0.5, 6.0), st.sampled_from(["neumann", "dirichlet"]))
def test_closed_form_modes_are_normalized(n0, k, bc):
    modes = analytic_constant_modes(n0, k, bc)
    x2 = (np.arange(4000) + 0.5) / 4000
    for md in modes.modes:
        assert -np.pi < md.beta <= np.pi
        assert md.lam == pytest.approx(md.beta_unwrapped / (k * n0))
        norm = 2 * k * n0 * np.mean(np.abs(md(0.3, x2)) ** 2)
        assert norm == pytest.approx(1.0, rel=1e-6)
    assert list(modes.exceptional) == sorted(modes.exceptional)
