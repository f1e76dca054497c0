import dataclasses

import numpy as np
import pytest

from lapguide.cci import monolithic_matrix, solve_block_arrow, solve_monolithic
from lapguide.contours import TrigGrid, build_shifted_line
from lapguide.decomposition import (ModeProjection, assemble_decomp_system, build_g_functions, decomp_solve,
                                    mode_pairing_matrix, outgoing_part)
from lapguide.errors import StandingWaveError
from lapguide.fem import load_operator
from lapguide.problem import RadialSpec, radial_field, zero_field

from conftest import disc, problem


def _projection(d):
    gf = build_g_functions(d.spectral.flat_modes(), d.mesh, d.basis)
    return ModeProjection(gf, mode_pairing_matrix(gf))


def test_example1_has_two_outgoing_modes_one_per_direction():
    proj = _projection(disc("example1", 0.05))
    assert len(proj.gfuncs) == 2
    assert sorted(np.sign([g.lam for g in proj.gfuncs])) == [-1, 1]
    for g in proj.gfuncs:
        assert g.cell == g.ramp.sign == np.sign(g.lam)


def test_ramps_are_flat_outside_their_cell():
    for g in _projection(disc("example1", 0.1)).gfuncs:
        x = np.linspace(-3, 3, 601)
        inside = (g.ramp.sign * x > 0.5) & (g.ramp.sign * x < 1.5)
        d1, d2 = g.ramp.derivatives(x[~inside])
        assert np.all(d1 == 0) and np.all(d2 == 0)
        assert np.all(g.ramp(x[g.ramp.sign * x <= 0.5]) == 0)
        assert np.all(g.ramp(x[g.ramp.sign * x >= 1.5]) == 1)


def test_full_field_equals_remainder_on_the_central_cell():
    d = disc("example1", 0.1)
    proj = _projection(d)
    assert np.all(outgoing_part(proj.gfuncs, np.ones(2), d.mesh, d.basis, 0) == 0)
    assert np.any(outgoing_part(proj.gfuncs, np.ones(2), d.mesh, d.basis, 2) != 0)


def test_pairing_modulus_approaches_group_velocity_at_second_order():
    gaps = []
    for h in (0.05, 0.02, 0.01):
        proj = _projection(disc("example1", h))
        lam = np.abs([g.lam for g in proj.gfuncs])
        gaps.append(np.max(np.abs(np.abs(np.diag(proj.pairing)) - lam)))
        off = proj.pairing - np.diag(np.diag(proj.pairing))
        assert np.max(np.abs(off)) < 1e-3
    print("pairing gaps", gaps)
    rate = np.log(gaps[0] / gaps[2]) / np.log(5.0)
    assert rate > 1.8


@pytest.mark.xfail(strict=True, reason="|Γ_mm| - |λ| is 1.5e-4 at h=0.01; the 1e-4 level is reached near h=0.005")
def test_pairing_modulus_within_1e4_at_h001():
    proj = _projection(disc("example1", 0.01))
    lam = np.abs([g.lam for g in proj.gfuncs])
    assert np.max(np.abs(np.abs(np.diag(proj.pairing)) - lam)) < 1e-4


def test_calibrated_weight_sign():
    assert _projection(disc("example1", 0.05)).weight_sign == -1


def test_projected_source_is_orthogonal_to_every_mode():
    d = disc("example1", 0.05)
    proj = _projection(d)
    other = radial_field(RadialSpec((-0.2, 0.3), 0.05, 0.2, plateau=3.0), periodic=False)
    for load in (d.f_load, load_operator(d.mesh, d.basis, other)):
        before = proj.mode_inner(load)
        projected, w = proj.project(load)
        after = proj.mode_inner(projected)
        assert np.all(np.abs(before) > 0) and np.all(np.abs(w) > 0)
        assert np.max(np.abs(after)) < 1e-12 * np.max(np.abs(before))
        a = 0.3 + 0.1j
        assert np.linalg.norm(projected(a) - load(a)) > 0


def test_source_orthogonal_to_the_modes_is_left_alone():
    d = disc("example1", 0.05)
    proj = _projection(d)
    projected, w = proj.project(lambda a: np.zeros(d.basis.m_prime, dtype=complex))
    assert np.all(w == 0) and np.all(projected(0.4) == 0)


def test_unperturbed_problem_has_no_coupling_unknowns():
    prob = dataclasses.replace(problem("example1"), q=zero_field(), name="noq")
    sol = decomp_solve(prob, 0.1, 32)
    proj = _projection(disc("example1", 0.1))
    f0 = proj.weights(disc("example1", 0.1).f_load)
    assert np.all(sol.coeffs_C == 0)
    assert np.allclose(sol.amplitudes_f, f0, rtol=1e-12)
    assert sol.report["patch_size"] == 0


def test_tiny_instance_layout_and_schur_against_monolithic():
    d = disc("example1", 0.125)  # coarsest of the tried meshes that still has propagating modes
    proj = _projection(d)
    system, f0 = assemble_decomp_system(d, build_shifted_line(0.2), TrigGrid(4), proj)
    N, m, I, p = system.N, system.m_prime, system.n_extra, len(system.patch)
    assert I == len(proj.gfuncs) == 2
    K, rhs = monolithic_matrix(system)
    assert K.shape == (N * m + I + p,) * 2
    assert np.allclose(K[N * m:N * m + I, N * m:N * m + I].toarray(), np.eye(I))
    assert K[N * m:N * m + I, :N * m].nnz == 0
    schur = solve_block_arrow(system, d.mesh, d.basis)
    mono = solve_monolithic(system, d.mesh, d.basis)
    assert np.linalg.norm(schur.field.values - mono.field.values) <= 1e-10 * np.linalg.norm(mono.field.values)
    assert np.allclose(schur.extra, mono.extra, rtol=1e-10, atol=0)


def test_remainder_decays_away_from_the_perturbation():
    d = disc("example1", 0.1)
    sol = decomp_solve(d.problem, 0.1, 64, disc=d, cells=(-4, -3, -2, 0, 2, 3, 4))
    norms = {c: sol.u1[c].l2_norm() for c in sol.u1}
    assert norms[3] < norms[0] and norms[-3] < norms[0]
    for side in (1, -1):
        assert norms[4 * side] < norms[3 * side] < norms[2 * side]
    assert all(np.isfinite(sol.amplitudes_f)) and all(np.isfinite(sol.coeffs_C))


def test_shift_dependence_vanishes_with_the_mesh():
    # the discrete integrand is 2π-periodic in Re α only up to O(h²), so the
    # side edges of the shifted rectangle cancel only up to that order
    gaps = []
    for h in (0.05, 0.025):
        d = disc("example1", h)
        a, b = (decomp_solve(d.problem, h, 64, sigma=s, disc=d) for s in (0.15, 0.25))
        gaps.append(a.field.rel_l2_diff(b.field))
    print("sigma gaps", gaps)
    assert gaps[1] < 1e-3
    assert gaps[0] / gaps[1] > 3.0


def test_zero_source_gives_zero_field_and_amplitudes():
    prob = dataclasses.replace(problem("example1"), f=zero_field(), name="nosource")
    sol = decomp_solve(prob, 0.1, 16, cells=(0, 2))
    assert np.all(sol.amplitudes_f == 0)
    for fc in sol.fields.values():
        assert np.max(np.abs(fc.values)) == 0.0


def test_zero_group_velocity_mode_is_rejected():
    d = disc("example1", 0.1)
    beta, _, phi = d.spectral.flat_modes()[0]
    with pytest.raises(StandingWaveError):
        build_g_functions([(beta, 0.0, phi)], d.mesh, d.basis)
