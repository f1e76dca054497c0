import dataclasses
import json

import numpy as np
import pytest
import scipy.sparse as sp

from lapguide.cci import (assemble_cci_system, cci_solve, discretize, format_report, monolithic_matrix,
                          solve_block_arrow, solve_monolithic, write_field_csv)
from lapguide.contours import TrigGrid, build_cci_contour, reconstruct_field
from lapguide.errors import SupportError, TrappedModeError
from lapguide.fem import solve_cell
from lapguide.problem import RadialSpec, construct_trapped_mode_perturbation, radial_field, zero_field

from conftest import disc, problem


def test_unperturbed_decouples_into_independent_cell_problems():
    d = disc("remark2", 0.1)
    sol = cci_solve(d.problem, 0.1, 16, disc=d, keep_bloch=True)
    alphas, dalphas = sol.contour.nodes(sol.grid)
    W = np.array([solve_cell(d.pencil, a, d.k, da * d.f_load(a)) for a, da in zip(alphas, dalphas)])
    direct = reconstruct_field(W, sol.contour, sol.grid, d.mesh, d.basis)
    assert np.linalg.norm(sol.field.values - direct.values) <= 1e-12 * np.linalg.norm(direct.values)
    assert sol.report["patch_size"] == 0


def test_schur_elimination_matches_monolithic_solve():
    d = disc("example1", 0.25)
    spec = d.spectral
    contour = build_cci_contour(spec.s_plus, spec.s_minus, 0.2)
    system = assemble_cci_system(d, contour, TrigGrid(4))
    schur = solve_block_arrow(system, d.mesh, d.basis, cells=(-1, 0, 1))
    mono = solve_monolithic(system, d.mesh, d.basis, cells=(-1, 0, 1))
    for c in (-1, 0, 1):
        a, b = schur.fields[c].values, mono.fields[c].values
        assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)
    assert np.linalg.norm(schur.patch_values - mono.patch_values) <= 1e-10 * np.linalg.norm(mono.patch_values)


def test_block_arrow_layout():
    d = disc("example1", 0.25)
    spec = d.spectral
    system = assemble_cci_system(d, build_cci_contour(spec.s_plus, spec.s_minus, 0.2), TrigGrid(4))
    K, rhs = monolithic_matrix(system)
    N, m, p = system.N, system.m_prime, len(system.patch)
    assert K.shape == (N * m + p, N * m + p) and rhs.shape == (N * m + p,)
    K = sp.csr_matrix(K)
    for i in range(N):
        for j in range(N):
            if i != j:
                assert K[i * m:(i + 1) * m, j * m:(j + 1) * m].nnz == 0
        # the coupling to U only touches the patch rows of each cell block
        C = K[i * m:(i + 1) * m, N * m:].tocoo()
        assert set(C.row) <= set(d.q_mass.support_dofs())
    assert np.allclose(K[N * m:, N * m:].toarray(), np.eye(p))
    assert np.all(rhs[N * m:] == 0)


def test_every_node_sees_a_nonzero_load():
    # the smoothing reparameterization has s' = 0 at the path ends, so the
    # scaled load vanishes exactly there and nowhere else
    d = disc("example1", 0.25)
    spec = d.spectral
    system = assemble_cci_system(d, build_cci_contour(spec.s_plus, spec.s_minus, 0.2), TrigGrid(8))
    raw = np.array([np.linalg.norm(system.load(a)) for a in system.alphas])
    assert np.all(raw > 0)
    assert np.max(np.abs(np.diff(raw))) < 0.1 * raw.max()
    for l in range(system.N):
        assert (np.linalg.norm(system.rhs(l)) > 0) == (abs(system.dalphas[l]) > 0)


def test_zero_source_gives_zero_field():
    prob = dataclasses.replace(problem("example1"), f=zero_field(), name="nosource")
    sol = cci_solve(prob, 0.1, 16, delta=0.2)
    assert np.max(np.abs(sol.field.values)) == 0.0


def test_contour_shape_does_not_change_the_field():
    # with no propagating modes the straight line is admissible, and so is any
    # deformation staying inside the analyticity strip
    d = disc("remark2", 0.1)
    straight = cci_solve(d.problem, 0.1, 256, disc=d, contour=build_cci_contour([], []))
    bent = cci_solve(d.problem, 0.1, 256, disc=d, contour=build_cci_contour([1.5], [-1.5], 0.2))
    assert straight.field.rel_l2_diff(bent.field) < 1e-8


def test_quadrature_convergence_is_faster_than_any_power():
    d = disc("example1", 0.05)
    ref = cci_solve(d.problem, 0.05, 256, delta=0.2, disc=d).field
    errs = [ref.rel_l2_diff(cci_solve(d.problem, 0.05, N, delta=0.2, disc=d).field) for N in (16, 32, 64, 128)]
    print("N-errors", errs)
    gains = [a / b for a, b in zip(errs, errs[1:])]
    assert errs[-1] < 1e-5
    assert all(b > a > 1.0 for a, b in zip(gains, gains[1:]))


def test_trapped_mode_is_reported():
    base = problem("remark2")
    u = cci_solve(base, 0.1, 16).field
    q = construct_trapped_mode_perturbation(u, base.f, base.k)
    with pytest.raises(TrappedModeError):
        cci_solve(dataclasses.replace(base, q=q, name="trapped"), 0.1, 16)


def test_perturbation_touching_the_periodic_boundary_is_rejected():
    q = radial_field(RadialSpec((0.45, 0.5), 0.02, 0.08, plateau=1.0), periodic=False)
    prob = dataclasses.replace(problem("example1"), q=q, name="edge_q")
    with pytest.raises(SupportError):
        cci_solve(prob, 0.1, 8, delta=0.2)


def test_report_and_field_export(tmp_path):
    d = disc("example1", 0.1)
    sol = cci_solve(d.problem, 0.1, 16, delta=0.2, disc=d, cells=(-1, 0, 1))
    rep = json.loads(format_report(sol.report))
    assert rep["method"] == "cci" and rep["N"] == 16 and rep["delta"] == 0.2
    assert len(rep["s_plus"]) == len(sol.spectral.s_plus)
    path = tmp_path / "u.csv"
    write_field_csv(path, sol.fields)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (3 * d.mesh.n_nodes, 5)
    mid = data[data[:, 0] == 0]
    assert np.allclose(mid[:, 3] + 1j * mid[:, 4], sol.field.values, rtol=1e-11, atol=1e-14)
    assert np.allclose(data[data[:, 0] == 1][:, 1], d.mesh.vertices[:, 0] + 1)
