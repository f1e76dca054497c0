"""Decomposition method: outgoing modes split off, decaying remainder on a shifted line.

The field is written u = u1 + Σ_m f_m ψ_m φ_m, with ψ_m the ramp ψ+ for
rightward modes (λ > 0) and ψ- for leftward ones. Since
(Δ + k²n)(ψφ) = g := 2ψ'∂1φ + ψ''φ, the remainder satisfies

    Δu1 + k²n u1 = M(f - k² q u1),   M(r) = r - Σ_m w_m(r) g_m,

where the weights w(r) = Γ⁻¹ (∫ r conj(φ_m'))_m' with Γ_{m'm} = ∫ g_m conj(φ_m')
make M(r) orthogonal to every propagating mode. Then the transform of u1 has
no real singularities and the inverse transform can be taken on the line
Im α = σ. The amplitudes are f_m = w_m(f - k² q u1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cci import (BlockArrowSystem, CellDiscretization, discretize, format_report, patch_dofs,
                  solve_block_arrow)
from .contours import DEFAULT_SIGMA, TrigGrid, build_shifted_line, check_contour_clearance
from .errors import ConfigurationError, StandingWaveError
from .fem import _QP_BARY, CellMesh, ElementData, FieldOnCell, LoadOperator, PeriodicBasis, load_operator_from_qp
from .problem import Ramp, ScatteringProblem
from .spectral import LAMBDA_TOL


@dataclass(frozen=True, eq=False)
class GFunction:
    """g = 2ψ'∂1φ + ψ''φ for one mode, sampled at the quadrature points of the cell it lives on."""

    beta: float
    lam: float
    phi_hat: np.ndarray   # (M',) periodic part of the mode
    ramp: Ramp
    cell: int
    values_qp: np.ndarray  # (T, 3)
    load: LoadOperator     # α -> -∫ e^{-iα x1} g ζ_j, Bloch-summed over the ramp cell

    def nodal(self, mesh: CellMesh) -> np.ndarray:
        """Lumped L² projection of g onto the nodes of its cell (for export)."""
        ed = ElementData.of(mesh)
        num = np.zeros(mesh.n_nodes, dtype=complex)
        den = np.zeros(mesh.n_nodes)
        for q in range(3):
            for a in range(3):
                w = ed.qw[:, q] * _QP_BARY[q, a]
                np.add.at(num, mesh.triangles[:, a], w * self.values_qp[:, q])
                np.add.at(den, mesh.triangles[:, a], w)
        return num / den


def _mode_at_qp(mesh: CellMesh, basis: PeriodicBasis, phi_hat: np.ndarray, ed: ElementData):
    nodal = np.where(basis.dof_of_node >= 0, phi_hat[np.maximum(basis.dof_of_node, 0)], 0.0)
    tri_vals = nodal[mesh.triangles]
    at_qp = np.einsum("qa,ta->tq", _QP_BARY, tri_vals)
    d1 = np.einsum("ta,ta->t", ed.grad[:, :, 0], tri_vals)
    return at_qp, d1


def build_g_functions(modes: Sequence[tuple], mesh: CellMesh, basis: PeriodicBasis) -> list[GFunction]:
    """One GFunction per (β, λ, φ̂) triple; the sign of λ picks ψ+ or ψ-."""
    ed = ElementData.of(mesh)
    out = []
    for beta, lam, phi_hat in modes:
        if abs(lam) < LAMBDA_TOL:
            raise StandingWaveError(f"mode at β={beta:.6g} has zero group velocity")
        ramp = Ramp(1 if lam > 0 else -1)
        (cell,) = ramp.ramp_cells
        phq, d1 = _mode_at_qp(mesh, basis, phi_hat, ed)
        x1 = ed.qp[..., 0] + cell
        d_psi, dd_psi = ramp.derivatives(x1)
        e = np.exp(1j * beta * x1)
        phi = e * phq
        dphi = e * (1j * beta * phq + d1[:, None])
        g = 2 * d_psi * dphi + dd_psi * phi
        load = load_operator_from_qp(mesh, basis, g, cell, ed)
        out.append(GFunction(float(beta), float(lam), phi_hat, ramp, cell, g, load))
    return out


def mode_pairing_matrix(gfuncs: Sequence[GFunction]) -> np.ndarray:
    """Γ_{m'm} = ∫ g_m conj(φ_m') = -φ̂_m'ᴴ load_m(β_m'), with the discrete quadrature."""
    I = len(gfuncs)
    G = np.empty((I, I), dtype=complex)
    for mp, gp in enumerate(gfuncs):
        for m, g in enumerate(gfuncs):
            G[mp, m] = -np.vdot(gp.phi_hat, g.load(gp.beta))
    return G


@dataclass(eq=False)
class ModeProjection:
    """M(r) = r - Σ w_m(r) g_m for fields given through their load operator."""

    gfuncs: list
    pairing: np.ndarray  # Γ

    def mode_inner(self, load_of_r) -> np.ndarray:
        """(∫ r conj(φ_m))_m from a load map α -> -∫ e^{-iαx1} r ζ."""
        return np.array([-np.vdot(g.phi_hat, load_of_r(g.beta)) for g in self.gfuncs])

    def weights(self, load_of_r) -> np.ndarray:
        return np.linalg.solve(self.pairing, self.mode_inner(load_of_r))

    def project(self, load_of_r):
        w = self.weights(load_of_r)

        def projected(alpha):
            out = np.array(load_of_r(alpha), dtype=complex)
            for wm, g in zip(w, self.gfuncs):
                out -= wm * g.load(alpha)
            return out

        return projected, w

    @property
    def weight_sign(self) -> int:
        """-1 when the diagonal weights are -i/|λ| (so Γ_mm ≈ +i|λ|), +1 for +i/|λ|."""
        lam = np.abs([g.lam for g in self.gfuncs])
        diag = np.diag(np.linalg.inv(self.pairing)) * lam / 1j
        return int(np.sign(np.mean(diag.real))) if len(diag) else 0


def apply_M(load_of_r, projection: ModeProjection):
    """Load map of M(r) and the weights used."""
    return projection.project(load_of_r)


def assemble_decomp_system(disc: CellDiscretization, gline, grid: TrigGrid,
                           projection: ModeProjection) -> tuple[BlockArrowSystem, np.ndarray]:
    """Block system over (V_l, c, U1_P); returns it with the weights f0 = w(f)."""
    alphas, dalphas = gline.nodes(grid)
    lf0, f0 = projection.project(disc.f_load)
    gf = projection.gfuncs
    q_mass = None if disc.problem.q.is_zero else disc.q_mass
    P = patch_dofs(disc.mesh, disc.basis, q_mass) if q_mass is not None else np.zeros(0, dtype=np.int64)
    extra_load = extra_rows = None
    if len(gf) and len(P):
        def extra_load(alpha):
            return np.column_stack([g.load(alpha) for g in gf])

        # c = Γ⁻¹ (∫ q u1 conj(φ_m'))_m' = Γ⁻¹ Φ U1_P, Φ_m' = φ̂_m'ᴴ Q(β_m')
        Phi = np.vstack([(g.phi_hat.conj() @ q_mass(g.beta).tocsc()[:, P]) for g in gf])
        extra_rows = np.linalg.solve(projection.pairing, Phi)
    system = BlockArrowSystem(disc.pencil, disc.k, alphas, dalphas, lf0, q_mass, P,
                              disc.basis.dof_coords(disc.mesh), extra_load, extra_rows)
    return system, f0


@dataclass(eq=False)
class DecompSolution:
    u1: dict               # cell -> FieldOnCell
    fields: dict           # cell -> FieldOnCell of the full field u1 + Σ f ψ φ
    coeffs_C: np.ndarray   # c = w(q u1)
    amplitudes_f: np.ndarray
    gfuncs: list
    report: dict

    @property
    def field(self) -> FieldOnCell:
        return self.fields[0]


def outgoing_part(gfuncs: Sequence[GFunction], amplitudes: np.ndarray, mesh: CellMesh,
                  basis: PeriodicBasis, cell: int) -> np.ndarray:
    """Σ_m f_m ψ_m φ_m at the nodes of Ω_cell."""
    x1 = mesh.vertices[:, 0] + cell
    dof = basis.dof_of_node
    out = np.zeros(mesh.n_nodes, dtype=complex)
    for fm, g in zip(amplitudes, gfuncs):
        psi = g.ramp(x1)
        if not np.any(psi):
            continue
        phi = np.where(dof >= 0, g.phi_hat[np.maximum(dof, 0)], 0.0) * np.exp(1j * g.beta * x1)
        out += fm * psi * phi
    return out


def decomp_solve(prob: ScatteringProblem, h: float, N: int, sigma: float = DEFAULT_SIGMA,
                 cells: Sequence[int] = (0,), disc: Optional[CellDiscretization] = None,
                 keep_bloch: bool = False, pattern: str = "equilateral") -> DecompSolution:
    if disc is None:
        disc = discretize(prob, h, pattern)
    elif abs(disc.h - h) > 1e-12 or disc.problem is not prob:
        raise ConfigurationError("the supplied discretization does not match (problem, h)")
    grid = TrigGrid(N)
    spec = disc.spectral
    gline = build_shifted_line(sigma)
    check_contour_clearance(gline, spec.spectrum.eigenvalues)
    gfuncs = build_g_functions(spec.flat_modes(), disc.mesh, disc.basis)
    projection = ModeProjection(gfuncs, mode_pairing_matrix(gfuncs))
    system, f0 = assemble_decomp_system(disc, gline, grid, projection)
    sol = solve_block_arrow(system, disc.mesh, disc.basis, cells, keep_bloch)
    c = sol.extra if len(sol.extra) else np.zeros(len(gfuncs), dtype=complex)
    amplitudes = f0 - prob.k_squared * c
    fields = {}
    for cidx, u1 in sol.fields.items():
        fields[cidx] = FieldOnCell(disc.mesh, u1.values + outgoing_part(gfuncs, amplitudes, disc.mesh,
                                                                     disc.basis, cidx), cidx)
    report = dict(sol.report)
    report.update({
        "method": "decomposition", "problem": prob.name, "h": disc.h, "k_squared": prob.k_squared,
        "bc": prob.bc, "sigma": sigma, "weight_sign": projection.weight_sign,
        "modes": [{"beta": g.beta, "lambda": g.lam, "amplitude": complex(a)} for g, a in zip(gfuncs, amplitudes)],
    })
    return DecompSolution(sol.fields, fields, c, amplitudes, gfuncs, report)


__all__ = ["GFunction", "build_g_functions", "mode_pairing_matrix", "ModeProjection", "apply_M",
           "assemble_decomp_system", "DecompSolution", "decomp_solve", "outgoing_part", "format_report"]
