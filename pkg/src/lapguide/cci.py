"""Coupled quasimomentum block system and the complex-contour (CCI) solver.

Both solvers in this package lead to the same block-arrow layout: one cell
problem per quadrature node s_l,

    A_l W_l + E_l c + C_l U = F_l,          l = 1..N
    c - D U = 0                              (optional extra unknowns)
    U - Σ_l B_l W_l = 0,

with A_l = A(s_l, k), C_l = -k² s'_l Q(s_l) (Q the e^{-iαx1}-modulated
q-mass) and B_l = diag(e^{i s_l x1}) / (2πN). C_l only touches the DOFs
in the support of q (the patch P), so only U restricted to P is a genuine
unknown; the rest of the field is reconstructed from W afterwards.

Elimination: with (A_l⁻¹)_PP applied through the small patch factor plus a
dense interface correction, the reduced system

    (I + Σ_l B_l,P (A_l⁻¹)_PP C_l,PP + U^E D) U_P = Σ_l B_l,P (A_l⁻¹ F_l)_P

is formed densely (small patches) or solved by GMRES. Nodes that are
mirror images (s_{N-l} = -s_l or -conj(s_l)) share one factorization,
because A(-α) = A(α)ᵀ and A(-conj α) = conj(A(α)).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .contours import ContourParam, TrigGrid, build_cci_contour, check_contour_clearance
from .errors import (ConfigurationError, ContourConfigurationError, LapGuideError,
                     SingularCellProblemError, SupportError, TrappedModeError)
from .fem import (SINGULAR_RCOND, CellMesh, FieldOnCell, LoadOperator, ModulatedMass,
                  PencilMatrices, PeriodicBasis, assemble_pencil, build_cell_mesh, load_operator,
                  OrderedFactor, modulated_mass, nested_dissection, ordered_factor, rcond_estimate,
                  splu)
from .problem import ScatteringProblem
from .spectral import SpectralData, analyze_spectrum

DENSE_PATCH_LIMIT = 300
TRAPPED_RCOND = 1e-9
GMRES_TOL = 1e-12
SOLVE_CHUNK = 64


# ---------------------------------------------------------------------------
# shared discretization


@dataclass(eq=False)
class CellDiscretization:
    """Mesh, DOF numbering and pencil for one problem and mesh size; spectral data on demand."""

    problem: ScatteringProblem
    mesh: CellMesh
    basis: PeriodicBasis
    pencil: PencilMatrices
    _spectral: Optional[SpectralData] = None

    @property
    def k(self) -> float:
        return self.problem.k

    @property
    def h(self) -> float:
        return self.mesh.h

    @property
    def spectral(self) -> SpectralData:
        if self._spectral is None:
            self._spectral = analyze_spectrum(self.pencil, self.k)
        return self._spectral

    @cached_property
    def f_load(self) -> LoadOperator:
        return load_operator(self.mesh, self.basis, self.problem.f, 0)

    @cached_property
    def q_mass(self) -> ModulatedMass:
        return modulated_mass(self.mesh, self.basis, self.problem.q)


def discretize(prob: ScatteringProblem, h: float, pattern: str = "equilateral") -> CellDiscretization:
    prob.check()
    mesh, basis = build_cell_mesh(h, prob.bc, pattern)
    return CellDiscretization(prob, mesh, basis, assemble_pencil(mesh, basis, prob.n))


# ---------------------------------------------------------------------------
# block system


@dataclass(eq=False)
class BlockArrowSystem:
    pencil: PencilMatrices
    k: float
    alphas: np.ndarray            # (N,) quadrature nodes s(t_l)
    dalphas: np.ndarray           # (N,) s'(t_l)
    load: Callable                # α -> (M',) unscaled load
    q_mass: Optional[ModulatedMass]
    patch: np.ndarray             # DOFs in the support of q
    dof_coords: np.ndarray        # (M', 2) coordinates of each DOF's representative node
    extra_load: Optional[Callable] = None   # α -> (M', I) columns coupling to c (unscaled)
    extra_rows: Optional[np.ndarray] = None  # (I, |P|): c = D U_P

    @property
    def N(self) -> int:
        return len(self.alphas)

    @property
    def m_prime(self) -> int:
        return self.pencil.m_prime

    @property
    def n_extra(self) -> int:
        return 0 if self.extra_rows is None else self.extra_rows.shape[0]

    def rhs(self, l: int) -> np.ndarray:
        return self.dalphas[l] * self.load(self.alphas[l])

    def coupling(self, l: int) -> sp.csr_matrix:
        """C_l restricted to the patch columns, all rows (M' x |P|)."""
        if self.q_mass is None or len(self.patch) == 0:
            return sp.csr_matrix((self.m_prime, len(self.patch)), dtype=complex)
        Q = self.q_mass(self.alphas[l]).tocsc()[:, self.patch]
        return (-self.k**2 * self.dalphas[l]) * Q.tocsr()

    def extra(self, l: int) -> np.ndarray:
        if self.extra_load is None:
            return np.zeros((self.m_prime, 0), dtype=complex)
        return (-self.k**2 * self.dalphas[l]) * self.extra_load(self.alphas[l])

    def phases(self, l: int, dofs: np.ndarray) -> np.ndarray:
        return np.exp(1j * self.alphas[l] * self.dof_coords[dofs, 0]) / (2 * np.pi * self.N)


def patch_dofs(mesh: CellMesh, basis: PeriodicBasis, q_mass: ModulatedMass) -> np.ndarray:
    P = q_mass.support_dofs()
    if len(P):
        side = np.concatenate([mesh.nodes_tagged("left"), mesh.nodes_tagged("right")])
        side_dofs = basis.dof_of_node[side]
        if np.intersect1d(P, side_dofs[side_dofs >= 0]).size:
            raise SupportError("q must vanish on the elements touching the periodic boundary")
    return P


def assemble_cci_system(disc: CellDiscretization, contour: ContourParam, grid: TrigGrid) -> BlockArrowSystem:
    alphas, dalphas = contour.nodes(grid)
    if contour.delta is not None:
        for b in disc.spectral.all_betas:
            if np.min(np.abs(alphas - b)) < 0.5 * contour.delta:
                raise ContourConfigurationError(f"a quadrature node lies within δ/2 of the exceptional value {b:.6g}")
    q_mass = None if disc.problem.q.is_zero else disc.q_mass
    P = patch_dofs(disc.mesh, disc.basis, q_mass) if q_mass is not None else np.zeros(0, dtype=np.int64)
    return BlockArrowSystem(disc.pencil, disc.k, alphas, dalphas, disc.f_load, q_mass, P,
                            disc.basis.dof_coords(disc.mesh))


def monolithic_matrix(system: BlockArrowSystem) -> tuple[sp.csr_matrix, np.ndarray]:
    """Full sparse matrix and right side over unknowns (W_1..W_N, c, U_P)."""
    N, m, p, I = system.N, system.m_prime, len(system.patch), system.n_extra
    blocks = [[None] * (N + 2) for _ in range(N + 2)]
    rhs = []
    for l in range(N):
        blocks[l][l] = system.pencil.matrix(system.alphas[l], system.k)
        if I:
            blocks[l][N] = sp.csr_matrix(system.extra(l))
        if p:
            blocks[l][N + 1] = system.coupling(l)
        rhs.append(system.rhs(l))
    if I:
        blocks[N][N] = sp.identity(I, dtype=complex, format="csr")
        if p:
            blocks[N][N + 1] = sp.csr_matrix(-system.extra_rows)
        rhs.append(np.zeros(I, dtype=complex))
    if p:
        for l in range(N):
            ph = system.phases(l, system.patch)
            blocks[N + 1][l] = sp.csr_matrix((-ph, (np.arange(p), system.patch)), shape=(p, m))
        blocks[N + 1][N + 1] = sp.identity(p, dtype=complex, format="csr")
        rhs.append(np.zeros(p, dtype=complex))
    # sp.bmat needs each block row/column to have a defined size
    keep = [i for i, size in enumerate([m] * N + [I, p]) if size > 0]
    blocks = [[blocks[i][j] for j in keep] for i in keep]
    for i, bi in enumerate(keep):
        if blocks[i][i] is None:
            blocks[i][i] = sp.csr_matrix(([m] * N + [I, p])[bi], ([m] * N + [I, p])[bi])
    return sp.bmat(blocks, format="csr"), np.concatenate(rhs)


# ---------------------------------------------------------------------------
# solution


@dataclass(eq=False)
class ArrowSolution:
    fields: dict            # cell index -> FieldOnCell
    extra: np.ndarray       # c
    patch_values: np.ndarray
    bloch: Optional[np.ndarray]  # (N, M') coefficients W_l, if kept
    report: dict = field(default_factory=dict)

    @property
    def field(self) -> FieldOnCell:
        return self.fields[0]


def node_pairs(alphas: np.ndarray, tol: float = 1e-12) -> list[tuple[int, Optional[int], str]]:
    """(base, partner, relation) with relation 'T' for s_partner = -s_base and 'C' for -conj(s_base)."""
    N = len(alphas)
    mirror = alphas[N - 2 - np.arange(N - 1)]  # s_{N-l} for l = 1..N-1
    base = alphas[:N - 1]
    scale = tol * (1 + np.abs(base))
    if np.all(np.abs(mirror + base) <= scale):
        rel = "T"
    elif np.all(np.abs(mirror + np.conj(base)) <= scale):
        rel = "C"
    else:
        return [(i, None, "") for i in range(N)]
    out = [(i, N - 2 - i, rel) for i in range(N // 2 - 1)]
    out += [(N // 2 - 1, None, ""), (N - 1, None, "")]
    return out


def _solve(lu, b: np.ndarray, rel: str) -> np.ndarray:
    b = np.asarray(b, dtype=complex)
    if rel == "T":
        return lu.solve(b, trans="T")
    if rel == "C":
        return np.conj(lu.solve(np.conj(b)))
    return lu.solve(b)


def _apply(A: sp.spmatrix, x: np.ndarray, rel: str) -> np.ndarray:
    if rel == "T":
        return A.T @ x
    if rel == "C":
        return np.conj(A @ np.conj(x))
    return A @ x


@dataclass(eq=False)
class _PatchInverse:
    """(A⁻¹)_PP = A_PP⁻¹ + A_PP⁻¹ A_PG T A_GP A_PP⁻¹ with T = (A⁻¹)_GG on the interface G."""

    lu_pp: object
    a_pg: sp.csr_matrix
    a_gp: sp.csr_matrix
    t_gg: np.ndarray

    def apply(self, b: np.ndarray, rel: str = "") -> np.ndarray:
        if rel == "C":
            return np.conj(self.apply(np.conj(b)))
        if rel == "T":
            y = self.lu_pp.solve(b, trans="T")
            return y + self.lu_pp.solve(self.a_gp.T @ (self.t_gg.T @ (self.a_pg.T @ y)), trans="T")
        y = self.lu_pp.solve(b)
        return y + self.lu_pp.solve(self.a_pg @ (self.t_gg @ (self.a_gp @ y)))


def interface_dofs(pencil: PencilMatrices, patch: np.ndarray) -> np.ndarray:
    cols = pencil._pattern[:, patch]
    rows = np.unique(cols.indices)
    return np.setdiff1d(rows, patch)


def factor_ordering(pencil: PencilMatrices, coords: np.ndarray, last: np.ndarray) -> np.ndarray:
    """Nested dissection of everything except ``last``, which is numbered at the end."""
    m = pencil.m_prime
    rest = np.setdiff1d(np.arange(m), last)
    graph = pencil._pattern[rest][:, rest]
    return np.concatenate([rest[nested_dissection(graph, coords[rest])], last]).astype(np.int64)


def _factor(A: sp.csc_matrix, perm: np.ndarray, alpha: complex, check: bool) -> OrderedFactor:
    try:
        lu = ordered_factor(A, perm)
    except RuntimeError as exc:
        raise SingularCellProblemError(alpha, 0.0) from exc
    if check:
        rc = rcond_estimate(A, lu)
        if rc < SINGULAR_RCOND:
            raise SingularCellProblemError(alpha, rc)
    return lu


def _interface_block(lu: OrderedFactor, G: np.ndarray, m: int) -> np.ndarray:
    """(A⁻¹)_GG: inverse of the trailing Schur complement, or column solves as a fallback."""
    S = lu.trailing_schur(len(G))
    if S is not None and np.array_equal(lu.perm[len(lu.perm) - len(G):], G):
        return np.linalg.inv(S)
    T = np.empty((len(G), len(G)), dtype=complex)
    for s in range(0, len(G), SOLVE_CHUNK):
        cols = G[s:s + SOLVE_CHUNK]
        E = np.zeros((m, len(cols)), dtype=complex)
        E[cols, np.arange(len(cols))] = 1.0
        T[:, s:s + len(cols)] = lu.solve(E)[G]
    return T


def solve_block_arrow(system: BlockArrowSystem, mesh: CellMesh, basis: PeriodicBasis,
                      cells: Sequence[int] = (0,), keep_bloch: bool = False,
                      dense_limit: Optional[int] = None, check_cells: bool = True) -> ArrowSolution:
    """Eliminate the per-node blocks onto the patch unknowns, then back-substitute."""
    dense_limit = DENSE_PATCH_LIMIT if dense_limit is None else dense_limit
    t0 = time.perf_counter()
    N, m, P, I = system.N, system.m_prime, system.patch, system.n_extra
    p = len(P)
    pairs = node_pairs(system.alphas)
    report = {"N": N, "m_prime": m, "patch_size": p, "n_extra": I,
              "pairing": pairs[0][2] or "none", "factorizations": 0}
    z = np.zeros(0, dtype=complex)
    c = np.zeros(I, dtype=complex)
    checked = False
    coords = system.dof_coords
    G = interface_dofs(system.pencil, P) if p else np.zeros(0, dtype=np.int64)
    perm = factor_ordering(system.pencil, coords, G)
    if p:
        report["interface_size"] = len(G)
        uf = np.zeros(p, dtype=complex)
        ue = np.zeros((p, I), dtype=complex)
        records = []
        for base, partner, rel in pairs:
            A = system.pencil.matrix(system.alphas[base], system.k)
            lu = _factor(A, perm, system.alphas[base], check_cells)
            report["factorizations"] += 1
            App = A[P][:, P].tocsc()
            try:
                lu_pp = splu(App)
            except RuntimeError as exc:
                raise LapGuideError("the cell matrix restricted to supp q is singular") from exc
            inv = _PatchInverse(lu_pp, A[P][:, G].tocsr(), A[G][:, P].tocsr(), _interface_block(lu, G, m))
            for l, r in ((base, ""), (partner, rel)):
                if l is None:
                    continue
                ph = system.phases(l, P)
                uf += ph * _solve(lu, system.rhs(l), r)[P]
                if I:
                    ue += ph[:, None] * _solve(lu, system.extra(l), r)[P]
                records.append((ph, system.coupling(l)[P], inv, r))
        checked = True
        D = system.extra_rows if I else np.zeros((0, p))

        t1 = time.perf_counter()
        if p <= dense_limit:
            K = np.eye(p, dtype=complex) + ue @ D
            for ph, Cpp, inv, r in records:
                K += ph[:, None] * inv.apply(Cpp.toarray(), r)
            sv = sla.svdvals(K)
            report["reduced_rcond"] = float(sv[-1] / sv[0])
            report["reduced_solver"] = "dense"
            if sv[-1] < TRAPPED_RCOND * sv[0]:
                raise TrappedModeError(
                    f"coupled block is numerically singular (σ_min/σ_max = {sv[-1] / sv[0]:.2e}); "
                    "k² is likely an eigenvalue of the perturbed problem")
            z = sla.solve(K, uf)
        else:
            def matvec(v):
                v = np.asarray(v, dtype=complex).ravel()
                out = v + ue @ (D @ v)
                for ph, Cpp, inv, r in records:
                    out += ph * inv.apply(Cpp @ v, r)
                return out

            op = spla.LinearOperator((p, p), matvec=matvec, dtype=complex)
            its = [0]

            def count(_):
                its[0] += 1

            z, info = spla.gmres(op, uf, rtol=GMRES_TOL, atol=0.0, restart=200, maxiter=5,
                                 callback=count, callback_type="pr_norm")
            report["reduced_solver"] = "gmres"
            report["gmres_iterations"] = its[0]
            if info != 0:
                raise TrappedModeError(
                    "GMRES on the coupled block did not converge; the block is likely near-singular")
        c = D @ z
        report["time_reduced_solve"] = time.perf_counter() - t1
        del records

    # back substitution and reconstruction
    dof = basis.dof_of_node
    ok = dof >= 0
    x1 = mesh.vertices[ok, 0]
    acc = {cidx: np.zeros(mesh.n_nodes, dtype=complex) for cidx in cells}
    bloch = np.empty((N, m), dtype=complex) if keep_bloch else None
    max_res = 0.0
    for base, partner, rel in pairs:
        A = system.pencil.matrix(system.alphas[base], system.k)
        lu = _factor(A, perm, system.alphas[base], check_cells and not checked)
        report["factorizations"] += 1
        for l, r in ((base, ""), (partner, rel)):
            if l is None:
                continue
            rhs = system.rhs(l)
            if I:
                rhs = rhs - system.extra(l) @ c
            if p:
                rhs = rhs - system.coupling(l) @ z
            W = _solve(lu, rhs, r)
            W += _solve(lu, rhs - _apply(A, W, r), r)  # one refinement step (pivots are not reordered)
            nr = np.linalg.norm(rhs)
            if nr > 0:
                max_res = max(max_res, np.linalg.norm(_apply(A, W, r) - rhs) / nr)
            if bloch is not None:
                bloch[l] = W
            for cidx, vals in acc.items():
                vals[ok] += np.exp(1j * system.alphas[l] * (x1 + cidx)) * W[dof[ok]]
    scale = 1.0 / (2 * np.pi * N)
    fields = {cidx: FieldOnCell(mesh, vals * scale, cidx) for cidx, vals in acc.items()}
    report["max_cell_residual"] = max_res
    if p and 0 in fields:
        u_patch = fields[0].values[basis.rep_node[P]]
        report["patch_consistency"] = float(np.linalg.norm(u_patch - z) / max(np.linalg.norm(z), 1e-300))
    report["time_total"] = time.perf_counter() - t0
    return ArrowSolution(fields, c, z, bloch, report)


def solve_monolithic(system: BlockArrowSystem, mesh: CellMesh, basis: PeriodicBasis,
                     cells: Sequence[int] = (0,)) -> ArrowSolution:
    """Single sparse solve of the whole block system (cross-check path, small sizes only)."""
    K, rhs = monolithic_matrix(system)
    x = spla.splu(K.tocsc()).solve(rhs)
    N, m, I = system.N, system.m_prime, system.n_extra
    W = x[:N * m].reshape(N, m)
    c = x[N * m:N * m + I]
    z = x[N * m + I:]
    dof = basis.dof_of_node
    ok = dof >= 0
    fields = {}
    for cidx in cells:
        vals = np.zeros(mesh.n_nodes, dtype=complex)
        ph = np.exp(1j * np.multiply.outer(system.alphas, mesh.vertices[ok, 0] + cidx))
        vals[ok] = np.sum(ph * W[:, dof[ok]], axis=0) / (2 * np.pi * N)
        fields[cidx] = FieldOnCell(mesh, vals, cidx)
    return ArrowSolution(fields, c, z, W, {"solver": "monolithic", "size": K.shape[0]})


# ---------------------------------------------------------------------------
# end to end


@dataclass(eq=False)
class CCISolution:
    field: FieldOnCell
    fields: dict
    bloch: Optional[np.ndarray]
    contour: ContourParam
    grid: TrigGrid
    spectral: SpectralData
    report: dict


def cci_solve(prob: ScatteringProblem, h: float, N: int, delta: Optional[float] = None,
              cells: Sequence[int] = (0,), disc: Optional[CellDiscretization] = None,
              contour: Optional[ContourParam] = None, keep_bloch: bool = False,
              pattern: str = "equilateral") -> CCISolution:
    """Spectral analysis, contour, block system, solve; returns u on the requested cells."""
    if disc is None:
        disc = discretize(prob, h, pattern)
    elif abs(disc.h - h) > 1e-12 or disc.problem is not prob:
        raise ConfigurationError("the supplied discretization does not match (problem, h)")
    grid = TrigGrid(N)
    spec = disc.spectral
    if contour is None:
        contour = build_cci_contour(spec.s_plus, spec.s_minus, delta)
    check_contour_clearance(contour, spec.spectrum.eigenvalues)
    system = assemble_cci_system(disc, contour, grid)
    sol = solve_block_arrow(system, disc.mesh, disc.basis, cells, keep_bloch)
    report = dict(sol.report)
    report.update({"method": "cci", "problem": prob.name, "h": disc.h, "k_squared": prob.k_squared,
                   "bc": prob.bc, "delta": contour.delta, "s_plus": list(spec.s_plus),
                   "s_minus": list(spec.s_minus)})
    return CCISolution(sol.field, sol.fields, sol.bloch, contour, grid, spec, report)


def format_report(report: dict) -> str:
    """JSON-style text, one key per line."""
    import json

    def conv(v):
        if isinstance(v, np.ndarray):
            v = v.tolist()
        if isinstance(v, (np.floating, np.integer, np.complexfloating, np.bool_)):
            v = v.item()
        if isinstance(v, complex):
            return [v.real, v.imag]
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {str(k): conv(x) for k, x in v.items()}
        return v

    return json.dumps({k: conv(v) for k, v in report.items()}, indent=1, sort_keys=True)


def write_field_csv(path, fields: dict) -> None:
    """Columns: cell_index, x1, x2, re_u, im_u (x1 in strip coordinates)."""
    rows = []
    for cidx in sorted(fields):
        fc = fields[cidx]
        v = fc.mesh.vertices
        rows.append(np.column_stack([np.full(len(v), cidx), v[:, 0] + cidx, v[:, 1],
                                     fc.values.real, fc.values.imag]))
    np.savetxt(path, np.vstack(rows), delimiter=",", header="cell_index,x1,x2,re_u,im_u",
               comments="", fmt=["%d", "%.10g", "%.10g", "%.12e", "%.12e"])
