"""Reference solutions: damped truncated strip and closed-form constant-coefficient modes.

The damped problem Δu + (k² + iε)(n + q)u = f is solved on the cells
Ω_{-R}, ..., Ω_R with u = 0 on the two outer vertical edges. Every periodic
cell is condensed onto its two vertical edges; chains of 2^j cells are built
by repeated doubling, so the cost grows with log R. The central cell is then
solved with the exact Dirichlet-to-Neumann blocks of both chains attached.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DecayCheckError, NoConvergenceError
from .fem import (CellMesh, FieldOnCell, PeriodicBasis, assemble_modulated_load, assemble_pencil,
                  build_cell_mesh, node_basis, splu)
from .problem import CoefficientField, ScatteringProblem

DECAY_TOL = 1e-6
DEFAULT_EPSILONS = (4e-2, 2e-2, 1e-2)
MAX_AUTO_R = 1 << 16
_CHUNK = 64


@dataclass
class _CondensedCell:
    """Cell operator reduced to the boundary unknowns [left edge, right edge]."""

    S: np.ndarray            # (2b, 2b)
    K: sp.csc_matrix
    interior: np.ndarray
    boundary: np.ndarray     # dofs, left edge then right edge
    lu_interior: object

    @property
    def b(self) -> int:
        return len(self.boundary) // 2

    def interior_values(self, u_boundary: np.ndarray, load: Optional[np.ndarray] = None) -> np.ndarray:
        rhs = -(self.K[self.interior][:, self.boundary] @ u_boundary)
        if load is not None:
            rhs = rhs + load[self.interior]
        return self.lu_interior.solve(rhs)


def _edge_dofs(mesh: CellMesh, basis: PeriodicBasis) -> tuple[np.ndarray, np.ndarray]:
    dof = basis.dof_of_node
    pairs = mesh.left_right_pairs
    ok = (dof[pairs[:, 0]] >= 0) & (dof[pairs[:, 1]] >= 0)
    return dof[pairs[ok, 0]], dof[pairs[ok, 1]]


def _condense(K: sp.csc_matrix, left: np.ndarray, right: np.ndarray) -> _CondensedCell:
    n = K.shape[0]
    bnd = np.concatenate([left, right])
    mask = np.ones(n, dtype=bool)
    mask[bnd] = False
    inter = np.flatnonzero(mask)
    K = K.tocsc()
    lu = splu(K[inter][:, inter])
    K_ib = K[inter][:, bnd].tocsc()
    K_bi = K[bnd][:, inter].tocsr()
    S = K[bnd][:, bnd].toarray()
    for j0 in range(0, len(bnd), _CHUNK):
        cols = K_ib[:, j0:j0 + _CHUNK].toarray()
        S[:, j0:j0 + _CHUNK] -= K_bi @ lu.solve(cols)
    return _CondensedCell(S, K, inter, bnd, lu)


def _blocks(S: np.ndarray, b: int):
    return S[:b, :b], S[:b, b:], S[b:, :b], S[b:, b:]


def _join(X: np.ndarray, Y: np.ndarray, b: int) -> np.ndarray:
    """Condensed operator of X followed by Y, the shared edge eliminated."""
    xll, xlr, xrl, xrr = _blocks(X, b)
    yll, ylr, yrl, yrr = _blocks(Y, b)
    mid = xrr + yll
    rhs = np.hstack([xrl, ylr])
    sol = np.linalg.solve(mid, rhs)
    top = np.vstack([xlr, yrl])
    out = np.zeros_like(X)
    out[:b, :b] = xll
    out[b:, b:] = yrr
    return out - top @ sol


def _chain(S: np.ndarray, b: int, length: int, powers: dict) -> np.ndarray:
    """Condensed operator of `length` identical cells, from cached powers of two."""
    if length < 1:
        raise ConfigurationError("chain length must be positive")
    out = None
    j = 0
    while length:
        if j not in powers:
            powers[j] = _join(powers[j - 1], powers[j - 1], b)
        if length & 1:
            out = powers[j] if out is None else _join(out, powers[j], b)
        length >>= 1
        j += 1
    return out


@dataclass(eq=False)
class TruncatedRun:
    epsilon: float
    R: int
    h: float
    field: FieldOnCell                  # on Ω0
    fields: dict = field(default_factory=dict)   # cell -> FieldOnCell
    decay_indicator: float = 0.0
    report: dict = field(default_factory=dict)


def _sum_field(a: CoefficientField, b: CoefficientField) -> CoefficientField:
    if b.is_zero:
        return a
    return CoefficientField(lambda x1, x2: a(x1, x2) + b(x1, x2), periodic_in_x1=False, label="n+q")


def damped_truncated_solve(prob: ScatteringProblem, epsilon: float, R: Optional[int], h: float,
                           cells: Sequence[int] = (0,), decay_tol: float = DECAY_TOL,
                           pattern: str = "equilateral") -> TruncatedRun:
    """Solve the damped problem on Ω_{-R} ∪ ... ∪ Ω_R with u = 0 on the outer edges.

    ``R=None`` doubles R from 64 until the decay check passes. The decay
    indicator is the relative change of u on Ω0 when R is halved.
    """
    if not epsilon > 0:
        raise ConfigurationError("damping epsilon must be positive")
    if R is not None and R < 5:
        raise ConfigurationError("R must be at least 5 cells")
    if prob.q.support_box is not None and not prob.q.is_zero:
        x1lo, x1hi = prob.q.support_box[:2]
        if x1lo < -0.5 or x1hi > 0.5:
            raise ConfigurationError("q must be supported in the central cell")
    cells = sorted(set(int(c) for c in cells) | {0})
    if R is not None and max(abs(c) for c in cells) > R:
        raise ConfigurationError("requested cells lie outside the truncated strip")
    mesh, _ = build_cell_mesh(h, prob.bc, pattern)
    basis = node_basis(mesh, prob.bc)
    kd = complex(prob.k_squared, epsilon)
    P_per = assemble_pencil(mesh, basis, prob.n)
    K_per = (P_per.A1 + kd * P_per.A4).tocsc()
    P_mid = assemble_pencil(mesh, basis, _sum_field(prob.n, prob.q))
    K_mid = (P_mid.A1 + kd * P_mid.A4).tocsc()
    left, right = _edge_dofs(mesh, basis)
    b = len(left)
    cell = _condense(K_per, left, right)
    powers = {0: cell.S}
    load = assemble_modulated_load(mesh, basis, prob.f, 0.0) if not prob.f.is_zero \
        else np.zeros(basis.m_prime, dtype=complex)

    def central(length: int) -> np.ndarray:
        C = _chain(cell.S, b, length, powers)
        # right chain: far edge clamped, near edge is its left edge; left chain mirrored
        d_right, d_left = C[:b, :b], C[b:, b:]
        rows = np.concatenate([np.repeat(left, b), np.repeat(right, b)])
        cols = np.concatenate([np.tile(left, b), np.tile(right, b)])
        vals = np.concatenate([d_left.ravel(), d_right.ravel()])
        D = sp.csc_matrix((vals, (rows, cols)), shape=K_mid.shape)
        return splu(K_mid + D).solve(load)

    def rel(u, v) -> float:
        nrm = FieldOnCell(mesh, u[basis.dof_of_node] * (basis.dof_of_node >= 0)).l2_norm()
        d = u - v
        return 0.0 if nrm == 0 else FieldOnCell(mesh, d[basis.dof_of_node] * (basis.dof_of_node >= 0)).l2_norm() / nrm

    if R is None:
        R_try, u_half = 64, central(32)
        while True:
            u = central(R_try)
            ind = rel(u, u_half)
            if ind <= decay_tol or R_try >= MAX_AUTO_R:
                break
            R_try, u_half = 2 * R_try, u
        R = R_try
        if max(abs(c) for c in cells) > R:
            raise ConfigurationError("requested cells lie outside the truncated strip")
    else:
        u = central(R)
        ind = rel(u, central(max(R // 2, 1)))
    if not np.all(np.isfinite(u)):
        raise DecayCheckError("non-finite values in the truncated solution")
    if ind > decay_tol:
        raise DecayCheckError(
            f"R={R} is too short for epsilon={epsilon:g}: halving R changes u on Ω0 by {ind:.3g} "
            f"(> {decay_tol:g}); enlarge R")
    fields = {0: FieldOnCell(mesh, u[basis.dof_of_node] * (basis.dof_of_node >= 0), 0)}
    if len(cells) > 1:
        fields.update(_outer_fields(cell, mesh, basis, u[left], u[right], R, cells, b))
    report = {"method": "oracle", "problem": prob.name, "h": h, "epsilon": epsilon, "R": R,
              "decay_indicator": ind, "k_squared": prob.k_squared, "bc": prob.bc, "edge_dofs": b}
    return TruncatedRun(float(epsilon), int(R), float(h), fields[0], fields, float(ind), report)


def _outer_fields(cell: _CondensedCell, mesh, basis, u_left, u_right, R, cells, b) -> dict:
    """March outward from the central cell, edge by edge."""
    need = max(abs(c) for c in cells)
    sll, slr, srl, srr = _blocks(cell.S, b)
    # DtN of chains of length n at their near edge, for the right side (left side mirrored)
    d_r = {1: sll}
    d_l = {1: srr}
    for n in range(2, R + 1):
        d_r[n] = sll - slr @ np.linalg.solve(srr + d_r[n - 1], srl)
        d_l[n] = srr - srl @ np.linalg.solve(sll + d_l[n - 1], slr)
    out = {}
    dof = basis.dof_of_node
    for side in (1, -1):
        near = u_right if side > 0 else u_left
        for c in range(1, need + 1):
            rest = R - c
            if side > 0:
                far = np.zeros(b, dtype=complex) if rest == 0 else \
                    -np.linalg.solve(srr + d_r[rest], srl @ near)
                ub = np.concatenate([near, far])
            else:
                far = np.zeros(b, dtype=complex) if rest == 0 else \
                    -np.linalg.solve(sll + d_l[rest], slr @ near)
                ub = np.concatenate([far, near])
            full = np.zeros(cell.K.shape[0], dtype=complex)
            full[cell.boundary] = ub
            full[cell.interior] = cell.interior_values(ub)
            if side * c in cells:
                out[side * c] = FieldOnCell(mesh, full[dof] * (dof >= 0), side * c)
            near = far
    return out


@dataclass(eq=False)
class Extrapolation:
    field: FieldOnCell
    error_indicator: float
    corrections: list


def lap_extrapolate(runs: Sequence[TruncatedRun], order: Optional[int] = None) -> Extrapolation:
    """Richardson extrapolation ε → 0 of the Ω0 nodal values.

    ``order`` is the number of elimination sweeps (default: all, i.e. a
    polynomial in ε through every run). The error indicator is the size of
    the last correction relative to the result.
    """
    runs = sorted(runs, key=lambda r: -r.epsilon)
    if len(runs) < 3:
        raise ConfigurationError("extrapolation needs at least three runs")
    eps = np.array([r.epsilon for r in runs])
    if not np.allclose(eps[1:] / eps[:-1], 0.5, rtol=1e-9, atol=0):
        raise ConfigurationError("the damping values must halve from run to run")
    mesh = runs[0].field.mesh
    if any(r.field.mesh.n_nodes != mesh.n_nodes for r in runs):
        raise ConfigurationError("all runs must share one mesh")
    order = len(runs) - 1 if order is None else int(order)
    if not 1 <= order <= len(runs) - 1:
        raise ConfigurationError(f"order must lie in [1, {len(runs) - 1}]")
    vals = [r.field.values.copy() for r in runs]
    steps = [FieldOnCell(mesh, a - b).l2_norm() for a, b in zip(vals, vals[1:])]
    if any(later > earlier * (1 + 1e-9) and earlier > 1e-14 * max(FieldOnCell(mesh, vals[0]).l2_norm(), 1e-300)
           for earlier, later in zip(steps, steps[1:])):
        raise NoConvergenceError(
            f"damped solutions do not settle as epsilon halves (successive changes {steps}); "
            "a standing wave or a trapped mode is likely")
    corrections = []
    table = vals
    for j in range(1, order + 1):
        fac = 2.0 ** j
        new = [(fac * table[i + 1] - table[i]) / (fac - 1) for i in range(len(table) - 1)]
        corrections.append(FieldOnCell(mesh, new[-1] - table[-1]).l2_norm())
        table = new
    result = FieldOnCell(mesh, table[-1], 0)
    nrm = result.l2_norm()
    ind = corrections[-1] / nrm if nrm > 0 else 0.0
    return Extrapolation(result, float(ind), corrections)


@dataclass(frozen=True)
class ConstantMode:
    beta: float             # wrapped into (-π, π]
    beta_unwrapped: float
    lam: float
    m: int
    amplitude: float        # φ = amplitude * trig(mπ x2) e^{iβ x1}
    bc: str

    def profile(self, x2):
        x2 = np.asarray(x2, dtype=float)
        trig = np.cos if self.bc == "neumann" else np.sin
        return self.amplitude * trig(self.m * np.pi * x2)

    def __call__(self, x1, x2):
        return self.profile(x2) * np.exp(1j * self.beta_unwrapped * np.asarray(x1, dtype=float))


@dataclass(frozen=True)
class ConstantModes:
    exceptional: np.ndarray
    modes: tuple
    lambdas: np.ndarray
    cutoff_orders: tuple    # m with k²n0 = m²π² (standing waves, excluded)


def _wrap(beta: float) -> float:
    w = (beta + np.pi) % (2 * np.pi) - np.pi
    return np.pi if np.isclose(w, -np.pi) else float(w)


def analytic_constant_modes(n0: float, k: float, bc: str = "neumann", tol: float = 1e-12) -> ConstantModes:
    """Propagating modes of Δ + k² n0 in the strip, normalized by 2k∫ n0 |φ|² = 1 over a cell."""
    if not n0 > 0:
        raise ConfigurationError("n0 must be positive")
    if bc not in ("neumann", "dirichlet"):
        raise ConfigurationError(f"bc must be 'neumann' or 'dirichlet', got {bc!r}")
    kn = k * k * n0
    modes, cutoff = [], []
    m = 0 if bc == "neumann" else 1
    while m * m * np.pi**2 <= kn * (1 + tol):
        gap = kn - m * m * np.pi**2
        if abs(gap) <= tol * kn:
            cutoff.append(m)
        else:
            bu = float(np.sqrt(gap))
            mean_sq = 1.0 if m == 0 else 0.5
            amp = 1.0 / np.sqrt(2 * k * n0 * mean_sq)
            for s in (1, -1):
                modes.append(ConstantMode(_wrap(s * bu), s * bu, s * bu / (k * n0), m, amp, bc))
        m += 1
    modes.sort(key=lambda md: md.beta)
    return ConstantModes(np.array([md.beta for md in modes]), tuple(modes),
                         np.array([md.lam for md in modes]), tuple(cutoff))


__all__ = ["TruncatedRun", "damped_truncated_solve", "Extrapolation", "lap_extrapolate",
           "ConstantMode", "ConstantModes", "analytic_constant_modes", "DEFAULT_EPSILONS"]
