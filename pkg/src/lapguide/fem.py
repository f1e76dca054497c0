"""Unit-cell mesh, periodic P1 basis and assembly of the cell pencil.

The cell problem in weak form is  A(α, k) v = load,  with

    A(α, k) = A1 + α A2 + α² A3 + k² A4,
    A1 ~ ∫ ∇v·∇ψ̄,   A2 ~ -i ∫ (∂1 v ψ̄ - v ∂1 ψ̄),   A3 ~ ∫ v ψ̄,   A4 ~ -∫ n v ψ̄,

and  load_j = -∫ e^{-iα x1} r ζ_j  for a source r supported in the cell.
Rows are test functions, columns trial functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import ConfigurationError, SingularCellProblemError, SupportError
from .problem import CoefficientField

TAG_NAMES = ("interior", "left", "right", "bottom", "top")

# 3-point Gauss rule on triangles, exact for quadratics
_QP_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_QP_WEIGHT = np.full(3, 1 / 3)

SINGULAR_RCOND = 1e-12


@dataclass(frozen=True, eq=False)
class CellMesh:
    vertices: np.ndarray          # (M, 2)
    triangles: np.ndarray         # (T, 3), counter-clockwise
    h: float
    left_right_pairs: np.ndarray  # (m, 2) node indices (left, right)
    boundary_tags: np.ndarray     # (M,) index into TAG_NAMES; top/bottom win at corners

    @property
    def n_nodes(self) -> int:
        return len(self.vertices)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.concatenate([np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1) for i in range(3)])

    def nodes_tagged(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags == TAG_NAMES.index(name))

    def on_bottom_or_top(self) -> np.ndarray:
        x2 = self.vertices[:, 1]
        return np.flatnonzero((x2 == 0.0) | (x2 == 1.0))


@dataclass(frozen=True, eq=False)
class PeriodicBasis:
    """Map from mesh nodes to unknowns; -1 marks nodes without a DOF (Dirichlet)."""

    dof_of_node: np.ndarray
    m_prime: int
    rep_node: np.ndarray  # (m_prime,) representative node of each DOF
    bc: str
    periodic: bool = True

    def dof_coords(self, mesh: CellMesh) -> np.ndarray:
        return mesh.vertices[self.rep_node]

    def prolongation(self) -> sp.csr_matrix:
        """(M x M') incidence matrix: nodal values = P @ dof values (zero on Dirichlet nodes)."""
        M = len(self.dof_of_node)
        keep = np.flatnonzero(self.dof_of_node >= 0)
        return sp.csr_matrix((np.ones(len(keep)), (keep, self.dof_of_node[keep])), shape=(M, self.m_prime))


MESH_PATTERNS = ("equilateral", "alternating", "uniform")


def build_cell_mesh(h: float, bc: str = "neumann", pattern: str = "equilateral") -> tuple[CellMesh, PeriodicBasis]:
    """Triangulation of (-1/2, 1/2) x (0, 1) with edge length ~h.

    'equilateral' (default) stacks rows of near-equilateral triangles, every
    other row shifted by half a spacing and closed by half-width triangles at
    x1 = ±1/2. 'alternating' and 'uniform' split an h-grid of squares along
    checkerboard / parallel diagonals.
    """
    if not 0 < h < 0.5:
        raise ConfigurationError(f"mesh size must satisfy 0 < h < 0.5, got {h}")
    if pattern not in MESH_PATTERNS:
        raise ConfigurationError(f"unknown mesh pattern {pattern!r}")
    if pattern == "equilateral":
        mesh = _equilateral_mesh(h)
        return mesh, periodic_basis(mesh, bc)
    n = int(np.ceil(1.0 / h - 1e-9))
    xs = -0.5 + np.arange(n + 1) / n
    xs[-1] = 0.5
    ys = np.arange(n + 1) / n
    ys[-1] = 1.0
    X1, X2 = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X1.ravel(), X2.ravel()])

    def idx(i, j):
        return i * (n + 1) + j

    I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    I = I.ravel()
    J = J.ravel()
    a, b, c, d = idx(I, J), idx(I + 1, J), idx(I + 1, J + 1), idx(I, J + 1)
    flip = ((I + J) % 2 == 1) if pattern == "alternating" else np.zeros_like(I, dtype=bool)
    t1 = np.where(flip[:, None], np.column_stack([a, b, d]), np.column_stack([a, b, c]))
    t2 = np.where(flip[:, None], np.column_stack([b, c, d]), np.column_stack([a, c, d]))
    triangles = np.vstack([t1, t2]).astype(np.int64)

    tags = np.zeros(len(vertices), dtype=np.int8)
    tags[vertices[:, 0] == -0.5] = TAG_NAMES.index("left")
    tags[vertices[:, 0] == 0.5] = TAG_NAMES.index("right")
    tags[vertices[:, 1] == 0.0] = TAG_NAMES.index("bottom")
    tags[vertices[:, 1] == 1.0] = TAG_NAMES.index("top")
    left = idx(0, np.arange(n + 1))
    right = idx(n, np.arange(n + 1))
    pairs = np.column_stack([left, right])
    mesh = CellMesh(vertices, triangles, float(h), pairs, tags)
    return mesh, periodic_basis(mesh, bc)


def _equilateral_mesh(h: float) -> CellMesh:
    nx = max(int(round(1.0 / h)), 2)
    ny = max(int(round(1.0 / (h * np.sqrt(3.0) / 2))), 2)
    rows = []
    for j in range(ny + 1):
        if j % 2 == 0:
            xs = -0.5 + np.arange(nx + 1) / nx
        else:
            xs = np.concatenate([[-0.5], -0.5 + (np.arange(nx) + 0.5) / nx, [0.5]])
        xs[0], xs[-1] = -0.5, 0.5
        rows.append(xs)
    start = np.cumsum([0] + [len(r) for r in rows])
    vertices = np.concatenate([np.column_stack([r, np.full(len(r), min(j / ny, 1.0))])
                               for j, r in enumerate(rows)])
    vertices[start[-2]:, 1] = 1.0
    tris = []
    for j in range(ny):
        lo, hi = rows[j], rows[j + 1]
        a, b = start[j], start[j + 1]
        # merge the two sorted rows into a strip of triangles
        i = k = 0
        while i < len(lo) - 1 or k < len(hi) - 1:
            adv_lo = k == len(hi) - 1 or (i < len(lo) - 1 and lo[i + 1] <= hi[k + 1] - 1e-12)
            if i < len(lo) - 1 and k < len(hi) - 1 and abs(lo[i + 1] - hi[k + 1]) < 1e-12:
                # both rows end at the same abscissa (x1 = 1/2): pick the better diagonal
                adv_lo = True
            if adv_lo:
                tris.append((a + i, a + i + 1, b + k))
                i += 1
            else:
                tris.append((a + i, b + k + 1, b + k))
                k += 1
    triangles = np.array(tris, dtype=np.int64)
    tags = np.zeros(len(vertices), dtype=np.int8)
    tags[vertices[:, 0] == -0.5] = TAG_NAMES.index("left")
    tags[vertices[:, 0] == 0.5] = TAG_NAMES.index("right")
    tags[vertices[:, 1] == 0.0] = TAG_NAMES.index("bottom")
    tags[vertices[:, 1] == 1.0] = TAG_NAMES.index("top")
    pairs = np.column_stack([start[:-1], start[1:] - 1])
    return CellMesh(vertices, triangles, float(h), pairs, tags)


def periodic_basis(mesh: CellMesh, bc: str) -> PeriodicBasis:
    return _make_basis(mesh, bc, periodic=True)


def node_basis(mesh: CellMesh, bc: str) -> PeriodicBasis:
    """Non-periodic numbering (every node its own DOF, except Dirichlet nodes)."""
    return _make_basis(mesh, bc, periodic=False)


def _make_basis(mesh: CellMesh, bc: str, periodic: bool) -> PeriodicBasis:
    if bc not in ("neumann", "dirichlet"):
        raise ConfigurationError(f"bc must be 'neumann' or 'dirichlet', got {bc!r}")
    M = mesh.n_nodes
    owner = np.arange(M)
    if periodic:
        owner[mesh.left_right_pairs[:, 1]] = mesh.left_right_pairs[:, 0]
    active = np.ones(M, dtype=bool)
    if bc == "dirichlet":
        active[mesh.on_bottom_or_top()] = False
    reps = np.flatnonzero((owner == np.arange(M)) & active)
    dof = -np.ones(M, dtype=np.int64)
    dof[reps] = np.arange(len(reps))
    dof = np.where(active, dof[owner], -1)
    return PeriodicBasis(dof, len(reps), reps, bc, periodic)


# ---------------------------------------------------------------------------
# mesh text format


def export_mesh(mesh: CellMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"h {float(mesh.h)!r}\n")
        fh.write(f"vertices {mesh.n_nodes}\n")
        for (x1, x2), t in zip(mesh.vertices, mesh.boundary_tags):
            fh.write(f"{float(x1)!r} {float(x2)!r} {TAG_NAMES[t]}\n")
        fh.write(f"triangles {len(mesh.triangles)}\n")
        for tri in mesh.triangles:
            fh.write(f"{tri[0]} {tri[1]} {tri[2]}\n")
        fh.write(f"pairs {len(mesh.left_right_pairs)}\n")
        for l, r in mesh.left_right_pairs:
            fh.write(f"{l} {r}\n")


def import_mesh(path) -> CellMesh:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    pos = 0

    def header(name):
        nonlocal pos
        if lines[pos][0] != name:
            raise ConfigurationError(f"mesh file: expected section {name!r}, got {lines[pos][0]!r}")
        val = lines[pos][1]
        pos += 1
        return val

    h = float(header("h"))
    nv = int(header("vertices"))
    verts = np.array([[float(l[0]), float(l[1])] for l in lines[pos:pos + nv]])
    tags = np.array([TAG_NAMES.index(l[2]) for l in lines[pos:pos + nv]], dtype=np.int8)
    pos += nv
    nt = int(header("triangles"))
    tris = np.array([[int(v) for v in l] for l in lines[pos:pos + nt]], dtype=np.int64)
    pos += nt
    npairs = int(header("pairs"))
    pairs = np.array([[int(v) for v in l] for l in lines[pos:pos + npairs]], dtype=np.int64)
    return CellMesh(verts, tris, h, pairs.reshape(-1, 2), tags)


# ---------------------------------------------------------------------------
# element geometry


@dataclass(frozen=True, eq=False)
class ElementData:
    area: np.ndarray   # (T,)
    grad: np.ndarray   # (T, 3, 2) gradients of the barycentric hats
    qp: np.ndarray     # (T, 3, 2) quadrature points
    qw: np.ndarray     # (T, 3) quadrature weights (area included)

    @classmethod
    def of(cls, mesh: CellMesh) -> "ElementData":
        p = mesh.vertices[mesh.triangles]  # (T,3,2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        area = 0.5 * det
        # gradient of hat i is rot90 of the opposite edge / (2 area)
        grad = np.empty_like(p)
        for i in range(3):
            e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
            grad[:, i, 0] = -e[:, 1] / det
            grad[:, i, 1] = e[:, 0] / det
        qp = np.einsum("qi,tid->tqd", _QP_BARY, p)
        qw = area[:, None] * _QP_WEIGHT[None, :]
        return cls(area, grad, qp, qw)


def _fold(mesh: CellMesh, basis: PeriodicBasis, elem_mats: np.ndarray, rows_are_test=True) -> sp.csc_matrix:
    """Sum (T,3,3) element matrices [test b, trial a] into the DOF space."""
    tri = mesh.triangles
    dof = basis.dof_of_node[tri]  # (T,3)
    r = np.repeat(dof[:, :, None], 3, axis=2)
    c = np.repeat(dof[:, None, :], 3, axis=1)
    keep = (r >= 0) & (c >= 0)
    m = basis.m_prime
    return sp.csc_matrix((elem_mats[keep], (r[keep], c[keep])), shape=(m, m), dtype=complex)


def _weighted_mass_elems(ed: ElementData, wq: np.ndarray) -> np.ndarray:
    # ∫ w φ_a φ_b  with hats at the qp equal to the barycentric coordinates
    return np.einsum("tq,tq,qa,qb->tba", ed.qw, wq, _QP_BARY, _QP_BARY)


def _eval_at_qp(ed: ElementData, w: CoefficientField, shift: float = 0.0) -> np.ndarray:
    return w(ed.qp[..., 0] + shift, ed.qp[..., 1])


# ---------------------------------------------------------------------------
# pencil


@dataclass(frozen=True, eq=False)
class PencilMatrices:
    """A(α,k) = A1 + α A2 + α² A3 + k² A4 over a shared sparsity pattern."""

    A1: sp.csc_matrix
    A2: sp.csc_matrix
    A3: sp.csc_matrix
    A4: sp.csc_matrix

    def __post_init__(self):
        pattern = (abs(self.A1) + abs(self.A2) + abs(self.A3) + abs(self.A4)).tocsc()
        pattern.data[:] = 1.0
        pattern.sort_indices()
        object.__setattr__(self, "_pattern", pattern)
        data = []
        for A in (self.A1, self.A2, self.A3, self.A4):
            data.append(_aligned_data(pattern, A))
        object.__setattr__(self, "_data", np.array(data))

    @property
    def m_prime(self) -> int:
        return self.A1.shape[0]

    def matrix(self, alpha: complex, k: float) -> sp.csc_matrix:
        c = np.array([1.0, alpha, alpha**2, k**2], dtype=complex)
        A = self._pattern.copy().astype(complex)
        A.data = c @ self._data
        return A

    def restricted(self, rows: np.ndarray, cols: np.ndarray) -> "PencilMatrices":
        return PencilMatrices(*(A[rows][:, cols].tocsc() for A in (self.A1, self.A2, self.A3, self.A4)))


def _aligned_data(pattern: sp.csc_matrix, A: sp.spmatrix) -> np.ndarray:
    """Values of A on the (sorted) structure of pattern."""
    P = pattern.tocsc()
    P.sort_indices()
    Acoo = sp.csc_matrix(A, dtype=complex)
    Acoo.sum_duplicates()
    # map each pattern entry (row, col) to A's value via a keyed lookup
    pr = P.indices
    pc = np.repeat(np.arange(P.shape[1]), np.diff(P.indptr))
    key_p = pc.astype(np.int64) * P.shape[0] + pr
    Ac = Acoo.tocoo()
    key_a = Ac.col.astype(np.int64) * P.shape[0] + Ac.row
    order = np.argsort(key_a)
    key_a = key_a[order]
    vals = Ac.data[order]
    out = np.zeros(len(key_p), dtype=complex)
    pos = np.searchsorted(key_a, key_p)
    ok = (pos < len(key_a))
    ok[ok] = key_a[pos[ok]] == key_p[ok]
    out[ok] = vals[pos[ok]]
    return out


def assemble_pencil(mesh: CellMesh, basis: PeriodicBasis, n: CoefficientField) -> PencilMatrices:
    ed = ElementData.of(mesh)
    G = ed.grad
    stiff = ed.area[:, None, None] * np.einsum("tbd,tad->tba", G, G)
    # -i ∫ (∂1 φ_a φ_b - φ_a ∂1 φ_b) with ∫ φ = area/3 exactly
    g1 = G[:, :, 0]
    a2 = -1j * (ed.area / 3.0)[:, None, None] * (g1[:, None, :] - g1[:, :, None])
    mass = _weighted_mass_elems(ed, np.ones_like(ed.qw))
    nmass = _weighted_mass_elems(ed, _eval_at_qp(ed, n))
    return PencilMatrices(_fold(mesh, basis, stiff), _fold(mesh, basis, a2),
                          _fold(mesh, basis, mass), -_fold(mesh, basis, nmass))


def assemble_pencil_direct(mesh: CellMesh, basis: PeriodicBasis, n: CoefficientField,
                           alpha: complex, k: float) -> sp.csc_matrix:
    """Assemble A(α,k) in one go from the full sesquilinear form (cross-check of the split)."""
    ed = ElementData.of(mesh)
    G = ed.grad
    nq = _eval_at_qp(ed, n)
    ph = _QP_BARY  # hats at qp
    # (∂1 + iα) on trial times (∂1 - iα)-conjugate-free pairing on test, plus ∂2 terms
    e = np.zeros((len(ed.area), 3, 3), dtype=complex)
    for q in range(3):
        w = ed.qw[:, q]
        trial1 = G[:, None, :, 0] + 1j * alpha * ph[q][None, None, :]
        test1 = G[:, :, None, 0] - 1j * alpha * ph[q][None, :, None]
        e += w[:, None, None] * (trial1 * test1 + G[:, None, :, 1] * G[:, :, None, 1])
        e -= (k**2) * (w * nq[:, q])[:, None, None] * ph[q][None, :, None] * ph[q][None, None, :]
    return _fold(mesh, basis, e)


def assemble_weighted_mass(mesh: CellMesh, basis: PeriodicBasis, w: CoefficientField) -> sp.csc_matrix:
    ed = ElementData.of(mesh)
    return _fold(mesh, basis, _weighted_mass_elems(ed, _eval_at_qp(ed, w)))


# ---------------------------------------------------------------------------
# modulated loads and masses


@dataclass(frozen=True, eq=False)
class LoadOperator:
    """load(α)_j = -Σ_qp w g(x + shift e1) e^{-iα(x1 + shift)} ζ_j(x), precomputed per qp."""

    weights: sp.csr_matrix  # (M', nqp) entries w_qp g(x_qp) ζ_j(x_qp)
    x1: np.ndarray          # (nqp,) x1 of the qp (in the unit cell) plus the shift

    def __call__(self, alpha: complex) -> np.ndarray:
        return -(self.weights @ np.exp(-1j * alpha * self.x1))

    def __add__(self, other: "LoadOperator") -> "LoadOperator":
        return LoadOperator(sp.hstack([self.weights, other.weights]).tocsr(),
                            np.concatenate([self.x1, other.x1]))

    def scaled(self, c: complex) -> "LoadOperator":
        return LoadOperator((self.weights * c).tocsr(), self.x1)


def load_operator_from_qp(mesh: CellMesh, basis: PeriodicBasis, gq: np.ndarray,
                          shift: int = 0, ed: Optional[ElementData] = None) -> LoadOperator:
    """Build a LoadOperator from (possibly complex) values g at the (T,3) quadrature points."""
    ed = ed or ElementData.of(mesh)
    gq = np.asarray(gq)
    elems = np.flatnonzero(np.any(gq != 0, axis=1))
    T = len(elems)
    dof = basis.dof_of_node[mesh.triangles[elems]]  # (T,3)
    rows, cols, vals = [], [], []
    for q in range(3):
        qcol = elems * 3 + q
        wq = ed.qw[elems, q] * gq[elems, q]
        for a in range(3):
            ok = dof[:, a] >= 0
            rows.append(dof[ok, a])
            cols.append(qcol[ok])
            vals.append(wq[ok] * _QP_BARY[q, a])
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    ncol = 3 * len(ed.area)
    W = sp.csr_matrix((vals.astype(complex), (rows, cols)), shape=(basis.m_prime, ncol))
    # compress unused qp columns
    used = np.unique(cols)
    W = W[:, used]
    x1 = ed.qp[..., 0].ravel()[used] + shift
    return LoadOperator(W.tocsr(), x1)


def load_operator(mesh: CellMesh, basis: PeriodicBasis, g: CoefficientField, shift: int = 0,
                  ed: Optional[ElementData] = None) -> LoadOperator:
    """LoadOperator for a field g supported in the cell Ω_shift."""
    ed = ed or ElementData.of(mesh)
    gq = _eval_at_qp(ed, g, float(shift))
    _check_support(g, shift)
    return load_operator_from_qp(mesh, basis, gq, shift, ed)


def _check_support(g: CoefficientField, shift: int) -> None:
    if g.periodic_in_x1 and not g.is_zero:
        raise SupportError("modulated loads need a compactly supported field")
    if g.support_box is not None:
        x1lo, x1hi, _, _ = g.support_box
        if x1lo < shift - 0.5 - 1e-12 or x1hi > shift + 0.5 + 1e-12:
            raise SupportError(f"field support {g.support_box} leaves the cell Ω_{shift}")


def assemble_modulated_load(mesh: CellMesh, basis: PeriodicBasis, g, alpha: complex,
                            cell_shift: int = 0) -> np.ndarray:
    """Entries -∫_{Ω0} e^{-iα(x1+shift)} g(x + shift e1) ζ_j(x) dx.

    g is a CoefficientField or a nodal array over the mesh nodes (P1 interpolated).
    """
    if isinstance(g, CoefficientField):
        return load_operator(mesh, basis, g, cell_shift)(alpha)
    g = np.asarray(g)
    if g.shape != (mesh.n_nodes,):
        raise ConfigurationError("nodal field must have one value per mesh node")
    gq = np.einsum("qa,ta->tq", _QP_BARY, g[mesh.triangles])
    return load_operator_from_qp(mesh, basis, gq, cell_shift)(alpha)


@dataclass(frozen=True, eq=False)
class ModulatedMass:
    """Q(α)_{j'j} = ∫ e^{-iα x1} w ζ_j ζ_j' restricted to the elements where w ≠ 0."""

    rows: np.ndarray
    cols: np.ndarray
    coef: np.ndarray  # (E, 3) per entry, per qp
    x1: np.ndarray    # (E, 3)
    shape: tuple

    def __call__(self, alpha: complex) -> sp.csr_matrix:
        vals = np.sum(self.coef * np.exp(-1j * alpha * self.x1), axis=1)
        return sp.csr_matrix((vals, (self.rows, self.cols)), shape=self.shape)

    def support_dofs(self) -> np.ndarray:
        return np.unique(np.concatenate([self.rows, self.cols]))


def modulated_mass(mesh: CellMesh, basis: PeriodicBasis, w: CoefficientField,
                   ed: Optional[ElementData] = None) -> ModulatedMass:
    ed = ed or ElementData.of(mesh)
    wq = _eval_at_qp(ed, w)
    elems = np.flatnonzero(np.any(wq != 0, axis=1))
    dof = basis.dof_of_node[mesh.triangles[elems]]
    rows, cols, coef, x1 = [], [], [], []
    for b in range(3):
        for a in range(3):
            ok = (dof[:, a] >= 0) & (dof[:, b] >= 0)
            rows.append(dof[ok, b])
            cols.append(dof[ok, a])
            coef.append((ed.qw[elems] * wq[elems] * (_QP_BARY[:, a] * _QP_BARY[:, b])[None, :])[ok])
            x1.append(ed.qp[elems, :, 0][ok])
    m = basis.m_prime
    return ModulatedMass(np.concatenate(rows), np.concatenate(cols), np.concatenate(coef),
                         np.concatenate(x1), (m, m))


# ---------------------------------------------------------------------------
# factorization and cell solves


def splu(A: sp.spmatrix):
    return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")


def nested_dissection(adj: sp.spmatrix, coords: np.ndarray, leaf: int = 64) -> np.ndarray:
    """Fill-reducing order by recursive coordinate bisection of the matrix graph.

    Each level splits the node set at the median of its longer coordinate
    extent; the nodes on the lower side that touch the upper side form the
    separator and are numbered after both halves.
    """
    adj = sp.csr_matrix(adj)
    order: list[np.ndarray] = []
    stack = [(np.arange(adj.shape[0]), False)]
    # iterative post-order: (nodes, expanded) pairs, separators emitted after children
    while stack:
        nodes, emit = stack.pop()
        if emit or len(nodes) <= leaf:
            order.append(nodes)
            continue
        c = coords[nodes]
        d = int(np.argmax(np.ptp(c, axis=0)))
        med = np.median(c[:, d])
        lo, hi = nodes[c[:, d] <= med], nodes[c[:, d] > med]
        if len(lo) == 0 or len(hi) == 0:
            order.append(nodes)
            continue
        in_hi = np.zeros(adj.shape[0])
        in_hi[hi] = 1.0
        touches = (adj[lo] @ in_hi) > 0
        stack.append((lo[touches], True))
        stack.append((hi, False))
        stack.append((lo[~touches], False))
    return np.concatenate(order) if order else np.zeros(0, dtype=np.int64)


@dataclass(eq=False)
class OrderedFactor:
    """LU of A[perm][:, perm] with a prescribed order and diagonal pivots.

    Keeping the order fixed makes the trailing block of the factors the Schur
    complement onto the last DOFs of ``perm``.
    """

    lu: object
    perm: np.ndarray

    def solve(self, b: np.ndarray, trans: str = "N") -> np.ndarray:
        b = np.asarray(b, dtype=complex)
        xp = self.lu.solve(np.ascontiguousarray(b[self.perm]), trans=trans)
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x

    def trailing_schur(self, size: int) -> Optional[np.ndarray]:
        """Dense Schur complement onto the last ``size`` DOFs of perm (in perm order), if available."""
        n = len(self.perm)
        off = n - size
        pr, pc = self.lu.perm_r[off:], self.lu.perm_c[off:]
        if size == 0 or np.any(pr < off) or np.any(pc < off):
            return None
        S = (self.lu.L[off:, off:] @ self.lu.U[off:, off:]).toarray()
        return S[np.ix_(pr - off, pc - off)]


def ordered_factor(A: sp.spmatrix, perm: np.ndarray) -> OrderedFactor:
    Ap = sp.csc_matrix(A)[perm][:, perm].tocsc()
    lu = spla.splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    return OrderedFactor(lu, np.asarray(perm))


def rcond_estimate(A: sp.spmatrix, lu) -> float:
    """1 / (‖A‖_1 ‖A^{-1}‖_1) with Hager-Higham estimation of the inverse norm."""
    n = A.shape[0]
    Ainv = spla.LinearOperator(
        (n, n), dtype=complex,
        matvec=lambda x: lu.solve(np.asarray(x, dtype=complex).ravel()),
        rmatvec=lambda x: lu.solve(np.asarray(x, dtype=complex).ravel(), trans="H"),
    )
    nrm = spla.norm(A, 1)
    if nrm == 0:
        return 0.0
    inv_nrm = spla.onenormest(Ainv)
    return 1.0 / (nrm * inv_nrm)


def solve_cell(P: PencilMatrices, alpha: complex, k: float, rhs: np.ndarray,
               threshold: float = SINGULAR_RCOND) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=complex)
    A = P.matrix(alpha, k)
    try:
        lu = splu(A)
    except RuntimeError as exc:  # exactly singular factor
        raise SingularCellProblemError(alpha, 0.0) from exc
    rc = rcond_estimate(A, lu)
    if rc < threshold:
        raise SingularCellProblemError(alpha, rc)
    return lu.solve(rhs)


# ---------------------------------------------------------------------------
# nodal fields on one cell


@dataclass(eq=False)
class FieldOnCell:
    """Nodal values on every vertex of the cell mesh (both left and right boundary copies).

    ``cell_index`` c means the values live on Ω_c = Ω0 + c e1 and are stored
    at the unit-cell vertex positions.
    """

    mesh: CellMesh
    values: np.ndarray
    cell_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ConfigurationError("field needs one value per mesh node")

    def mass_matrix(self) -> sp.csr_matrix:
        return _node_mass(self.mesh)

    def l2_norm(self) -> float:
        v = self.values
        return float(np.sqrt(max(np.real(np.vdot(v, self.mass_matrix() @ v)), 0.0)))

    def rel_l2_diff(self, other: "FieldOnCell") -> float:
        d = FieldOnCell(self.mesh, self.values - other.values)
        return d.l2_norm() / self.l2_norm()

    def evaluate(self, x1, x2) -> np.ndarray:
        """P1 interpolation at points given in the unit-cell frame."""
        return _locate(self.mesh).interpolate(self.values, x1, x2)


def _node_mass(mesh: CellMesh) -> sp.csr_matrix:
    M = getattr(mesh, "_node_mass", None)
    if M is None:
        ed = ElementData.of(mesh)
        basis = node_basis(mesh, "neumann")
        M = _fold(mesh, basis, _weighted_mass_elems(ed, np.ones_like(ed.qw))).real.tocsr()
        object.__setattr__(mesh, "_node_mass", M)
    return M


class _Locator:
    def __init__(self, mesh: CellMesh):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self.p0 = p[:, 0]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.inv = np.stack([np.stack([d2[:, 1], -d2[:, 0]], -1), np.stack([-d1[:, 1], d1[:, 0]], -1)], 1) / det[:, None, None]
        self.tree = cKDTree(p.mean(axis=1))

    def interpolate(self, values, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        shape = np.broadcast(x1, x2).shape
        pts = np.column_stack([np.broadcast_to(x1, shape).ravel(), np.broadcast_to(x2, shape).ravel()])
        out = np.full(len(pts), np.nan, dtype=complex)
        _, cand = self.tree.query(pts, k=min(8, len(self.p0)))
        cand = np.atleast_2d(cand)
        for col in range(cand.shape[1]):
            todo = np.isnan(out.real)
            if not todo.any():
                break
            t = cand[todo, col]
            lam = np.einsum("tij,tj->ti", self.inv[t], pts[todo] - self.p0[t])
            bary = np.column_stack([1 - lam.sum(1), lam])
            inside = np.all(bary >= -1e-10, axis=1)
            idx = np.flatnonzero(todo)[inside]
            out[idx] = np.einsum("ti,ti->t", bary[inside], values[self.mesh.triangles[t[inside]]])
        if np.isnan(out.real).any():
            raise ConfigurationError("evaluation point outside the unit cell")
        return out.reshape(shape)


def _locate(mesh: CellMesh) -> _Locator:
    loc = getattr(mesh, "_locator", None)
    if loc is None:
        loc = _Locator(mesh)
        object.__setattr__(mesh, "_locator", loc)
    return loc
