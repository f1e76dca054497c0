"""Integration paths in the quasimomentum plane and Bloch reconstruction.

Fields are recovered from their transforms by

    u(x) = (1 / 2π) ∫_path e^{iα x1} v(α, x) dα,

discretized with the trapezoid rule in the path parameter t ∈ [0, 1]:
nodes t_l = l/N, weight 1/N. Every path piece is composed with a smooth
monotone map whose derivatives vanish at both ends, so the integrand is
smooth and periodic in t and the rule converges faster than any fixed power
of 1/N (up to the smoothing order).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import beta as beta_fn
from scipy.special import betainc

from .errors import AssumptionViolationError, ConfigurationError, ContourConfigurationError
from .fem import CellMesh, FieldOnCell, PeriodicBasis

SMOOTHING_ORDER = 8
DEFAULT_SIGMA = 0.2
MAX_DELTA = 0.3


@dataclass(frozen=True)
class SmoothReparam:
    """w(t) = ∫_0^t (τ(1-τ))^p dτ / ∫_0^1 (τ(1-τ))^p dτ."""

    p: int = SMOOTHING_ORDER

    def __post_init__(self):
        if self.p < 4 or self.p % 2:
            raise ConfigurationError("smoothing order must be an even integer >= 4")

    def __call__(self, t):
        return betainc(self.p + 1.0, self.p + 1.0, np.clip(t, 0.0, 1.0))

    def deriv(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        return (t * (1 - t)) ** self.p / beta_fn(self.p + 1.0, self.p + 1.0)


def smooth_reparam(p: int = SMOOTHING_ORDER) -> SmoothReparam:
    return SmoothReparam(p)


@dataclass(frozen=True)
class _Segment:
    z0: complex
    z1: complex

    def at(self, w):
        return self.z0 + (self.z1 - self.z0) * w

    def d(self, w):
        return np.full(np.shape(w), self.z1 - self.z0, dtype=complex)

    @property
    def length(self) -> float:
        return abs(self.z1 - self.z0)


@dataclass(frozen=True)
class _Arc:
    center: complex
    radius: float
    theta0: float
    theta1: float

    def at(self, w):
        return self.center + self.radius * np.exp(1j * (self.theta0 + (self.theta1 - self.theta0) * w))

    def d(self, w):
        th = self.theta0 + (self.theta1 - self.theta0) * w
        return 1j * (self.theta1 - self.theta0) * self.radius * np.exp(1j * th)

    @property
    def length(self) -> float:
        return abs(self.theta1 - self.theta0) * self.radius


@dataclass(frozen=True, eq=False)
class ContourParam:
    pieces: tuple
    knots: np.ndarray  # a_0 = 0 < ... < a_Q = 1
    smoothing_order: int
    kind: str = "cci"
    delta: Optional[float] = None
    sigma: Optional[float] = None
    indent_centers: tuple = ()

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        j = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.pieces) - 1)
        a0, a1 = self.knots[j], self.knots[j + 1]
        return t, j, (t - a0) / (a1 - a0), a1 - a0

    def eval(self, t):
        scalar = np.ndim(t) == 0
        t, j, tau, _ = self._locate(t)
        w = SmoothReparam(self.smoothing_order)(tau)
        out = np.empty(len(t), dtype=complex)
        for i, piece in enumerate(self.pieces):
            m = j == i
            out[m] = piece.at(w[m])
        return out[0] if scalar else out

    def deriv(self, t):
        scalar = np.ndim(t) == 0
        t, j, tau, span = self._locate(t)
        rep = SmoothReparam(self.smoothing_order)
        w, dw = rep(tau), rep.deriv(tau)
        out = np.empty(len(t), dtype=complex)
        for i, piece in enumerate(self.pieces):
            m = j == i
            out[m] = piece.d(w[m]) * dw[m] / span[m]
        return out[0] if scalar else out

    def nodes(self, grid: "TrigGrid") -> tuple[np.ndarray, np.ndarray]:
        """(s(t_l), s'(t_l)) at the trapezoid nodes."""
        return self.eval(grid.nodes), self.deriv(grid.nodes)

    def to_csv(self, path, samples: int = 801) -> None:
        t = np.linspace(0.0, 1.0, samples)
        s, ds = self.eval(t), self.deriv(t)
        np.savetxt(path, np.column_stack([t, s.real, s.imag, ds.real, ds.imag]), delimiter=",",
                   header="t,re_s,im_s,re_ds,im_ds", comments="", fmt="%.12g")


def _knots(lengths: Sequence[float]) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(lengths)])
    k = c / c[-1]
    k[-1] = 1.0
    return k


def default_delta(points: Sequence[float]) -> float:
    """Half the smallest gap among the points and ±π, capped at 0.3."""
    pts = np.sort(np.concatenate([np.asarray(points, dtype=float), [-np.pi, np.pi]]))
    gaps = np.diff(pts)
    return float(min(MAX_DELTA, 0.5 * gaps.min())) if len(gaps) else MAX_DELTA


def build_cci_contour(s_plus: Sequence[float], s_minus: Sequence[float], delta: Optional[float] = None,
                      p: int = SMOOTHING_ORDER) -> ContourParam:
    """Path from -π to π along the real axis, dipping below each point of S+ and
    passing above each point of S- on half circles of radius delta."""
    s_plus = [float(x) for x in s_plus]
    s_minus = [float(x) for x in s_minus]
    for a in s_plus:
        if any(abs(a - b) < 1e-9 for b in s_minus):
            raise AssumptionViolationError(f"{a:.6g} belongs to both S+ and S-")
    pts = sorted([(a, +1) for a in s_plus] + [(a, -1) for a in s_minus])
    xs = [a for a, _ in pts]
    if delta is None:
        delta = default_delta(xs)
    if not delta > 0:
        raise ContourConfigurationError("indentation radius must be positive")
    for a in xs:
        if abs(abs(a) - np.pi) <= delta:
            raise ContourConfigurationError(f"disk of radius {delta} around {a:.6g} reaches ±π")
    if any(b - a <= 2 * delta for a, b in zip(xs, xs[1:])):
        raise ContourConfigurationError(f"disks of radius {delta} around {xs} are not disjoint")
    pieces: list = []
    cur = -np.pi
    for a, sgn in pts:
        pieces.append(_Segment(complex(cur), complex(a - delta)))
        # S+ : lower half circle (theta from π to 2π); S- : upper (π to 0)
        pieces.append(_Arc(complex(a), delta, np.pi, 2 * np.pi if sgn > 0 else 0.0))
        cur = a + delta
    pieces.append(_Segment(complex(cur), complex(np.pi)))
    knots = _knots([pc.length for pc in pieces])
    return ContourParam(tuple(pieces), knots, p, kind="cci", delta=float(delta), indent_centers=tuple(xs))


def build_shifted_line(sigma: float = DEFAULT_SIGMA, p: int = SMOOTHING_ORDER) -> ContourParam:
    """g(t) = -π + 2π w(t) + iσ."""
    if not sigma > 0:
        raise ConfigurationError("the line shift sigma must be positive")
    seg = _Segment(complex(-np.pi, sigma), complex(np.pi, sigma))
    return ContourParam((seg,), np.array([0.0, 1.0]), p, kind="line", sigma=float(sigma))


def check_contour_clearance(contour: ContourParam, eigenvalues: np.ndarray, real_tol: float = 1e-6) -> None:
    """Raise if a non-real Floquet eigenvalue lies where the path deformation needs analyticity.

    For the shifted line: nothing in 0 < Im β < 1.5σ (the strip swept by the
    shift, plus a σ/2 safety margin above the line). For the indented path:
    nothing inside or near an indentation disk.
    """
    ev = np.asarray(eigenvalues, dtype=complex)
    ev = ev[np.abs(ev.imag) > real_tol * (1 + np.abs(ev))]
    if contour.kind == "line":
        s = contour.sigma
        bad = ev[(ev.imag > 0) & (ev.imag < 1.5 * s) & (np.abs(ev.real) <= np.pi)]
        if len(bad):
            raise ContourConfigurationError(
                f"shift sigma={s} is not admissible: Floquet eigenvalue(s) {bad} in 0 < Im < {1.5 * s}")
    else:
        d = contour.delta or 0.0
        for c in contour.indent_centers:
            near = ev[np.abs(ev - c) < 1.5 * d]
            if len(near):
                raise ContourConfigurationError(
                    f"complex Floquet eigenvalue(s) {near} too close to the indentation at {c:.6g}")


@dataclass(frozen=True)
class TrigGrid:
    N: int

    def __post_init__(self):
        if self.N < 2 or self.N % 2:
            raise ConfigurationError(f"N must be an even positive integer, got {self.N}")

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.N + 1) / self.N

    @property
    def weight(self) -> float:
        return 1.0 / self.N

    def frequencies(self) -> np.ndarray:
        return np.arange(-self.N // 2 + 1, self.N // 2 + 1)

    def xi(self, l: int, t):
        """Cardinal trigonometric basis function attached to node l (1-based)."""
        t = np.asarray(t, dtype=float)
        m = self.frequencies()
        tl = l / self.N
        return np.exp(2j * np.pi * np.multiply.outer(t - tl, m)).sum(axis=-1) / self.N


# ---------------------------------------------------------------------------
# Bloch reconstruction


def node_phases(mesh: CellMesh, alphas: np.ndarray, cell_index: int = 0) -> np.ndarray:
    """e^{iα_l (x1(node) + c)} for all nodes, shape (N, M)."""
    x1 = mesh.vertices[:, 0] + cell_index
    return np.exp(1j * np.multiply.outer(np.asarray(alphas), x1))


def reconstruct_field(w_hat: np.ndarray, contour: ContourParam, grid: TrigGrid, mesh: CellMesh,
                      basis: PeriodicBasis, cell_index: int = 0) -> FieldOnCell:
    """u(node) = (1/(2πN)) Σ_l e^{i s(t_l)(x1(node) + c)} ŵ_{l, dof(node)} (zero on Dirichlet nodes)."""
    w_hat = np.asarray(w_hat)
    if w_hat.shape != (grid.N, basis.m_prime):
        raise ConfigurationError(f"Bloch field must be {grid.N} x {basis.m_prime}, got {w_hat.shape}")
    s, _ = contour.nodes(grid)
    dof = basis.dof_of_node
    vals = np.zeros(mesh.n_nodes, dtype=complex)
    ok = dof >= 0
    ph = node_phases(mesh, s, cell_index)[:, ok]
    vals[ok] = np.sum(ph * w_hat[:, dof[ok]], axis=0) / (2 * np.pi * grid.N)
    return FieldOnCell(mesh, vals, cell_index)


def bloch_transform_compact(g: Callable, alpha: complex, mesh: CellMesh, cells: Sequence[int]) -> np.ndarray:
    """Σ_{c in cells} g(x + c e1) e^{-iα(x1 + c)} at the nodes of the unit cell.

    g takes (x1, x2) in strip coordinates and may be complex valued.
    """
    x1, x2 = mesh.vertices[:, 0], mesh.vertices[:, 1]
    out = np.zeros(mesh.n_nodes, dtype=complex)
    for c in cells:
        out += np.asarray(g(x1 + c, x2)) * np.exp(-1j * alpha * (x1 + c))
    return out
