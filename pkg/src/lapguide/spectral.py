"""Dispersion branches, exceptional values and the propagating-mode system.

Exceptional values are the real Floquet exponents β in (-π, π] for which
A(β, k) is singular. They are the real eigenvalues of the quadratic pencil,
computed through the companion linearization

    B1 W = β B2 W,   B1 = [[A1 + k²A4, 0], [0, I]],   B2 = [[-A2, -A3], [I, 0]],

with W = (φ, βφ).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ClassificationError, EigensolverError, StandingWaveError
from .fem import PencilMatrices, splu

CLUSTER_TOL = 1e-6
LAMBDA_TOL = 1e-6
DEFECT_TOL = 1e-6
DENSE_LIMIT = 300


def imag_tolerance(beta: complex) -> float:
    return 1e-6 * (1.0 + abs(beta))


def wrap_to_pi(x):
    """Map real numbers into (-π, π]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y <= -np.pi, y + 2 * np.pi, y)
    return float(y) if np.ndim(y) == 0 else y


# ---------------------------------------------------------------------------
# dispersion diagram


@dataclass(frozen=True)
class DispersionDiagram:
    alphas: np.ndarray    # (A,)
    branches: np.ndarray  # (A, m) ascending per row

    def to_csv(self, path) -> None:
        m = self.branches.shape[1]
        header = "alpha," + ",".join(f"mu{i + 1}" for i in range(m))
        np.savetxt(path, np.column_stack([self.alphas, self.branches]), delimiter=",",
                   header=header, comments="", fmt="%.12g")


def _start_vector(n: int) -> np.ndarray:
    """Fixed Arnoldi start vector, so repeated runs are bitwise reproducible."""
    return np.random.default_rng(12345).standard_normal(n)


def _hermitian_eigs(H: sp.spmatrix, Mn: sp.spmatrix, m: int, sigma: float) -> np.ndarray:
    """m generalized eigenvalues of (H, Mn) closest to sigma, ascending."""
    n = H.shape[0]
    if n <= DENSE_LIMIT or m >= n - 1:
        w = sla.eigh(H.toarray(), Mn.toarray(), eigvals_only=True)
        w = w[np.argsort(np.abs(w - sigma))[:m]]
        return np.sort(w)
    try:
        w = spla.eigsh(sp.csc_matrix(H), k=m, M=sp.csc_matrix(Mn), sigma=sigma, which="LM",
                       return_eigenvectors=False, tol=1e-12, v0=_start_vector(n))
    except spla.ArpackNoConvergence as exc:
        raise EigensolverError(f"dispersion eigensolver did not converge: {exc}") from exc
    return np.sort(np.real(w))


def dispersion_branches(P: PencilMatrices, alphas: Sequence[float], m: int) -> DispersionDiagram:
    """Lowest m eigenvalues μ of (A1 + αA2 + α²A3) φ = μ (-A4) φ for each real α."""
    if m < 1:
        raise ValueError("need at least one branch")
    Mn = (-P.A4).tocsc()
    alphas = np.asarray(alphas, dtype=float)
    out = np.empty((len(alphas), m))
    for i, a in enumerate(alphas):
        H = (P.A1 + a * P.A2 + a * a * P.A3).tocsc()
        # the form is nonnegative, so a shift below zero targets the bottom of the spectrum
        out[i] = _hermitian_eigs(H, Mn, m, sigma=-1.0)
    return DispersionDiagram(alphas, out)


# ---------------------------------------------------------------------------
# Floquet eigenvalues of the quadratic pencil


@dataclass(frozen=True, eq=False)
class ExceptionalValue:
    beta_hat: float
    multiplicity: int
    raw_eigenvectors: np.ndarray  # (M', m) orthonormal columns
    independence: float = 1.0     # smallest singular value of the unit-normalized cluster vectors


@dataclass(frozen=True, eq=False)
class FloquetSpectrum:
    """All pencil eigenvalues found inside the window Re β ∈ [-π, π], |Im β| ≤ imag_window."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (M', count)
    imag_window: float

    def complex_near_real(self, lo: float, hi: float, tol_fn=imag_tolerance) -> np.ndarray:
        b = self.eigenvalues
        tol = np.array([tol_fn(x) for x in b])
        a = np.abs(b.imag)
        return b[(a > tol) & (a < hi) & (a >= lo)]


def _companion_dense(P: PencilMatrices, k: float):
    n = P.m_prime
    K = (P.A1 + k**2 * P.A4).toarray()
    I = np.eye(n)
    Z = np.zeros((n, n))
    B1 = np.block([[K, Z], [Z, I]])
    B2 = np.block([[-P.A2.toarray(), -P.A3.toarray()], [I, Z]])
    w, V = sla.eig(B1, B2)
    ok = np.isfinite(w)
    return w[ok], V[:n, ok]


def _shift_invert_operator(P: PencilMatrices, k: float, shift: complex):
    n = P.m_prime
    lu = splu(P.matrix(shift, k))
    A2, A3 = P.A2.tocsr(), P.A3.tocsr()

    def op(x):
        x = np.asarray(x).ravel()
        x1, x2 = x[:n], x[n:]
        a = -(A2 @ x1) - (A3 @ x2)  # B2 x, first block
        c = x1
        y1 = lu.solve(a - shift * (A3 @ c))
        return np.concatenate([y1, c + shift * y1])

    return spla.LinearOperator((2 * n, 2 * n), matvec=op, dtype=complex)


def floquet_spectrum(P: PencilMatrices, k: float, imag_window: float = 0.6,
                     n_shifts: int = 9, nev: int = 10, max_rounds: int = 5) -> FloquetSpectrum:
    """Eigenvalues of the quadratic pencil in the rectangle [-π, π] x [-imag_window, imag_window].

    Shift-invert Arnoldi at real shifts spread over [-π, π]; the nev
    eigenvalues returned per shift are the nearest ones, so everything within
    the distance of the farthest one is known to be complete. Shifts whose
    trusted disks do not cover the rectangle are re-run with more eigenpairs.
    """
    n = P.m_prime
    if n <= DENSE_LIMIT:
        w, V = _companion_dense(P, k)
        keep = (np.abs(w.real) <= np.pi + 1e-9) & (np.abs(w.imag) <= imag_window)
        return FloquetSpectrum(w[keep], V[:, keep], imag_window)

    shifts = np.linspace(-np.pi, np.pi, n_shifts)
    spacing = shifts[1] - shifts[0]
    need = np.hypot(spacing / 2, imag_window) * 1.05
    found_w, found_v = [], []
    counts = np.full(n_shifts, nev)
    done = np.zeros(n_shifts, dtype=bool)
    radius = np.zeros(n_shifts)
    for _ in range(max_rounds):
        for s_i, shift in enumerate(shifts):
            if done[s_i]:
                continue
            op = _shift_invert_operator(P, k, shift)
            kk = int(min(counts[s_i], 2 * n - 2))
            try:
                theta, W = spla.eigs(op, k=kk, which="LM", tol=1e-13, maxiter=5000,
                                     v0=_start_vector(op.shape[0]))
            except spla.ArpackNoConvergence as exc:
                raise EigensolverError(f"Floquet eigensolver did not converge at shift {shift}") from exc
            beta = shift + 1.0 / theta
            dist = np.abs(beta - shift)
            radius[s_i] = np.max(dist) * (1 - 1e-9)
            inside = dist < radius[s_i]
            found_w.append(beta[inside])
            vec = W[:n, inside]
            found_v.append(vec / np.linalg.norm(vec, axis=0))
            if radius[s_i] >= need:
                done[s_i] = True
            else:
                counts[s_i] *= 2
        if done.all():
            break
    if not done.all():
        raise EigensolverError("could not cover the Floquet window with trusted shift-invert disks")
    w = np.concatenate(found_w)
    V = np.concatenate(found_v, axis=1)
    keep = (np.abs(w.real) <= np.pi + 1e-9) & (np.abs(w.imag) <= imag_window)
    w, V = w[keep], V[:, keep]
    # merge duplicates reported by neighbouring shifts; keep the smallest residual
    order = np.argsort(w.real)
    w, V = w[order], V[:, order]
    res = _residuals(P, k, w, V)
    kept: list[int] = []
    for i in range(len(w)):
        dup = [j for j in kept if abs(w[j] - w[i]) < 1e-8 * (1 + abs(w[i]))
               and abs(np.vdot(V[:, j], V[:, i])) > 0.999]
        if dup:
            j = dup[0]
            if res[i] < res[j]:
                kept[kept.index(j)] = i
        else:
            kept.append(i)
    kept.sort()
    return FloquetSpectrum(w[kept], V[:, kept], imag_window)


def _residuals(P: PencilMatrices, k: float, w, V) -> np.ndarray:
    out = np.empty(len(w))
    for i, b in enumerate(w):
        v = V[:, i]
        out[i] = np.linalg.norm(P.matrix(b, k) @ v) / np.linalg.norm(v)
    return out


def find_exceptional_values(P: PencilMatrices, k: float, imag_tol=None,
                            spectrum: Optional[FloquetSpectrum] = None) -> list[ExceptionalValue]:
    """Real Floquet eigenvalues in (-π, π], clustered into multiplicities."""
    spec = spectrum if spectrum is not None else floquet_spectrum(P, k)
    tol_fn = imag_tolerance if imag_tol is None else (lambda b: float(imag_tol))
    w, V = spec.eigenvalues, spec.eigenvectors
    real = np.array([abs(b.imag) < tol_fn(b) for b in w], dtype=bool)
    beta = w.real[real]
    vecs = V[:, real]
    inwin = (beta > -np.pi) & (beta <= np.pi)
    beta, vecs = beta[inwin], vecs[:, inwin]
    order = np.argsort(beta)
    beta, vecs = beta[order], vecs[:, order]
    out: list[ExceptionalValue] = []
    i = 0
    while i < len(beta):
        j = i + 1
        while j < len(beta) and beta[j] - beta[j - 1] < CLUSTER_TOL:
            j += 1
        b = float(np.mean(beta[i:j]))
        cluster = vecs[:, i:j] / np.linalg.norm(vecs[:, i:j], axis=0)
        indep = float(np.linalg.svd(cluster, compute_uv=False)[-1]) if j - i > 1 else 1.0
        Q, _ = np.linalg.qr(cluster)
        out.append(ExceptionalValue(b, j - i, _refine_null_space(P, k, b, Q), indep))
        i = j
    return out


def _refine_null_space(P: PencilMatrices, k: float, beta: float, Q: np.ndarray, steps: int = 2) -> np.ndarray:
    """A couple of inverse-iteration sweeps at a slightly perturbed shift."""
    if P.m_prime <= DENSE_LIMIT:
        return Q
    lu = splu(P.matrix(beta * (1 + 1e-10) + 1e-10, k))
    for _ in range(steps):
        Q = lu.solve(Q.astype(complex))
        Q, _ = np.linalg.qr(Q)
    return Q


# ---------------------------------------------------------------------------
# normalized modes


@dataclass(frozen=True, eq=False)
class ModeSystem:
    """Modes attached to one exceptional value."""

    beta_hat: float
    lambdas: np.ndarray  # (m,)
    phi_hat: np.ndarray  # (M', m), normalized so that 2k ∫ n φ̂ conj(φ̂') = δ

    @property
    def multiplicity(self) -> int:
        return len(self.lambdas)

    def phi(self, x1_shift: float = 0.0):
        """Phase factors turning φ̂ values at x into φ = e^{iβ(x1+shift)} φ̂ values."""
        return lambda x1: np.exp(1j * self.beta_hat * (np.asarray(x1) + x1_shift))


def build_mode_system(ev: ExceptionalValue, P: PencilMatrices, k: float,
                      lambda_tol: float = LAMBDA_TOL) -> ModeSystem:
    """Diagonalize the group-velocity form on the null space and normalize.

    a = ½ Vᴴ (A2 + 2β A3) V is the Hermitian form of ∫(-i∂1 φ + βφ) conj(ψ);
    b = k Vᴴ (-A4) V weights with the index n.
    """
    if ev.independence < DEFECT_TOL:
        # a merged pair with (nearly) one eigenvector: a band edge, where the group velocity vanishes
        raise StandingWaveError(f"defective exceptional value at β={ev.beta_hat:.6g} "
                                f"(cluster vectors independent only to {ev.independence:.2g}); k² sits on a band edge")
    V = ev.raw_eigenvectors
    Mn = (-P.A4)
    a = 0.5 * (V.conj().T @ ((P.A2 + 2 * ev.beta_hat * P.A3) @ V))
    b = k * (V.conj().T @ (Mn @ V))
    a = 0.5 * (a + a.conj().T)
    b = 0.5 * (b + b.conj().T)
    lam, c = sla.eigh(a, b)
    if np.any(np.abs(lam) < lambda_tol):
        raise StandingWaveError(f"zero group velocity at β={ev.beta_hat:.6g} (λ={lam})")
    phi = V @ c / np.sqrt(2.0)  # cᴴ b c = I, so 2k φᴴ Mn φ = I after the √2
    # fix the arbitrary phase: largest entry real positive (deterministic output)
    for i in range(phi.shape[1]):
        j = np.argmax(np.abs(phi[:, i]))
        phi[:, i] *= np.conj(phi[j, i]) / abs(phi[j, i])
    return ModeSystem(ev.beta_hat, lam, phi)


def mode_gram(ms: ModeSystem, P: PencilMatrices, k: float) -> np.ndarray:
    return 2 * k * (ms.phi_hat.conj().T @ ((-P.A4) @ ms.phi_hat))


def dispersion_slopes(P: PencilMatrices, k: float, beta: float, m: int, d: float = 1e-4) -> np.ndarray:
    """Centered finite differences μ'(β) of the m branches crossing k² at β, ascending."""
    Mn = (-P.A4).tocsc()
    vals = []
    for a in (beta - d, beta + d):
        H = (P.A1 + a * P.A2 + a * a * P.A3).tocsc()
        vals.append(np.sort(_hermitian_eigs(H, Mn, m, sigma=k**2)))
    minus, plus = vals
    return np.sort((plus - minus[::-1]) / (2 * d))


def classify_modes(systems: Sequence[ModeSystem], P: Optional[PencilMatrices] = None,
                   k: Optional[float] = None) -> tuple[list[float], list[float]]:
    """Split exceptional values into S+ (a rightward mode, λ > 0) and S- (otherwise).

    If the pencil is given, sign(λ) is cross-checked against the slope of the
    dispersion branches (μ' = 2kλ).
    """
    s_plus, s_minus = [], []
    for ms in systems:
        if np.any(np.abs(ms.lambdas) < LAMBDA_TOL):
            raise StandingWaveError(f"standing wave at β={ms.beta_hat:.6g}")
        if P is not None and k is not None:
            slopes = dispersion_slopes(P, k, ms.beta_hat, ms.multiplicity)
            if not np.array_equal(np.sign(slopes), np.sign(np.sort(ms.lambdas))):
                raise ClassificationError(
                    f"β={ms.beta_hat:.6g}: sign(λ)={np.sign(ms.lambdas)} but μ' ≈ {slopes}")
        (s_plus if np.any(ms.lambdas > 0) else s_minus).append(ms.beta_hat)
    return s_plus, s_minus


# ---------------------------------------------------------------------------
# convergence in h


@dataclass(frozen=True)
class EigenErrorTable:
    hs: np.ndarray
    values: np.ndarray
    errors_vs_finest: np.ndarray  # |v(h) - v(h_min)| for all but the finest
    slope: float                  # least-squares log-log slope of errors_vs_finest
    observed_order: Optional[float]
    extrapolated: Optional[float]


def loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def estimate_eigen_error(hs: Sequence[float], values: Sequence[float]) -> EigenErrorTable:
    """Self-referenced errors, their log-log slope, and Richardson extrapolation.

    The observed order comes from the last three values; extrapolation is
    skipped (with a warning) when successive differences do not shrink.
    """
    hs = np.asarray(hs, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(hs) < 3:
        raise ValueError("need at least three mesh sizes")
    order = np.argsort(-hs)
    hs, v = hs[order], v[order]
    err = np.abs(v[:-1] - v[-1])
    slope = loglog_slope(hs[:-1], err) if np.all(err > 0) else float("nan")
    d1, d2 = v[-2] - v[-3], v[-1] - v[-2]
    p = ext = None
    if d1 == 0 or abs(d2) >= abs(d1) or np.sign(d1) != np.sign(d2):
        if d1 != 0 or d2 != 0:
            warnings.warn("non-monotone eigenvalue sequence; no extrapolation", RuntimeWarning)
        elif d1 == 0 and d2 == 0:
            p, ext = float("inf"), float(v[-1])
    else:
        r = hs[-2] / hs[-1]
        p = float(np.log(abs(d1 / d2)) / np.log(r))
        ext = float(v[-1] + d2 / (r**p - 1.0))
    return EigenErrorTable(hs, v, err, slope, p, ext)


# ---------------------------------------------------------------------------
# one-stop analysis


@dataclass(frozen=True, eq=False)
class SpectralData:
    k: float
    exceptional: list[ExceptionalValue]
    modes: list[ModeSystem]
    s_plus: list[float]
    s_minus: list[float]
    spectrum: FloquetSpectrum

    @property
    def all_betas(self) -> list[float]:
        return [ev.beta_hat for ev in self.exceptional]

    def flat_modes(self):
        """(beta, lambda, phi_hat column) for every mode of every exceptional value."""
        out = []
        for ms in self.modes:
            for i in range(ms.multiplicity):
                out.append((ms.beta_hat, float(ms.lambdas[i]), ms.phi_hat[:, i]))
        return out

    def write_report_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("beta_hat,multiplicity,lambdas,class\n")
            for ms in self.modes:
                cls = "S+" if ms.beta_hat in self.s_plus else "S-"
                lam = ";".join(f"{x:.10g}" for x in ms.lambdas)
                fh.write(f"{ms.beta_hat:.12g},{ms.multiplicity},{lam},{cls}\n")


def analyze_spectrum(P: PencilMatrices, k: float, imag_window: float = 0.6,
                     cross_check: bool = True) -> SpectralData:
    spec = floquet_spectrum(P, k, imag_window=imag_window)
    evs = find_exceptional_values(P, k, spectrum=spec)
    modes = [build_mode_system(ev, P, k) for ev in evs]
    s_plus, s_minus = classify_modes(modes, P if cross_check else None, k)
    return SpectralData(k, evs, modes, s_plus, s_minus, spec)
