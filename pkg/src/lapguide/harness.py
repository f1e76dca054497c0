"""Experiment orchestration: run configs, convergence tables, comparisons and plot data."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cci import CellDiscretization, cci_solve, discretize, format_report, write_field_csv
from .contours import DEFAULT_SIGMA, build_cci_contour
from .decomposition import decomp_solve
from .errors import ConfigurationError, MissingArtifactError
from .fem import FieldOnCell
from .oracle import DEFAULT_EPSILONS, damped_truncated_solve, lap_extrapolate
from .problem import ScatteringProblem, example_problem, load_problem_config
from .spectral import dispersion_branches, loglog_slope

METHODS = ("cci", "decomp", "oracle")
VERBS = ("dispersion", "exceptional", "solve", "converge", "compare", "oracle")


@dataclass(frozen=True)
class RunConfig:
    verb: str
    problem: ScatteringProblem
    method: str = "cci"
    h: tuple = (0.02,)
    N: tuple = (64,)
    delta: Optional[float] = None
    sigma: float = DEFAULT_SIGMA
    cells: tuple = (0,)
    out: str = "out"
    ref_N: Optional[int] = None
    ref_h: Optional[float] = None
    axis: str = "N"
    epsilons: tuple = DEFAULT_EPSILONS
    R: Optional[int] = None
    branches: int = 6
    n_alpha: int = 121
    svg: bool = True

    def validate(self) -> "RunConfig":
        if self.verb not in VERBS:
            raise ConfigurationError(f"unknown verb {self.verb!r}; expected one of {VERBS}")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for h in self.h + ((self.ref_h,) if self.ref_h else ()):
            if not 0 < h < 0.5:
                raise ConfigurationError(f"mesh size h={h} must lie in (0, 0.5)")
        for N in self.N + ((self.ref_N,) if self.ref_N else ()):
            if N < 4 or N % 2:
                raise ConfigurationError(f"N={N} must be an even integer >= 4")
        if self.delta is not None and not self.delta > 0:
            raise ConfigurationError("--delta must be positive")
        if not self.sigma > 0:
            raise ConfigurationError("--sigma must be positive")
        if self.axis not in ("h", "N"):
            raise ConfigurationError("--axis must be 'h' or 'N'")
        if self.verb == "converge":
            if self.method == "oracle":
                raise ConfigurationError("convergence studies need --method cci or decomp")
            if self.axis == "N" and self.ref_N is None:
                raise ConfigurationError("an N study needs --ref-N (the reference quadrature size)")
            if self.axis == "h" and self.ref_h is None:
                raise ConfigurationError("an h study needs --ref-h (the reference mesh size)")
        if self.verb == "oracle" and (len(self.epsilons) < 3 or any(e <= 0 for e in self.epsilons)):
            raise ConfigurationError("the oracle needs at least three positive damping values")
        return self


@dataclass
class ConvergenceTable:
    axis: str
    fixed: dict
    rows: list                # (param, rel_err), sorted by param
    reference: dict
    slope: float = float("nan")

    def __post_init__(self):
        self.rows = sorted((float(p), float(e)) for p, e in self.rows)
        self.slope = self.compute_slope()

    def compute_slope(self) -> float:
        pts = [(p, e) for p, e in self.rows if e > 0]
        if len(pts) < 2:
            return float("nan")
        return loglog_slope(*zip(*pts))

    @property
    def params(self) -> np.ndarray:
        return np.array([p for p, _ in self.rows])

    @property
    def errors(self) -> np.ndarray:
        return np.array([e for _, e in self.rows])

    def ratios(self) -> np.ndarray:
        """err(x_i) / err(x_{i+1}) along increasing parameter."""
        e = self.errors
        return e[:-1] / e[1:]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "rel_err"])
            for p, e in self.rows:
                w.writerow([f"{p:.12g}", f"{e:.12e}"])

    def summary(self) -> dict:
        return {"axis": self.axis, "fixed": self.fixed, "reference": self.reference,
                "rows": self.rows, "slope": self.slope}


def field_rel_diff(reference: FieldOnCell, other: FieldOnCell) -> float:
    """‖other - reference‖ / ‖reference‖ in L²(Ω_c), interpolating `other` onto the reference mesh."""
    ref_mesh = reference.mesh
    if other.mesh is ref_mesh or (other.mesh.n_nodes == ref_mesh.n_nodes
                                  and np.array_equal(other.mesh.vertices, ref_mesh.vertices)):
        vals = other.values
    else:
        vals = other.evaluate(ref_mesh.vertices[:, 0], ref_mesh.vertices[:, 1])
    return reference.rel_l2_diff(FieldOnCell(ref_mesh, vals, reference.cell_index))


class Session:
    """Caches discretizations so studies sharing a mesh size share spectral work."""

    def __init__(self, problem: ScatteringProblem, pattern: str = "equilateral"):
        self.problem = problem
        self.pattern = pattern
        self._discs: dict = {}

    def disc(self, h: float) -> CellDiscretization:
        key = round(float(h), 12)
        if key not in self._discs:
            self._discs[key] = discretize(self.problem, h, self.pattern)
        return self._discs[key]

    def solve(self, method: str, h: float, N: int, delta=None, sigma=DEFAULT_SIGMA, cells=(0,)):
        """(fields, report) for one solver run."""
        if method == "cci":
            s = cci_solve(self.problem, h, N, delta=delta, cells=cells, disc=self.disc(h))
        elif method == "decomp":
            s = decomp_solve(self.problem, h, N, sigma=sigma, cells=cells, disc=self.disc(h))
        else:
            raise ConfigurationError(f"method {method!r} is not a quadrature solver")
        return s.fields, s.report


def convergence_study(session: Session, method: str, axis: str, values: Sequence, fixed: float,
                      ref: float, delta=None, sigma=DEFAULT_SIGMA) -> ConvergenceTable:
    """Self-referenced errors on Ω0: the run at `ref` plays the exact solution."""
    if axis == "N":
        h = float(fixed)
        ref_field = session.solve(method, h, int(ref), delta, sigma)[0][0]
        rows = [(N, field_rel_diff(ref_field, session.solve(method, h, int(N), delta, sigma)[0][0]))
                for N in values]
        return ConvergenceTable("N", {"h": h, "method": method}, rows, {"N": int(ref), "h": h})
    N = int(fixed)
    ref_field = session.solve(method, float(ref), N, delta, sigma)[0][0]
    rows = [(h, field_rel_diff(ref_field, session.solve(method, float(h), N, delta, sigma)[0][0]))
            for h in values]
    return ConvergenceTable("h", {"N": N, "method": method}, rows, {"N": N, "h": float(ref)})


def compare_methods(session: Session, hs: Sequence[float], N: int, delta=None,
                    sigma=DEFAULT_SIGMA) -> ConvergenceTable:
    """Relative Ω0 difference between the two quadrature solvers at each h."""
    rows = []
    for h in hs:
        u_cci = session.solve("cci", h, N, delta, sigma)[0][0]
        u_dec = session.solve("decomp", h, N, delta, sigma)[0][0]
        rows.append((h, field_rel_diff(u_cci, u_dec)))
    return ConvergenceTable("h", {"N": int(N), "compare": "cci-vs-decomp"}, rows, {"method": "cci"})


# ---------------------------------------------------------------------------
# run


def _write(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def run(cfg: RunConfig) -> dict:
    """Execute one verb and write its artifacts under cfg.out; returns a summary dict."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    prob = cfg.problem
    session = Session(prob)
    out = cfg.out
    summary: dict = {"verb": cfg.verb, "problem": prob.name, "out": out}
    if cfg.verb == "dispersion":
        disc = session.disc(cfg.h[0])
        diag = dispersion_branches(disc.pencil, np.linspace(-np.pi, np.pi, cfg.n_alpha), cfg.branches)
        diag.to_csv(os.path.join(out, "dispersion.csv"))
        summary["k_squared"] = prob.k_squared
        _write(os.path.join(out, "report.json"), format_report(summary))
        emit_plot_data("dispersion", out, cfg.svg, k_squared=prob.k_squared)
    elif cfg.verb == "exceptional":
        rows = []
        for h in cfg.h:
            spec = session.disc(h).spectral
            for ms in spec.modes:
                cls = "S+" if ms.beta_hat in spec.s_plus else "S-"
                for lam in ms.lambdas:
                    rows.append((h, ms.beta_hat, ms.multiplicity, float(lam), cls))
        with open(os.path.join(out, "exceptional.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "beta_hat", "multiplicity", "lambda", "class"])
            for r in rows:
                w.writerow([f"{r[0]:.12g}", f"{r[1]:.12g}", r[2], f"{r[3]:.12g}", r[4]])
        summary["exceptional"] = [list(r) for r in rows]
        _write(os.path.join(out, "report.json"), format_report(summary))
    elif cfg.verb == "solve":
        if cfg.method == "oracle":
            return run(replace(cfg, verb="oracle"))
        h, N = cfg.h[0], cfg.N[0]
        if cfg.method == "cci":
            s = cci_solve(prob, h, N, delta=cfg.delta, cells=cfg.cells, disc=session.disc(h))
            s.contour.to_csv(os.path.join(out, "contour.csv"))
        else:
            s = decomp_solve(prob, h, N, sigma=cfg.sigma, cells=cfg.cells, disc=session.disc(h))
        write_field_csv(os.path.join(out, "field.csv"), s.fields)
        _write(os.path.join(out, "report.json"), format_report(s.report))
        summary.update({"norm_omega0": s.field.l2_norm(), "report": s.report})
        emit_plot_data("field", out, cfg.svg)
        if cfg.method == "cci":
            emit_plot_data("contour", out, cfg.svg)
    elif cfg.verb == "converge":
        if cfg.axis == "N":
            table = convergence_study(session, cfg.method, "N", cfg.N, cfg.h[0], cfg.ref_N, cfg.delta, cfg.sigma)
        else:
            table = convergence_study(session, cfg.method, "h", cfg.h, cfg.N[0], cfg.ref_h, cfg.delta, cfg.sigma)
        table.to_csv(os.path.join(out, "convergence.csv"))
        summary.update(table.summary())
        _write(os.path.join(out, "report.json"), format_report(summary))
        emit_plot_data("convergence", out, cfg.svg)
    elif cfg.verb == "compare":
        table = compare_methods(session, cfg.h, cfg.N[0], cfg.delta, cfg.sigma)
        table.to_csv(os.path.join(out, "convergence.csv"))
        summary.update(table.summary())
        _write(os.path.join(out, "report.json"), format_report(summary))
        emit_plot_data("convergence", out, cfg.svg)
    elif cfg.verb == "oracle":
        h = cfg.h[0]
        runs = [damped_truncated_solve(prob, e, cfg.R, h, cells=cfg.cells) for e in cfg.epsilons]
        ext = lap_extrapolate(runs)
        write_field_csv(os.path.join(out, "field.csv"), {0: ext.field})
        summary.update({"epsilons": list(cfg.epsilons), "R": [r.R for r in runs],
                        "decay_indicators": [r.decay_indicator for r in runs],
                        "extrapolation_indicator": ext.error_indicator, "h": h})
        if cfg.ref_N:
            ref = cci_solve(prob, h, cfg.ref_N, delta=cfg.delta, disc=session.disc(h)).field
            summary["rel_diff_vs_cci"] = field_rel_diff(ref, ext.field)
        _write(os.path.join(out, "report.json"), format_report(summary))
        emit_plot_data("field", out, cfg.svg)
    return summary


# ---------------------------------------------------------------------------
# plot data


_ARTIFACT = {"dispersion": "dispersion.csv", "contour": "contour.csv", "field": "field.csv",
             "convergence": "convergence.csv"}


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def emit_plot_data(kind: str, out_dir: str, svg: bool = True, **opts) -> str:
    """Check the CSV behind a figure and optionally render it as SVG; returns the CSV path."""
    if kind not in _ARTIFACT:
        raise ConfigurationError(f"unknown plot kind {kind!r}; expected one of {tuple(_ARTIFACT)}")
    path = os.path.join(out_dir, _ARTIFACT[kind])
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} not found; run the corresponding verb first")
    if not svg:
        return path
    header, data = _read_csv(path)
    target = os.path.splitext(path)[0] + ".svg"
    if kind == "dispersion":
        series = [(data[:, 0], data[:, j], header[j]) for j in range(1, data.shape[1])]
        hlines = [opts["k_squared"]] if "k_squared" in opts else []
        svg_text = svg_line_plot(series, "alpha", "mu", hlines=hlines)
    elif kind == "contour":
        svg_text = svg_line_plot([(data[:, 1], data[:, 2], "contour")], "Re alpha", "Im alpha", equal=True)
    elif kind == "convergence":
        svg_text = svg_line_plot([(data[:, 0], data[:, 1], "rel_err")], "param", "rel_err",
                                 logx=True, logy=True, markers=True)
    else:
        svg_text = svg_heat_plot(data[:, 1], data[:, 2], data[:, 3], "Re u")
    _write(target, svg_text)
    return path


_W, _H, _PAD = 640, 400, 60
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        return [10.0**e for e in range(int(np.floor(lo)), int(np.ceil(hi)) + 1)]
    return list(np.linspace(lo, hi, 5))


def svg_line_plot(series, xlabel: str, ylabel: str, logx=False, logy=False, markers=False,
                  hlines: Sequence[float] = (), equal=False) -> str:
    tx = np.log10 if logx else (lambda v: np.asarray(v, dtype=float))
    ty = np.log10 if logy else (lambda v: np.asarray(v, dtype=float))
    xs = np.concatenate([tx(np.asarray(s[0], dtype=float)) for s in series])
    ys = np.concatenate([ty(np.asarray(s[1], dtype=float)) for s in series] + [ty(np.asarray(hlines, dtype=float))])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    if equal:
        span = max(x1 - x0, y1 - y0)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        x0, x1, y0, y1 = cx - span / 2, cx + span / 2, cy - span * 0.3, cy + span * 0.3

    def px(v):
        return _PAD + (v - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def py(v):
        return _H - _PAD - (v - y0) / (y1 - y0) * (_H - 2 * _PAD)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
             f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
             f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle">{xlabel}</text>',
             f'<text x="15" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 15 {_H / 2})">{ylabel}</text>']
    for t in _ticks(x0, x1, logx):
        v = np.log10(t) if logx else t
        if x0 - 1e-9 <= v <= x1 + 1e-9:
            parts.append(f'<text x="{px(v):.1f}" y="{_H - _PAD + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1, logy):
        v = np.log10(t) if logy else t
        if y0 - 1e-9 <= v <= y1 + 1e-9:
            parts.append(f'<text x="{_PAD - 5}" y="{py(v) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for hv in hlines:
        y = py(float(ty(np.asarray(hv, dtype=float))))
        parts.append(f'<line x1="{_PAD}" y1="{y:.1f}" x2="{_W - _PAD}" y2="{y:.1f}" stroke="gray" stroke-dasharray="4 3"/>')
    for i, (x, y, _label) in enumerate(series):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(tx(np.asarray(x, dtype=float)),
                                                                  ty(np.asarray(y, dtype=float))))
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if markers:
            for a, b in zip(tx(np.asarray(x, dtype=float)), ty(np.asarray(y, dtype=float))):
                parts.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_heat_plot(x, y, v, label: str, nx: int = 160, ny: int = 40) -> str:
    """Cell-averaged heat map of scattered nodal values on a regular pixel grid."""
    x, y, v = (np.asarray(a, dtype=float) for a in (x, y, v))
    x0, x1, y0, y1 = x.min(), x.max(), y.min(), y.max()
    ix = np.clip(((x - x0) / max(x1 - x0, 1e-300) * nx).astype(int), 0, nx - 1)
    iy = np.clip(((y - y0) / max(y1 - y0, 1e-300) * ny).astype(int), 0, ny - 1)
    acc = np.zeros((nx, ny))
    cnt = np.zeros((nx, ny))
    np.add.at(acc, (ix, iy), v)
    np.add.at(cnt, (ix, iy), 1)
    img = np.where(cnt > 0, acc / np.maximum(cnt, 1), np.nan)
    vmax = np.nanmax(np.abs(img)) or 1.0
    pw = (_W - 2 * _PAD) / nx
    ph = (_H - 2 * _PAD) / ny
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
             f'<rect width="{_W}" height="{_H}" fill="white"/>',
             f'<text x="{_W / 2}" y="20" text-anchor="middle">{label} (max |value| {vmax:.3g})</text>']
    for i in range(nx):
        for j in range(ny):
            val = img[i, j]
            if np.isnan(val):
                continue
            t = val / vmax
            r, b = (255, int(255 * (1 - t))) if t > 0 else (int(255 * (1 + t)), 255)
            g = int(255 * (1 - abs(t)))
            parts.append(f'<rect x="{_PAD + i * pw:.2f}" y="{_H - _PAD - (j + 1) * ph:.2f}" width="{pw + 0.05:.2f}" '
                         f'height="{ph + 0.05:.2f}" fill="rgb({r},{g},{b})"/>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle">x1 from {x0:.3g} to {x1:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def problem_from_args(example: Optional[str], config: Optional[str], bc: Optional[str]) -> ScatteringProblem:
    if config:
        if not os.path.exists(config):
            raise ConfigurationError(f"config file {config} not found")
        prob = load_problem_config(config)
        if bc and bc != prob.bc:
            prob = replace(prob, bc=bc)
        return prob
    if example is None:
        raise ConfigurationError("give --example or --config")
    return example_problem(example, bc=bc) if bc else example_problem(example)


__all__ = ["RunConfig", "ConvergenceTable", "Session", "convergence_study", "compare_methods",
           "field_rel_diff", "run", "emit_plot_data", "svg_line_plot", "svg_heat_plot", "problem_from_args"]
