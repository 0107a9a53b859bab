"""Divergences between analytic densities (grid quadrature) and sample checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .targets import BumpTarget, GaussianMixture

MASS_TOL = 1e-6
TAIL_TOL = 1e-9
KINDS = ("chi2", "kl", "tv", "fisher")


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor grid with composite Simpson weights; ``n`` must be 2**k + 1."""

    bounds: tuple
    n: int = 2 ** 14 + 1

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("quadrature grids support dimension 1 or 2")
        k = math.log2(self.n - 1)
        if self.n < 3 or k != int(k):
            raise ValueError("points per axis must be a power of two plus one")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.n) for lo, hi in self.bounds]

    def points(self) -> np.ndarray:
        axes = self.axes()
        if self.dim == 1:
            return axes[0][:, None]
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def integrate(self, values: np.ndarray) -> float:
        return self._simpson(values, self.axes())

    def integrate_with_error(self, values: np.ndarray) -> tuple[float, float]:
        """Integral plus |I_n - I_{n/2}| from the every-other-point subgrid."""
        full = self.integrate(values)
        axes = self.axes()
        if self.dim == 1:
            coarse = self._simpson(values[::2], [axes[0][::2]])
        else:
            v = values.reshape(self.n, self.n)[::2, ::2]
            coarse = self._simpson(v.ravel(), [a[::2] for a in axes])
        return full, abs(full - coarse)

    def _simpson(self, values, axes) -> float:
        if len(axes) == 1:
            return float(integrate.simpson(values, x=axes[0]))
        v = values.reshape(len(axes[0]), len(axes[1]))
        inner = integrate.simpson(v, x=axes[1], axis=1)
        return float(integrate.simpson(inner, x=axes[0]))

    def widened(self, factor: float = 1.5) -> "QuadratureGrid":
        new = []
        for lo, hi in self.bounds:
            c, r = 0.5 * (lo + hi), 0.5 * (hi - lo) * factor
            new.append((c - r, c + r))
        return QuadratureGrid(tuple(new), self.n)

    def refined(self) -> "QuadratureGrid":
        return QuadratureGrid(self.bounds, 2 * (self.n - 1) + 1)


def default_bounds(target, width: float = 12.0) -> list[tuple[float, float]]:
    if isinstance(target, GaussianMixture):
        sd = np.sqrt(target.variances)[:, None]
        lo = np.min(target.means - width * sd, axis=0)
        hi = np.max(target.means + width * sd, axis=0)
        return list(zip(lo.tolist(), hi.tolist()))
    if isinstance(target, BumpTarget):
        return [(-width, 1.5 * target.L_param + 2.0)]
    raise TypeError(f"no default bounds for {type(target).__name__}")


def covering_grid(*targets, n: Optional[int] = None) -> QuadratureGrid:
    """Smallest axis-aligned grid covering the default bounds of every target."""
    dim = targets[0].dim
    boxes = [default_bounds(t) for t in targets]
    bounds = tuple((min(b[i][0] for b in boxes), max(b[i][1] for b in boxes)) for i in range(dim))
    if n is None:
        n = 2 ** 15 + 1 if dim == 1 else 2 ** 9 + 1
    return QuadratureGrid(bounds, n)


def _checked_grid(grid: QuadratureGrid, *densities) -> QuadratureGrid:
    """Widen the grid once if some density loses more than ``MASS_TOL`` of mass."""
    for attempt in range(2):
        pts = grid.points()
        masses = [grid.integrate(np.exp(d.log_density(pts))) for d in densities]
        if all(abs(m - 1.0) <= MASS_TOL for m in masses) or attempt == 1:
            return grid
        grid = grid.widened()
    return grid


@dataclass(frozen=True)
class DivergenceReport:
    kind: str
    value: float
    error: float
    method: str
    diagnostic: str = ""


def quadrature_divergence(q, p, kind: str, grid: Optional[QuadratureGrid] = None) -> DivergenceReport:
    """chi2 / kl / tv / fisher between densities ``q`` and ``p`` by Simpson quadrature.

    ``q`` and ``p`` need ``log_density``; ``fisher`` also needs ``score``.
    TV is computed as ``1 - int min(p, q)`` which keeps relative precision
    when the two laws are nearly disjoint.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown divergence kind {kind!r}")
    if q.dim != p.dim:
        raise ValueError("densities must share a dimension")
    grid = _checked_grid(grid or covering_grid(q, p), q, p)
    rep, tail = _quadrature_once(q, p, kind, grid)
    if tail > TAIL_TOL:
        # chi2 and fisher integrands can decay far slower than q itself; widen once
        rep, tail = _quadrature_once(q, p, kind, grid.widened(2.0))
        if tail > TAIL_TOL:
            return DivergenceReport(kind, math.inf, 0.0, rep.method, "integrand does not decay at the grid edge")
    return rep


def _edge_max(vals: np.ndarray, grid: QuadratureGrid) -> float:
    if grid.dim == 1:
        return float(max(abs(vals[0]), abs(vals[-1])))
    v = np.abs(vals.reshape(grid.n, grid.n))
    return float(max(v[0].max(), v[-1].max(), v[:, 0].max(), v[:, -1].max()))


def _quadrature_once(q, p, kind: str, grid: QuadratureGrid) -> tuple[DivergenceReport, float]:
    """Report plus a crude tail estimate (edge integrand times grid extent) for chi2 and fisher."""
    pts = grid.points()
    lq = q.log_density(pts)
    lp = p.log_density(pts)
    method = f"simpson{grid.dim}d(n={grid.n})"

    qmass = np.exp(lq)
    starved = np.isneginf(lp) & (qmass > 1e-12)
    if kind in ("chi2", "kl", "fisher") and np.any(starved):
        return DivergenceReport(kind, math.inf, 0.0, method, "p underflows where q has mass"), 0.0

    with np.errstate(over="ignore", invalid="ignore"):
        if kind == "chi2":
            vals = np.exp(2.0 * lq - lp)
            offset = -1.0
        elif kind == "kl":
            vals = np.where(qmass > 0, qmass * (lq - lp), 0.0)
            offset = 0.0
        elif kind == "tv":
            vals = np.exp(np.minimum(lq, lp))
            offset = None
        else:
            diff = q.score(pts) - p.score(pts)
            vals = np.exp(2.0 * lq - lp) * np.sum(diff * diff, axis=1)
            offset = 0.0
    if not np.all(np.isfinite(vals)):
        return DivergenceReport(kind, math.inf, 0.0, method, "integrand overflow"), 0.0
    tail = 0.0
    if kind in ("chi2", "fisher"):
        extent = max(hi - lo for lo, hi in grid.bounds) ** grid.dim
        tail = _edge_max(vals, grid) * extent
    integral, err = grid.integrate_with_error(vals)
    value = 1.0 - integral if offset is None else integral + offset
    if kind == "tv":
        value = min(max(value, 0.0), 1.0)
    elif -1e-9 <= value < 0.0:
        value = 0.0
    return DivergenceReport(kind, value, err, method), tail


# --- samples vs analytic -------------------------------------------------

MIN_SAMPLES = 1000


def exact_sampler(target: GaussianMixture, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    return target.sample(n, np.random.default_rng(seed))


def _bin_edges(samples: np.ndarray, p, axis: int) -> np.ndarray:
    n = samples.shape[0]
    if isinstance(p, GaussianMixture):
        sd = math.sqrt(p.covariance()[axis, axis])
        lo_p, hi_p = default_bounds(p, 6.0)[axis]
    else:
        sd = float(np.std(samples[:, axis]))
        lo_p, hi_p = default_bounds(p, 6.0)[axis]
    width = 3.49 * sd * n ** (-1.0 / 3.0)
    lo = min(float(samples[:, axis].min()), lo_p)
    hi = max(float(samples[:, axis].max()), hi_p)
    nbins = max(int(math.ceil((hi - lo) / width)), 1)
    return np.linspace(lo, hi + 1e-12, nbins + 1)


def _bin_masses(p, edges: list[np.ndarray]) -> np.ndarray:
    if isinstance(p, GaussianMixture):
        grids = np.meshgrid(*[e[:-1] for e in edges], indexing="ij")
        lo = np.column_stack([g.ravel() for g in grids])
        grids = np.meshgrid(*[e[1:] for e in edges], indexing="ij")
        hi = np.column_stack([g.ravel() for g in grids])
        return p.cdf_box(lo, hi).reshape([len(e) - 1 for e in edges])
    if p.dim != 1:
        raise ValueError("bin masses for non-mixture targets are only available in 1-D")
    e = edges[0]
    fine = np.linspace(e[0], e[-1], 64 * (len(e) - 1) + 1)
    cum = integrate.cumulative_trapezoid(p.density(fine[:, None]), fine, initial=0.0)
    return np.diff(np.interp(e, fine, cum))


def histogram_tv(samples: np.ndarray, p) -> float:
    """Histogram TV between samples and ``p`` with Scott-rule bins (n^{-1/3} widths).

    Upward-biased: with exact samples it returns a positive noise floor.
    """
    samples = np.asarray(samples, dtype=float)
    d = samples.shape[1]
    if d > 2:
        raise ValueError("histogram TV is only defined for d <= 2")
    edges = [_bin_edges(samples, p, i) for i in range(d)]
    counts, _ = np.histogramdd(samples, bins=edges)
    emp = counts / samples.shape[0]
    masses = _bin_masses(p, edges)
    outside = max(1.0 - float(masses.sum()), 0.0)
    return 0.5 * (float(np.abs(emp - masses).sum()) + outside)


@dataclass
class EmpiricalReport:
    n: int
    mean_error: float
    cov_error: float
    sample_mean: np.ndarray
    sample_cov: np.ndarray
    hist_tv: Optional[float] = None
    hist_tv_floor: Optional[float] = None
    mode_masses: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def mode_masses(samples: np.ndarray, p: GaussianMixture) -> np.ndarray:
    """Fraction of samples whose nearest component mean is each component."""
    d2 = np.sum((samples[:, None, :] - p.means[None, :, :]) ** 2, axis=-1)
    idx = np.argmin(d2, axis=1)
    return np.bincount(idx, minlength=p.n_components) / samples.shape[0]


def empirical_vs_analytic(samples, p, suite: Sequence[str] = ("moments", "hist_tv", "modes"),
                          calibration_seed: Optional[int] = 0) -> EmpiricalReport:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {n}")
    m = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    if isinstance(p, GaussianMixture):
        mean_err = float(np.linalg.norm(m - p.mean()))
        cov_err = float(np.linalg.norm(cov - p.covariance(), ord=2))
    else:
        mean_err = cov_err = math.nan
    report = EmpiricalReport(n, mean_err, cov_err, m, cov)
    if "hist_tv" in suite and d <= 2:
        report.hist_tv = histogram_tv(samples, p)
        if isinstance(p, GaussianMixture) and calibration_seed is not None:
            report.hist_tv_floor = histogram_tv(exact_sampler(p, n, calibration_seed), p)
    if "modes" in suite and isinstance(p, GaussianMixture):
        report.mode_masses = mode_masses(samples, p)
    return report
