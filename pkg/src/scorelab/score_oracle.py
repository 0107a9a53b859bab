"""Score-estimate oracles with controlled sup-norm or L2 error."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .divergences import QuadratureGrid, covering_grid, exact_sampler
from .sde_models import DiffusionModel
from .targets import BumpTarget, GaussianMixture, _as_points, bump_d1

MAX_SINUSOIDS = 8


class UnsupportedOracle(TypeError):
    """The requested operation needs an affine oracle."""


# --- perturbation fields -------------------------------------------------

class ConstantField:
    def __init__(self, vector):
        self.vector = np.asarray(vector, dtype=float)

    def __call__(self, x):
        return np.broadcast_to(self.vector, x.shape).copy()

    sup_norm = property(lambda self: float(np.linalg.norm(self.vector)))
    lipschitz = 0.0
    affine = True


class SinusoidalField:
    """sum_j c_j u_j sin(w_j . x + phi_j), scaled so the sup norm is at most ``eps1``.

    The leading term carries 3/4 of the amplitude, so the sup norm is also at
    least ``eps1 / 2``.
    """

    affine = False

    def __init__(self, eps1: float, dim: int, seed: int, n_terms: int = MAX_SINUSOIDS):
        if not 1 <= n_terms <= MAX_SINUSOIDS:
            raise ValueError(f"n_terms must be in [1, {MAX_SINUSOIDS}]")
        rng = np.random.default_rng(seed)
        if n_terms == 1:
            coef = np.array([1.0])
        else:
            coef = np.concatenate([[0.75], np.full(n_terms - 1, 0.25 / (n_terms - 1))])
        dirs = rng.standard_normal((n_terms, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        freqs = rng.uniform(-1.0, 1.0, (n_terms, dim))
        self.amplitudes = eps1 * coef
        self.directions = dirs
        self.frequencies = freqs
        self.phases = rng.uniform(0.0, 2 * math.pi, n_terms)
        self.sup_norm_bound = float(self.amplitudes.sum())
        self.lipschitz = float(np.sum(self.amplitudes * np.linalg.norm(freqs, axis=1)))

    def __call__(self, x):
        arg = x @ self.frequencies.T + self.phases[None, :]
        return (np.sin(arg) * self.amplitudes[None, :]) @ self.directions


class LocalizedField:
    """Bump-shaped error of height ``height`` centred at ``center`` with radius ``radius``."""

    affine = False

    def __init__(self, center, radius: float, height: float, direction):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.height = float(height)
        self.direction = np.asarray(direction, dtype=float)
        self.direction = self.direction / np.linalg.norm(self.direction)

    def __call__(self, x):
        r = np.linalg.norm(x - self.center[None, :], axis=1) / self.radius
        inside = r < 1.0
        amp = np.zeros(x.shape[0])
        amp[inside] = self.height * np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
        return amp[:, None] * self.direction[None, :]


class BumpMismatchField:
    """Difference between the bump-target score and the N(0, I) score."""

    affine = False

    def __init__(self, L_param: float):
        self.target = BumpTarget(L_param)

    def __call__(self, x):
        L = self.target.L_param
        return 2.0 * L * bump_d1(2.0 * (x - L) / L)


# --- oracles -------------------------------------------------------------

class ScoreOracle:
    """Score estimate ``s(x, t) = grad log p_t(x) + perturbation(x)``.

    ``t`` is forward time on ``model``; with ``model=None`` the reference is
    static and ``t`` is ignored.  Oracles are deterministic: every random
    ingredient is fixed at construction.
    """

    def __init__(self, reference: GaussianMixture, model: Optional[DiffusionModel] = None,
                 mode: str = "exact", perturbation=None, declared_eps: float = 0.0,
                 description: Optional[dict] = None):
        self.reference = reference
        self.model = model
        self.mode = mode
        self.perturbation = perturbation
        self.declared_eps = float(declared_eps)
        self.description = description or {"mode": mode}
        self._cache: dict = {}

    @property
    def dim(self) -> int:
        return self.reference.dim

    def marginal(self, t: float = 0.0) -> GaussianMixture:
        if self.model is None or t == 0.0:
            return self.reference
        key = float(t)
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            hit = self._cache[key] = self.reference.noised(self.model, key)
        return hit

    def exact(self, x, t: float = 0.0) -> np.ndarray:
        return self.marginal(t).score(_as_points(x, self.dim))

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        x = _as_points(x, self.dim)
        s = self.exact(x, t)
        if self.perturbation is not None:
            s = s + self.perturbation(x)
        return s

    def error(self, x, t: float = 0.0) -> np.ndarray:
        """Pointwise ``||s(x, t) - grad log p_t(x)||``."""
        x = _as_points(x, self.dim)
        return np.linalg.norm(self(x, t) - self.exact(x, t), axis=1)

    def affine_coefficients(self, t: float = 0.0) -> tuple[float, np.ndarray]:
        """(a, b) with s(x, t) = a x + b, for a single Gaussian reference."""
        m = self.marginal(t)
        if m.n_components != 1:
            raise UnsupportedOracle("affine form needs a single-Gaussian reference")
        a = -1.0 / float(m.variances[0])
        b = m.means[0] / float(m.variances[0])
        if self.perturbation is not None:
            if not getattr(self.perturbation, "affine", False):
                raise UnsupportedOracle(f"{self.mode} oracle is not affine")
            b = b + self.perturbation.vector
        return a, b


def make_exact_oracle(target: GaussianMixture, model: Optional[DiffusionModel] = None) -> ScoreOracle:
    return ScoreOracle(target, model, "exact")


def make_linf_oracle(target: GaussianMixture, model: Optional[DiffusionModel], eps1: float,
                     shape: str = "constant", seed: int = 0, direction=None,
                     n_terms: int = MAX_SINUSOIDS) -> ScoreOracle:
    """Exact score plus a perturbation of sup norm ``eps1`` (constant) or at most ``eps1`` (smooth)."""
    if eps1 < 0:
        raise ValueError("eps1 must be non-negative")
    desc = {"mode": "linf_perturbed", "eps1": eps1, "shape": shape, "seed": seed}
    if eps1 == 0:
        return ScoreOracle(target, model, "linf_perturbed", None, 0.0, desc)
    if shape in ("constant", "constant_rotation"):
        if direction is None:
            direction = np.zeros(target.dim)
            direction[0] = 1.0
        u = np.asarray(direction, dtype=float)
        field = ConstantField(eps1 * u / np.linalg.norm(u))
    elif shape == "smooth_field":
        field = SinusoidalField(eps1, target.dim, seed, n_terms)
    else:
        raise ValueError(f"unknown perturbation shape {shape!r}")
    return ScoreOracle(target, model, "linf_perturbed", field, eps1, desc)


def make_shift_oracle(target: GaussianMixture, shift, model: Optional[DiffusionModel] = None) -> ScoreOracle:
    """Exact score plus the constant vector ``shift``."""
    shift = np.atleast_1d(np.asarray(shift, dtype=float))
    eps1 = float(np.linalg.norm(shift))
    return ScoreOracle(target, model, "linf_perturbed", ConstantField(shift), eps1,
                       {"mode": "linf_perturbed", "eps1": eps1, "shape": "constant",
                        "direction": shift.tolist()})


def make_bump_oracle(L_param: float) -> ScoreOracle:
    """Score of the bump target q_L, viewed as an estimate of the N(0, 1) score."""
    return ScoreOracle(GaussianMixture.standard(1), None, "bump_mismatch",
                       BumpMismatchField(L_param), math.nan,
                       {"mode": "bump_mismatch", "L": L_param})


def make_l2_badset_oracle(target: GaussianMixture, eps: float, center, radius: float,
                          model: Optional[DiffusionModel] = None, direction=None) -> ScoreOracle:
    """Exact score plus a localized error whose L2(p) norm equals ``eps``.

    The height is solved from a quadrature of the unit-height error, so the
    reference must have ``d <= 2``.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if direction is None:
        direction = np.zeros(target.dim)
        direction[0] = 1.0
    unit = LocalizedField(center, radius, 1.0, direction)
    grid = covering_grid(target)
    pts = grid.points()
    unit_sq = grid.integrate(target.density(pts) * np.sum(unit(pts) ** 2, axis=1))
    if unit_sq <= 0:
        raise ValueError("the bad region carries no probability mass under the target")
    height = eps / math.sqrt(unit_sq)
    field = LocalizedField(center, radius, height, direction)
    return ScoreOracle(target, model, "l2_badset", field, eps,
                       {"mode": "l2_badset", "eps": eps, "center": center.tolist(), "radius": radius})


# --- bad sets ------------------------------------------------------------

@dataclass
class BadSet:
    """{x : ||s(x, t) - grad log p_t(x)|| > threshold}."""

    oracle: ScoreOracle
    threshold: float

    def contains(self, x, t: float = 0.0) -> np.ndarray:
        if math.isinf(self.threshold):
            return np.zeros(_as_points(x, self.oracle.dim).shape[0], dtype=bool)
        return self.oracle.error(x, t) > self.threshold

    def probability(self, t: float = 0.0, grid: Optional[QuadratureGrid] = None) -> float:
        """p_t(B) by quadrature (d <= 2)."""
        p = self.oracle.marginal(t)
        if grid is None:
            grid = _error_grid(self.oracle)
        pts = grid.points()
        return grid.integrate(p.density(pts) * self.contains(pts, t))


class SplicedOracle(ScoreOracle):
    """``b(x) = s(x)`` off the bad set and the exact score on it.

    Membership is decided at the point where the oracle is evaluated, which in
    the samplers is always the previous discretization point.
    """

    def __init__(self, base: ScoreOracle, badset: BadSet):
        super().__init__(base.reference, base.model, "spliced", None, badset.threshold,
                         {"mode": "spliced", "base": base.description, "eps1": badset.threshold})
        self.base = base
        self.badset = badset

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        x = _as_points(x, self.dim)
        s = self.base(x, t)
        e = self.base.exact(x, t)
        bad = np.linalg.norm(s - e, axis=1) > self.badset.threshold
        return np.where(bad[:, None], e, s)

    def affine_coefficients(self, t: float = 0.0):
        raise UnsupportedOracle("spliced oracles are not affine")


def splice_badset(oracle: ScoreOracle, eps1: float) -> tuple[SplicedOracle, BadSet]:
    badset = BadSet(oracle, float(eps1))
    return SplicedOracle(oracle, badset), badset


# --- measurement ---------------------------------------------------------

def _error_grid(oracle: ScoreOracle, n: Optional[int] = None) -> QuadratureGrid:
    p = oracle.reference
    if p.dim > 2:
        raise ValueError("quadrature needs d <= 2; use method='monte_carlo'")
    grid = covering_grid(p, n=n)
    if isinstance(oracle.perturbation, BumpMismatchField):
        # include the bump support so sup-norm measurements see the error region
        L = oracle.perturbation.target.L_param
        grid = QuadratureGrid(((min(grid.bounds[0][0], -12.0), max(grid.bounds[0][1], 1.5 * L + 1.0)),),
                              grid.n)
    return grid


def measure_error(oracle: ScoreOracle, t: float = 0.0, norm: str = "L2",
                  method: str = "quadrature", n: Optional[int] = None, seed: int = 0,
                  grid: Optional[QuadratureGrid] = None) -> float:
    """Realized error: root-mean-square under p_t (``L2``) or grid/sample sup (``Linf``)."""
    if norm not in ("L2", "Linf"):
        raise ValueError(f"unknown norm {norm!r}")
    p = oracle.marginal(t)
    if method == "quadrature":
        grid = grid or _error_grid(oracle)
        pts = grid.points()
        err = oracle.error(pts, t)
        if norm == "Linf":
            return float(err.max())
        return math.sqrt(max(grid.integrate(p.density(pts) * err ** 2), 0.0))
    if method == "monte_carlo":
        if not n:
            raise ValueError("monte_carlo needs n >= 1")
        pts = exact_sampler(p, n, seed)
        err = oracle.error(pts, t)
        if norm == "Linf":
            return float(err.max())
        return math.sqrt(float(np.mean(err ** 2)))
    raise ValueError(f"unknown method {method!r}")


def measure_lipschitz(oracle: ScoreOracle, t: float = 0.0, box: Optional[list] = None,
                      n: int = 1024, step: float = 1e-5, seed: int = 0) -> float:
    """Largest spectral norm of a central-difference Jacobian over a Sobol point set."""
    d = oracle.dim
    if box is None:
        box = [(lo, hi) for lo, hi in _box_for(oracle.marginal(t))]
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    sob = qmc.Sobol(d, scramble=True, seed=seed)
    pts = qmc.scale(sob.random(n), lo, hi)
    jac = np.empty((n, d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[:, :, j] = (oracle(pts + e, t) - oracle(pts - e, t)) / (2 * step)
    return float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))


def _box_for(p: GaussianMixture, width: float = 6.0):
    sd = np.sqrt(p.variances)[:, None]
    lo = np.min(p.means - width * sd, axis=0)
    hi = np.max(p.means + width * sd, axis=0)
    return list(zip(lo.tolist(), hi.tolist()))
