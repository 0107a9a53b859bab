"""Analytic targets: isotropic Gaussian mixtures and the bump counterexample."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.special import logsumexp, ndtr

from .sde_models import DiffusionModel, accumulated_diffusion, marginal_params

LOG_2PI = math.log(2.0 * math.pi)


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


def _normalize_rows(lp: np.ndarray) -> np.ndarray:
    """softmax over the component axis."""
    r = np.exp(lp - lp.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    return r


@dataclass(frozen=True)
class SmoothnessInfo:
    """Regularity constants of a density.

    ``provenance`` records where ``lsi_constant`` came from: ``exact`` (single
    Gaussian), ``user`` (supplied for a mixture, diagnostic only) or
    ``propagated`` (pushed forward through the noising map).  ``lipschitz_provenance``
    does the same for ``lipschitz``.
    """

    lipschitz: float
    lsi_constant: float
    mean_norm: float
    second_moment: float
    dim: int
    provenance: str = "exact"
    lipschitz_provenance: str = "exact"


class GaussianMixture:
    """Mixture of isotropic Gaussians ``sum_k w_k N(mu_k, v_k I)``."""

    def __init__(self, weights, means, variances):
        w = np.asarray(weights, dtype=float).ravel()
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        v = np.asarray(variances, dtype=float).ravel()
        if mu.shape[0] != w.size or v.size != w.size:
            raise ValueError("weights, means and variances must have matching lengths")
        if np.any(w <= 0) or np.any(v <= 0):
            raise ValueError("weights and variances must be positive")
        self.weights = w / w.sum()
        self.means = mu
        self.variances = v
        for arr in (self.weights, self.means, self.variances):
            arr.setflags(write=False)

    @classmethod
    def gaussian(cls, mean, var: float) -> "GaussianMixture":
        return cls([1.0], [np.atleast_1d(mean)], [var])

    @classmethod
    def standard(cls, dim: int = 1) -> "GaussianMixture":
        return cls.gaussian(np.zeros(dim), 1.0)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def __repr__(self):
        return (f"GaussianMixture(weights={self.weights.tolist()}, means={self.means.tolist()}, "
                f"variances={self.variances.tolist()})")

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights) and np.array_equal(self.means, other.means)
                and np.array_equal(self.variances, other.variances))

    def allclose(self, other: "GaussianMixture", rtol=1e-12, atol=1e-12) -> bool:
        return (self.means.shape == other.means.shape
                and np.allclose(self.weights, other.weights, rtol=rtol, atol=atol)
                and np.allclose(self.means, other.means, rtol=rtol, atol=atol)
                and np.allclose(self.variances, other.variances, rtol=rtol, atol=atol))

    def _component_logpdf(self, x):
        x = _as_points(x, self.dim)
        diff = x[:, None, :] - self.means[None, :, :]
        sq = (diff * diff).sum(axis=2)
        return self._log_norm[None, :] - sq * self._half_inv_var[None, :], diff

    @cached_property
    def _log_norm(self) -> np.ndarray:
        return np.log(self.weights) - 0.5 * self.dim * (LOG_2PI + np.log(self.variances))

    @cached_property
    def _half_inv_var(self) -> np.ndarray:
        return 0.5 / self.variances

    def _lp_rows(self, x: np.ndarray) -> np.ndarray:
        """Component log-terms laid out (K, n); one contiguous row per component."""
        lp = np.empty((self.n_components, x.shape[0]))
        for k in range(self.n_components):
            dk = x - self.means[k]
            sq = dk[:, 0] * dk[:, 0] if self.dim == 1 else np.einsum("nd,nd->n", dk, dk)
            lp[k] = self._log_norm[k] - sq * self._half_inv_var[k]
        return lp

    def log_density(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        lp = self._lp_rows(x)
        if lp.shape[0] == 1:
            return lp[0]
        m = lp.max(axis=0)
        return m + np.log(np.exp(lp - m).sum(axis=0))

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def responsibilities(self, x) -> np.ndarray:
        lp, _ = self._component_logpdf(x)
        return _normalize_rows(lp)

    def score(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        if self.n_components == 1:
            return (self.means[0][None, :] - x) / self.variances[0]
        lp = self._lp_rows(x)
        r = np.exp(lp - lp.max(axis=0))
        tot = r.sum(axis=0)
        out = np.zeros_like(x)
        for k in range(self.n_components):
            out -= (r[k] / (tot * self.variances[k]))[:, None] * (x - self.means[k])
        return out

    def score_jacobian(self, x) -> np.ndarray:
        """Hessian of the log-density, shape (n, d, d)."""
        lp, diff = self._component_logpdf(x)
        r = _normalize_rows(lp)
        a = -diff / self.variances[None, :, None]
        mean_a = np.einsum("nk,nkd->nd", r, a)
        second = np.einsum("nk,nkd,nke->nde", r, a, a)
        d = self.dim
        diag = -np.einsum("nk,k->n", r, 1.0 / self.variances)
        jac = second - np.einsum("nd,ne->nde", mean_a, mean_a)
        jac[:, np.arange(d), np.arange(d)] += diag[:, None]
        return jac

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        d = self.dim
        cov = np.zeros((d, d))
        for w, mu, v in zip(self.weights, self.means, self.variances):
            dm = mu - m
            cov += w * (v * np.eye(d) + np.outer(dm, dm))
        return cov

    def second_moment(self) -> float:
        return float(self.weights @ (np.sum(self.means ** 2, axis=1) + self.dim * self.variances))

    def cdf_box(self, lo, hi) -> np.ndarray:
        """Probability of axis-aligned boxes [lo, hi); lo, hi of shape (n, d)."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        out = np.zeros(lo.shape[0])
        for w, mu, v in zip(self.weights, self.means, self.variances):
            sd = math.sqrt(v)
            out += w * np.prod(ndtr((hi - mu) / sd) - ndtr((lo - mu) / sd), axis=1)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z

    def lipschitz_bound(self) -> tuple[float, str]:
        """Upper bound on the operator norm of the score Jacobian.

        The Jacobian equals ``-sum_k r_k I / v_k + Cov_r(a)`` with
        ``a_k = (mu_k - x) / v_k``.  With equal variances the ``a_k`` differ by
        constants, so ``||Cov_r(a)|| <= D^2 / 4`` with ``D`` the largest pairwise
        distance of ``mu_k / v``.  For unequal variances the same expression is
        returned but flagged ``heuristic``; check it with :func:`numeric_lipschitz`.
        """
        inv_vmin = 1.0 / self.variances.min()
        if self.n_components == 1:
            return inv_vmin, "exact"
        scaled = self.means / self.variances[:, None]
        diffs = scaled[:, None, :] - scaled[None, :, :]
        D = math.sqrt(np.max(np.sum(diffs ** 2, axis=-1)))
        provenance = "bound" if np.ptp(self.variances) == 0 else "heuristic"
        return inv_vmin + D * D / 4.0, provenance

    def smoothness(self, c_ls: Optional[float] = None) -> SmoothnessInfo:
        """Regularity constants; mixtures need a user-supplied LSI constant."""
        L, lprov = self.lipschitz_bound()
        if self.n_components == 1:
            c, prov = float(self.variances[0]), "exact"
        else:
            if c_ls is None:
                raise ValueError("the LSI constant of a mixture has no closed form; pass c_ls")
            c, prov = float(c_ls), "user"
        return SmoothnessInfo(L, c, float(np.linalg.norm(self.mean())), self.second_moment(),
                              self.dim, prov, lprov)

    def noised(self, model: DiffusionModel, t: float) -> "GaussianMixture":
        mp = marginal_params(model, t)
        return self.transformed(mp.scale, mp.noise_var)

    def transformed(self, scale: float, add_var: float) -> "GaussianMixture":
        """Law of ``scale * X + N(0, add_var I)``."""
        return GaussianMixture(self.weights, scale * self.means, scale ** 2 * self.variances + add_var)

    def convolved(self, sigma2: float) -> "GaussianMixture":
        return self.transformed(1.0, sigma2)

    def bridged(self, alpha: float, sigma2: float) -> "GaussianMixture":
        """``(p)_alpha * N(0, sigma2)``; inverse direction of the reverse-clock bridge."""
        return self.transformed(1.0 / alpha, sigma2)


def numeric_lipschitz(target, points: np.ndarray) -> float:
    """Max spectral norm of the analytic score Jacobian over ``points``."""
    jac = target.score_jacobian(points)
    return float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))


def smoothness_of_noised(target, model: DiffusionModel, t: float,
                         c_ls: Optional[float] = None) -> SmoothnessInfo:
    """Propagate LSI constant, moments and smoothness to the forward marginal at ``t``.

    ``target`` is either a :class:`GaussianMixture` (L is recomputed on the
    noised mixture) or a :class:`SmoothnessInfo` (L is carried over unchanged,
    which is the standing assumption that every marginal is L-smooth).
    """
    if isinstance(target, GaussianMixture):
        base = target.smoothness(c_ls)
        L, lprov = target.noised(model, t).lipschitz_bound()
    else:
        base = target
        L, lprov = base.lipschitz, "assumed"
    beta = accumulated_diffusion(model, 0.0, t)
    d = base.dim
    if model.family == "SMLD":
        c = base.lsi_constant + beta
        m1 = base.mean_norm
        m2 = base.second_moment + d * beta
    else:
        decay = math.exp(-beta)
        c = (base.lsi_constant - 1.0) * decay + 1.0
        m1 = math.exp(-0.5 * beta) * base.mean_norm
        m2 = decay * base.second_moment + d * (-math.expm1(-beta))
    prov = base.provenance if base.provenance == "user" else "propagated"
    return replace(base, lipschitz=L, lsi_constant=c, mean_norm=m1, second_moment=m2,
                   provenance=prov, lipschitz_provenance=lprov)


# --- bump counterexample -------------------------------------------------

def bump(y):
    """Smooth bump exp(1 - 1/(1 - y^2)) on |y| < 1, zero elsewhere; bump(0) = 1."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - yi * yi))
    return out


def bump_d1(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    u = 1.0 - yi * yi
    out[inside] = np.exp(1.0 - 1.0 / u) * (-2.0 * yi / u ** 2)
    return out


def bump_d2(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    u = 1.0 - yi * yi
    out[inside] = np.exp(1.0 - 1.0 / u) * (4 * yi ** 2 / u ** 4 - 2.0 / u ** 2 - 8 * yi ** 2 / u ** 3)
    return out


def bump_d1_sq_integral() -> float:
    """Integral of bump'(y)^2 over [-1, 1]."""
    val, _ = integrate.quad(lambda y: float(bump_d1(np.array([y]))[0]) ** 2, -1.0, 1.0,
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def bump_d2_sup() -> float:
    ys = np.linspace(-1, 1, 200_001)
    return float(np.max(np.abs(bump_d2(ys))))


class BumpTarget:
    """q_L proportional to exp(-V_L), V_L(x) = x^2/2 - L^2 bump(2(x - L)/L), in one dimension.

    Its score has tiny L2 error against N(0, 1) yet q_L sits almost entirely
    in a mode near ``x = L``.
    """

    dim = 1

    def __init__(self, L_param: float):
        if not L_param > 0:
            raise ValueError("L_param must be positive")
        self.L_param = float(L_param)

    def __repr__(self):
        return f"BumpTarget(L_param={self.L_param})"

    def _u(self, x):
        L = self.L_param
        return 2.0 * (x - L) / L

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        L = self.L_param
        return 0.5 * x * x - L * L * bump(self._u(x))

    def potential_d1(self, x):
        x = np.asarray(x, dtype=float)
        return x - 2.0 * self.L_param * bump_d1(self._u(x))

    def potential_d2(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 - 4.0 * bump_d2(self._u(x))

    @property
    def support(self) -> tuple[float, float]:
        return 0.5 * self.L_param, 1.5 * self.L_param

    @cached_property
    def log_normalizer(self) -> float:
        # shift by the minimum of V so the integrand stays O(1)
        lo, hi = self.support
        xs = np.linspace(lo, hi, 20_001)
        shift = float(np.min(self.potential(xs)))
        shift = min(shift, 0.0)
        f = lambda x: math.exp(-(float(self.potential(np.array([x]))[0]) - shift))
        parts = [(-np.inf, lo), (lo, self.L_param), (self.L_param, hi), (hi, np.inf)]
        total = sum(integrate.quad(f, a, b, epsabs=0, epsrel=1e-13, limit=400)[0] for a, b in parts)
        return math.log(total) - shift

    def log_density(self, x) -> np.ndarray:
        x = _as_points(x, 1)[:, 0]
        return -self.potential(x) - self.log_normalizer

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def score(self, x) -> np.ndarray:
        x = _as_points(x, 1)
        return -self.potential_d1(x)

    def score_jacobian(self, x) -> np.ndarray:
        x = _as_points(x, 1)
        return -self.potential_d2(x)[:, :, None]

    def lipschitz_bound(self) -> float:
        return 1.0 + 4.0 * bump_d2_sup()


def bump_score(target: BumpTarget, x):
    """Score of q_L at scalar or array ``x`` (returns same shape)."""
    return -target.potential_d1(x)


@dataclass(frozen=True)
class BumpErrorReport:
    mean_sq_error: float
    analytic_bound: float
    holds: bool

    @property
    def l2_error(self) -> float:
        return math.sqrt(self.mean_sq_error)


def bump_l2_error_bound(target: BumpTarget) -> BumpErrorReport:
    """Mean-squared score error under N(0, 1) and its analytic ceiling.

    The ceiling ``2 L^3 e^{-L^2/8} int bump'^2 / sqrt(2 pi)`` bounds the
    *squared* error ``E_p (V_L' - x)^2``.
    """
    L = target.L_param
    lo, hi = target.support

    def integrand(x):
        gp = float(bump_d1(np.array([2.0 * (x - L) / L]))[0])
        return (2.0 * L * gp) ** 2 * math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)

    val, _ = integrate.quad(integrand, lo, hi, epsabs=0, epsrel=1e-12, limit=400, points=[L])
    bound = 2.0 * L ** 3 * math.exp(-L * L / 8.0) * bump_d1_sq_integral() / math.sqrt(2 * math.pi)
    return BumpErrorReport(val, bound, val <= bound)
