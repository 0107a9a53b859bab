"""Forward diffusion families (SMLD / DDPM) and their closed-form bookkeeping.

Two clocks appear throughout the package.  The *forward* clock ``s`` runs from
data (``s = 0``) to the prior (``s = T``).  Samplers use the *reverse* clock
``t = T - s``.  :func:`forward_time` is the single conversion point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_SERIES_CUTOFF = 1e-4


class DomainError(ValueError):
    """A time argument fell outside the admissible interval."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Diffusion coefficient g(s) of the forward SDE.

    kinds:
      ``constant``    g(s) = c
      ``exponential`` g(s) = a * b**s       (b >= 1 so g is non-decreasing)
      ``affine_sq``   g(s) = sqrt(b + alpha*s)
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        if self.kind == "constant":
            _require_positive(p, "c")
        elif self.kind == "exponential":
            _require_positive(p, "a")
            _require_positive(p, "b")
            if p["b"] < 1.0:
                raise ValueError("exponential schedule needs b >= 1 (g must be non-decreasing)")
        elif self.kind == "affine_sq":
            _require_positive(p, "b")
            if p.get("alpha", None) is None or p["alpha"] < 0:
                raise ValueError("affine_sq schedule needs alpha >= 0")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, c: float = 1.0) -> "DiffusionSchedule":
        return cls("constant", {"c": float(c)})

    @classmethod
    def exponential(cls, a: float, b: float) -> "DiffusionSchedule":
        return cls("exponential", {"a": float(a), "b": float(b)})

    @classmethod
    def affine_sq(cls, b: float, alpha: float) -> "DiffusionSchedule":
        return cls("affine_sq", {"b": float(b), "alpha": float(alpha)})

    def g(self, s):
        return np.sqrt(self.g2(s))

    def g2(self, s):
        s = np.asarray(s, dtype=float)
        p = self.params
        if self.kind == "constant":
            return np.full_like(s, p["c"] ** 2)
        if self.kind == "exponential":
            return p["a"] ** 2 * np.exp(2.0 * math.log(p["b"]) * s)
        return p["b"] + p["alpha"] * s

    def integral(self, s0, s1):
        """Closed form of the integral of g(s)^2 over [s0, s1]; accepts arrays."""
        p = self.params
        s0, s1 = np.asarray(s0, dtype=float), np.asarray(s1, dtype=float)
        if self.kind == "constant":
            out = p["c"] ** 2 * (s1 - s0)
        elif self.kind == "exponential":
            lam = 2.0 * math.log(p["b"])
            if lam == 0.0:
                out = p["a"] ** 2 * (s1 - s0)
            else:
                # a^2/lam * (e^{lam s1} - e^{lam s0}), written to avoid cancellation
                out = p["a"] ** 2 * np.exp(lam * s0) * np.expm1(lam * (s1 - s0)) / lam
        else:
            out = p["b"] * (s1 - s0) + 0.5 * p["alpha"] * (s1 * s1 - s0 * s0)
        return _scalar(out)

    def weighted_integral(self, s0, s1):
        """Closed form of the integral of (s1 - s) g(s)^2 over [s0, s1]; accepts arrays."""
        s0, s1 = np.asarray(s0, dtype=float), np.asarray(s1, dtype=float)
        delta = s1 - s0
        p = self.params
        if self.kind == "constant":
            return _scalar(p["c"] ** 2 * delta * delta / 2.0)
        if self.kind == "affine_sq":
            return _scalar((p["b"] + p["alpha"] * s1) * delta ** 2 / 2.0 - p["alpha"] * delta ** 3 / 3.0)
        lam = 2.0 * math.log(p["b"])
        x = lam * delta
        small = np.abs(x) < _SERIES_CUTOFF
        xs = np.where(small, 1.0, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            exact = (-np.expm1(-xs) - xs * np.exp(-xs)) / (xs * xs)
        ratio = np.where(small, 0.5 - x / 3.0 + x * x / 8.0, exact)
        return _scalar(p["a"] ** 2 * np.exp(lam * s1) * delta * delta * ratio)

    def g2_lipschitz(self, horizon: float) -> float:
        """Lipschitz constant of g^2 on [0, horizon]."""
        p = self.params
        if self.kind == "constant":
            return 0.0
        if self.kind == "affine_sq":
            return p["alpha"]
        lam = 2.0 * math.log(p["b"])
        return lam * p["a"] ** 2 * math.exp(lam * horizon)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def _scalar(a):
    return float(a) if np.ndim(a) == 0 else a


def _require_positive(params, key):
    v = params.get(key)
    if v is None or not v > 0:
        raise ValueError(f"schedule parameter {key!r} must be positive, got {v!r}")


@dataclass(frozen=True)
class DiffusionModel:
    family: str  # "SMLD" or "DDPM"
    schedule: DiffusionSchedule
    horizon: float

    def __post_init__(self):
        if self.family not in ("SMLD", "DDPM"):
            raise ValueError(f"family must be SMLD or DDPM, got {self.family!r}")
        if not self.horizon >= 0:
            raise ValueError("horizon must be non-negative")

    @property
    def T(self) -> float:
        return self.horizon

    def drift(self, x, s):
        """Forward drift f(x, s): zero for SMLD, -g(s)^2 x / 2 for DDPM."""
        x = np.asarray(x, dtype=float)
        if self.family == "SMLD":
            return np.zeros_like(x)
        return -0.5 * self.schedule.g2(s) * x

    def to_dict(self) -> dict:
        return {"family": self.family, "horizon": self.horizon, "schedule": self.schedule.to_dict()}


@dataclass(frozen=True)
class MarginalParams:
    """Forward marginal is ``scale * x0 + N(0, noise_var I)``."""

    scale: float
    noise_var: float


@dataclass(frozen=True)
class GaussianSpec:
    mean: float
    var: float
    degenerate: bool = False


def _check_range(model: DiffusionModel, *times: float) -> None:
    for t in times:
        if not (0.0 <= t <= model.horizon * (1 + 1e-12) + 1e-15):
            raise DomainError(f"time {t!r} outside [0, {model.horizon}]")


def forward_time(model: DiffusionModel, t_rev: float) -> float:
    """Convert a reverse-clock time to the forward clock."""
    _check_range(model, t_rev)
    return max(model.horizon - t_rev, 0.0)


def accumulated_diffusion(model: DiffusionModel, t0: float, t1: float) -> float:
    """Integral of g(s)^2 over [t0, t1] on the forward clock."""
    _check_range(model, t0, t1)
    if t1 < t0:
        raise DomainError(f"need t0 <= t1, got {t0} > {t1}")
    return model.schedule.integral(t0, t1)


def reverse_accumulated(model: DiffusionModel, kh: float, t: float) -> float:
    """Integral of g(T - u)^2 for u in [kh, t] (reverse clock)."""
    if t < kh:
        raise DomainError(f"need kh <= t, got {kh} > {t}")
    return accumulated_diffusion(model, forward_time(model, t), forward_time(model, kh))


def marginal_params(model: DiffusionModel, t: float) -> MarginalParams:
    beta = accumulated_diffusion(model, 0.0, t)
    if model.family == "SMLD":
        return MarginalParams(1.0, beta)
    return MarginalParams(math.exp(-0.5 * beta), -math.expm1(-beta))


def bridge_params(model: DiffusionModel, kh: float, t: float) -> tuple[float, float]:
    """(alpha, sigma2) with p_kh = (p_t)_alpha * N(0, sigma2), reverse clock.

    ``(p)_alpha`` is the push-forward of ``p`` under ``x -> x / alpha``.
    """
    G = reverse_accumulated(model, kh, t)
    if model.family == "SMLD":
        return 1.0, G
    return math.exp(0.5 * G), -math.expm1(-G)


def prior(model: DiffusionModel) -> GaussianSpec:
    mp = marginal_params(model, model.horizon)
    return GaussianSpec(0.0, mp.noise_var, degenerate=mp.noise_var == 0.0)


def forward_noise(model: DiffusionModel, x0: np.ndarray, t: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Draw from the forward marginal at time ``t`` given data points ``x0``."""
    mp = marginal_params(model, t)
    x0 = np.asarray(x0, dtype=float)
    return mp.scale * x0 + math.sqrt(mp.noise_var) * rng.standard_normal(x0.shape)


def smld_to_ddpm(mp: MarginalParams, s: float) -> MarginalParams:
    """Space rescaling y = e^{-s/2} x mapping SMLD with g = e^{s/2} onto DDPM with g = 1."""
    c = math.exp(-0.5 * s)
    return MarginalParams(mp.scale * c, mp.noise_var * c * c)


def make_model(family: str, schedule: Optional[DiffusionSchedule] = None,
               horizon: float = 1.0) -> DiffusionModel:
    return DiffusionModel(family, schedule or DiffusionSchedule.constant(1.0), horizon)
