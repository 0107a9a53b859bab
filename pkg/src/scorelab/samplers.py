"""LMC, annealed LMC, reverse-SDE predictor, predictor-corrector and coupled runs.

Randomness is counter-based: the noise for step ``k`` of stream ``(tag, level)``
is drawn from a Philox generator keyed by ``(seed, tag, level, k)`` for all
chains at once, with chain ``i`` taking row ``i``.  Chains are updated in
fixed-size row blocks, so neither the draws nor the arithmetic depend on the
number of worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .score_oracle import ScoreOracle, SplicedOracle, UnsupportedOracle
from .sde_models import DiffusionModel, forward_time, prior, reverse_accumulated
from .targets import GaussianMixture

BLOCK_ROWS = 32768

# stream tags
INIT, LMC, PREDICTOR, CORRECTOR = 0, 1, 2, 3


class SamplerDiverged(RuntimeError):
    def __init__(self, message: str, level: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.level = level
        self.step = step


def noise_block(seed: int, tag: int, level: int, step: int, shape) -> np.ndarray:
    """Standard normal draws for one step of one stream."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, tag, level, step])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


class _Engine:
    """Applies a row-wise update in fixed blocks, optionally on a thread pool."""

    def __init__(self, seed: int, threads: int = 1):
        self.seed = int(seed)
        self.threads = max(int(threads), 1)
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def noise(self, tag: int, level: int, step: int, shape) -> np.ndarray:
        return noise_block(self.seed, tag, level, step, shape)

    def apply(self, fn: Callable, *arrays: np.ndarray) -> np.ndarray:
        n = arrays[0].shape[0]
        out = np.empty_like(arrays[0])
        slices = [slice(i, min(i + BLOCK_ROWS, n)) for i in range(0, n, BLOCK_ROWS)]

        def work(sl):
            out[sl] = fn(*(a[sl] for a in arrays))

        if self._pool is None or len(slices) == 1:
            for sl in slices:
                work(sl)
        else:
            list(self._pool.map(work, slices))
        return out


# --- configuration and results -----------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    step_size: float
    num_steps: int
    chains: int
    seed: int
    oracle: ScoreOracle
    model: Optional[DiffusionModel] = None
    threads: int = 1
    snapshot_steps: tuple = ()

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.num_steps < 0 or int(self.num_steps) != self.num_steps:
            raise ValueError("num_steps must be a non-negative integer")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.model is not None and self.step_size * self.num_steps > self.model.horizon * (1 + 1e-9):
            raise ValueError("step_size * num_steps exceeds the model horizon")


@dataclass(frozen=True)
class AnnealSchedule:
    """Noise levels sigma_1 < ... < sigma_M with per-level (h_m, N_m)."""

    sigmas: tuple
    step_sizes: tuple
    num_steps: tuple
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        if s.size == 0 or not s[0] > 0:
            raise ValueError("sigma_1 must be positive")
        if np.any(np.diff(s) <= 0):
            raise ValueError("noise levels must be strictly increasing")
        if not (len(self.step_sizes) == len(self.num_steps) == s.size):
            raise ValueError("per-level step sizes and counts must match the number of levels")
        if any(h <= 0 for h in self.step_sizes) or any(n < 0 for n in self.num_steps):
            raise ValueError("step sizes must be positive and step counts non-negative")

    @property
    def M(self) -> int:
        return len(self.sigmas)

    @property
    def variances(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=float) ** 2

    @property
    def ratios(self) -> np.ndarray:
        """Successive variance ratios sigma_{m+1}^2 / sigma_m^2."""
        v = self.variances
        return v[1:] / v[:-1]

    def with_overrides(self, step_size: Optional[float] = None,
                       num_steps: Optional[int] = None) -> "AnnealSchedule":
        h = tuple([step_size] * self.M) if step_size is not None else self.step_sizes
        n = tuple([int(num_steps)] * self.M) if num_steps is not None else self.num_steps
        return AnnealSchedule(self.sigmas, h, n, dict(self.flags))

    def total_steps(self) -> int:
        return int(sum(self.num_steps))

    def to_dict(self) -> dict:
        return {"sigmas": list(self.sigmas), "step_sizes": list(self.step_sizes),
                "num_steps": list(self.num_steps), "flags": dict(self.flags)}


@dataclass(frozen=True)
class CorrectorPlan:
    """Corrector steps N_m and step sizes h_m after each predictor step m = 1..K."""

    num_steps: tuple
    step_sizes: tuple

    def __post_init__(self):
        if len(self.num_steps) != len(self.step_sizes):
            raise ValueError("corrector plan lengths differ")

    @classmethod
    def none(cls, k: int) -> "CorrectorPlan":
        return cls((0,) * k, (1.0,) * k)

    @classmethod
    def every(cls, k: int, n: int, h: float) -> "CorrectorPlan":
        return cls((n,) * k, (h,) * k)

    @classmethod
    def final_only(cls, k: int, n: int, h: float) -> "CorrectorPlan":
        """All corrector steps after the last predictor step."""
        if k == 0:
            return cls((), ())
        return cls((0,) * (k - 1) + (n,), (h,) * k)


@dataclass
class SamplerRun:
    config: object
    states: np.ndarray
    snapshots: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    diverged: Optional[np.ndarray] = None
    diverged_step: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.states.shape[0]
        if self.diverged is None:
            self.diverged = np.zeros(n, dtype=bool)
        if self.diverged_step is None:
            self.diverged_step = np.full(n, -1, dtype=np.int64)

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    @property
    def finite_states(self) -> np.ndarray:
        return self.states[~self.diverged]


Initial = Union[GaussianMixture, np.ndarray, float, Sequence[float]]


def initial_states(initial: Initial, chains: int, dim: int, seed: int) -> np.ndarray:
    """Draw or broadcast initial states, shape (chains, dim)."""
    if isinstance(initial, GaussianMixture):
        if initial.dim != dim:
            raise ValueError("initial distribution has the wrong dimension")
        ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, INIT])
        return initial.sample(chains, np.random.Generator(np.random.Philox(ss)))
    x = np.asarray(initial, dtype=float)
    if x.ndim == 2:
        if x.shape != (chains, dim):
            raise ValueError(f"initial states must have shape {(chains, dim)}")
        return x.copy()
    return np.broadcast_to(np.atleast_1d(x).reshape(-1), (chains, dim)).copy()


# --- single steps ------------------------------------------------------

def lmc_step(x, oracle: Callable, h: float, noise, t: float = 0.0) -> np.ndarray:
    """x + h s(x) + sqrt(2h) noise."""
    if h < 0:
        raise ValueError("h must be non-negative")
    x = np.asarray(x, dtype=float)
    s = oracle(x, t) if isinstance(oracle, ScoreOracle) else oracle(x)
    s = np.asarray(s, dtype=float).reshape(x.shape)
    if not np.all(np.isfinite(s)):
        raise SamplerDiverged("score oracle returned a non-finite value")
    return x + h * s + math.sqrt(2.0 * h) * np.asarray(noise, dtype=float)


def predictor_step(z, oracle: Callable, model: DiffusionModel, kh: float, h: float,
                   noise) -> np.ndarray:
    """One reverse-SDE step from reverse time ``kh`` to ``kh + h`` with the score frozen at ``z``."""
    if h < 0:
        raise ValueError("h must be non-negative")
    z = np.asarray(z, dtype=float)
    if kh + h > model.horizon * (1 + 1e-12):
        raise ValueError("kh + h exceeds the horizon")
    G = reverse_accumulated(model, kh, min(kh + h, model.horizon))
    s_time = forward_time(model, kh)
    s = oracle(z, s_time) if isinstance(oracle, ScoreOracle) else oracle(z)
    s = np.asarray(s, dtype=float).reshape(z.shape)
    if not np.all(np.isfinite(s)):
        raise SamplerDiverged("score oracle returned a non-finite value")
    drift = s if model.family == "SMLD" else 0.5 * z + s
    return z + G * drift + math.sqrt(G) * np.asarray(noise, dtype=float)


# --- chain loops -------------------------------------------------------

class _Tracker:
    """Freezes chains that leave the finite range and records the step."""

    def __init__(self, n: int):
        self.alive = np.ones(n, dtype=bool)
        self.step = np.full(n, -1, dtype=np.int64)

    def commit(self, old: np.ndarray, new: np.ndarray, step: int) -> np.ndarray:
        ok = np.all(np.isfinite(new), axis=1)
        fresh = self.alive & ~ok
        if fresh.any():
            self.step[fresh] = step
            self.alive &= ok
        frozen = ~self.alive
        if frozen.any():
            new[frozen] = old[frozen]
        return new


def _lmc_update(oracle, t, h):
    sq = math.sqrt(2.0 * h)

    def fn(xb, nb):
        with np.errstate(all="ignore"):
            return xb + h * oracle(xb, t) + sq * nb
    return fn


def _run_lmc_steps(engine: _Engine, x: np.ndarray, oracle, t: float, h: float, n: int,
                   tag: int, level: int, tracker: _Tracker, step0: int = 0,
                   snapshots: Optional[dict] = None, snap_steps=(), state_norms=None) -> np.ndarray:
    fn = _lmc_update(oracle, t, h)
    snap_steps = set(int(k) for k in snap_steps)
    if snapshots is not None and 0 in snap_steps:
        snapshots[0] = x.copy()
    for k in range(n):
        xi = engine.noise(tag, level, k, x.shape)
        new = engine.apply(fn, x, xi)
        x = tracker.commit(x, new, step0 + k + 1)
        if state_norms is not None:
            with np.errstate(over="ignore"):
                state_norms.append(float(np.mean(np.linalg.norm(x[tracker.alive], axis=1)))
                                   if tracker.alive.any() else math.nan)
        if snapshots is not None and (k + 1) in snap_steps:
            snapshots[k + 1] = x.copy()
    return x


def lmc_run(config: SamplerConfig, initial: Initial, t: float = 0.0) -> SamplerRun:
    """N LMC steps per chain targeting the oracle's law at (forward) time ``t``.

    ``diagnostics['mean_norm']`` is the mean state norm after each step.
    """
    oracle = config.oracle
    x = initial_states(initial, config.chains, oracle.dim, config.seed)
    tracker = _Tracker(config.chains)
    snapshots: dict = {}
    norms: list = []
    with _Engine(config.seed, config.threads) as engine:
        x = _run_lmc_steps(engine, x, oracle, t, config.step_size, config.num_steps, LMC, 0,
                           tracker, snapshots=snapshots, snap_steps=config.snapshot_steps,
                           state_norms=norms)
    return SamplerRun(config, x, snapshots, {"mean_norm": np.asarray(norms)},
                      ~tracker.alive, tracker.step)


def level_oracles(target: GaussianMixture, sigmas: Sequence[float]) -> list[ScoreOracle]:
    """Exact score oracles for p * N(0, sigma_m^2 I), m = 1..M."""
    return [ScoreOracle(target.convolved(float(s) ** 2), None, "exact") for s in sigmas]


def annealed_lmc(schedule: AnnealSchedule, target: Optional[GaussianMixture],
                 oracles: Optional[Sequence[ScoreOracle]] = None, chains: int = 1000,
                 seed: int = 0, threads: int = 1, keep_levels: bool = False) -> SamplerRun:
    """Run LMC at levels M..1, each level warm-started from the previous output.

    Raises :class:`SamplerDiverged` naming the first level that produced a
    non-finite state.
    """
    if oracles is None:
        if target is None:
            raise ValueError("need a target or per-level oracles")
        oracles = level_oracles(target, schedule.sigmas)
    if len(oracles) != schedule.M:
        raise ValueError("one oracle per noise level is required")
    dim = oracles[0].dim
    sigma_top = float(schedule.sigmas[-1])
    x = initial_states(GaussianMixture.gaussian(np.zeros(dim), sigma_top ** 2), chains, dim, seed)
    tracker = _Tracker(chains)
    levels = {}
    step0 = 0
    with _Engine(seed, threads) as engine:
        for m in range(schedule.M, 0, -1):
            h, n = schedule.step_sizes[m - 1], int(schedule.num_steps[m - 1])
            # noise level key m - 1 makes a one-level run reproduce lmc_run exactly
            x = _run_lmc_steps(engine, x, oracles[m - 1], 0.0, h, n, LMC, m - 1, tracker, step0)
            step0 += n
            if not tracker.alive.all():
                raise SamplerDiverged(f"annealed LMC diverged at level {m}", level=m,
                                      step=int(tracker.step[tracker.step >= 0].min()))
            if keep_levels:
                levels[m] = x.copy()
    return SamplerRun({"schedule": schedule.to_dict(), "chains": chains, "seed": seed}, x, levels,
                      {}, ~tracker.alive, tracker.step)


def predictor_corrector(config: SamplerConfig, plan: Optional[CorrectorPlan] = None,
                        initial: Optional[Initial] = None, record_moments: bool = True) -> SamplerRun:
    """Predictor steps from the prior with optional LMC correctors after each one.

    ``config.num_steps`` predictor steps of size ``config.step_size``; the
    corrector after step m uses the score at forward time T - m h.
    ``diagnostics['mean']`` / ``['var']`` hold the chain mean and the
    coordinate-averaged variance after each predictor-corrector round.
    """
    model = config.model
    if model is None:
        raise ValueError("predictor runs need a diffusion model")
    K, h = config.num_steps, config.step_size
    plan = plan or CorrectorPlan.none(K)
    if len(plan.num_steps) != K:
        raise ValueError(f"corrector plan has {len(plan.num_steps)} levels, expected {K}")
    oracle = config.oracle
    d = oracle.dim
    if initial is None:
        pr = prior(model)
        initial = np.zeros(d) if pr.degenerate else GaussianMixture.gaussian(np.zeros(d), pr.var)
    x = initial_states(initial, config.chains, d, config.seed)
    tracker = _Tracker(config.chains)
    means, variances = [], []

    def record(z):
        if record_moments:
            zz = z[tracker.alive]
            means.append(zz.mean(axis=0))
            variances.append(float(np.mean(zz.var(axis=0))))

    record(x)
    T = model.horizon
    step0 = 0
    with _Engine(config.seed, config.threads) as engine:
        for k in range(K):
            kh = k * h
            G = reverse_accumulated(model, kh, min(kh + h, T))
            s_time = forward_time(model, kh)
            sq = math.sqrt(G)
            ddpm = model.family == "DDPM"

            def fn(zb, nb):
                with np.errstate(all="ignore"):
                    s = oracle(zb, s_time)
                    drift = 0.5 * zb + s if ddpm else s
                    return zb + G * drift + sq * nb

            xi = engine.noise(PREDICTOR, 0, k, x.shape)
            x = tracker.commit(x, engine.apply(fn, x, xi), step0 + 1)
            step0 += 1
            n_c = int(plan.num_steps[k])
            if n_c:
                t_c = forward_time(model, min((k + 1) * h, T))
                x = _run_lmc_steps(engine, x, oracle, t_c, plan.step_sizes[k], n_c,
                                   CORRECTOR, k + 1, tracker, step0)
                step0 += n_c
            record(x)
    diag = {}
    if record_moments:
        diag = {"mean": np.asarray(means), "var": np.asarray(variances)}
    return SamplerRun(config, x, {}, diag, ~tracker.alive, tracker.step)


# --- coupling ------------------------------------------------------------

@dataclass
class CouplingReport:
    disagreement: np.ndarray       # P(Z_k != Zbar_k), k = 0..n
    first_hit: np.ndarray          # per chain, -1 if never in the bad set
    hits_per_step: np.ndarray      # chains of the b-run inside B at step k
    chains: int
    budget: Optional[np.ndarray] = None     # cumulative coupling TV bound per step
    upper_confidence: Optional[float] = None
    bound_holds: Optional[bool] = None


def clopper_pearson_upper(k: int, n: int, level: float = 0.95) -> float:
    """One-sided upper confidence bound for a binomial proportion."""
    from scipy.stats import beta

    if k >= n:
        return 1.0
    return float(beta.ppf(level, k + 1, n - k))


def coupled_run(config: SamplerConfig, s_oracle: ScoreOracle, b_oracle: SplicedOracle,
                eps1: float, initial: Initial, D: Optional[Sequence[float]] = None,
                delta: Optional[Sequence[float]] = None, t: float = 0.0) -> CouplingReport:
    """Run LMC with ``s`` and with the spliced ``b`` on shared noise.

    When ``D`` and ``delta`` (length ``num_steps``) are given, the report
    carries the coupling budget and whether the one-sided 95% upper
    confidence bound on the final disagreement stays below it.
    """
    if not isinstance(b_oracle, SplicedOracle) or b_oracle.base is not s_oracle:
        raise ValueError("b must be the spliced version of s")
    if abs(b_oracle.badset.threshold - eps1) > 0:
        raise ValueError("eps1 does not match the bad-set threshold")
    n = config.num_steps
    x = initial_states(initial, config.chains, s_oracle.dim, config.seed)
    z = x.copy()
    first_hit = np.full(config.chains, -1, dtype=np.int64)
    disagreement = np.zeros(n + 1)
    hits = np.zeros(n + 1, dtype=np.int64)
    h = config.step_size
    fs, fb = _lmc_update(s_oracle, t, h), _lmc_update(b_oracle, t, h)
    ts, tb = _Tracker(config.chains), _Tracker(config.chains)
    with _Engine(config.seed, config.threads) as engine:
        for k in range(n + 1):
            inside = b_oracle.badset.contains(z, t)
            hits[k] = int(inside.sum())
            first_hit[(first_hit < 0) & inside] = k
            disagreement[k] = float(np.mean(np.any(x != z, axis=1)))
            if k == n:
                break
            xi = engine.noise(LMC, 0, k, x.shape)
            x = ts.commit(x, engine.apply(fs, x, xi), k + 1)
            z = tb.commit(z, engine.apply(fb, z, xi), k + 1)
    report = CouplingReport(disagreement, first_hit, hits, config.chains)
    if D is not None and delta is not None:
        from .bounds import framework_tv_budget

        budget = framework_tv_budget(D, delta)
        report.budget = budget.cumulative
        k_bad = int(round(disagreement[-1] * config.chains))
        report.upper_confidence = clopper_pearson_upper(k_bad, config.chains)
        report.bound_holds = bool(report.upper_confidence <= budget.coupling)
    return report


def affine_scan(x0: float, A: np.ndarray, B: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Unroll x_{k+1} = (x_k + A_k) exp(B_k) for k = 0..n-1, returning x_0..x_n.

    Works chunk by chunk with cumulative sums so that long recursions stay
    vectorized without overflowing the running exponent.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    out = np.empty(A.size + 1)
    out[0] = x = x0
    for i in range(0, A.size, chunk):
        a, b = A[i:i + chunk], B[i:i + chunk]
        S = np.cumsum(b)
        prev = np.concatenate([[0.0], S[:-1]])
        with np.errstate(over="ignore", invalid="ignore"):
            acc = np.cumsum(a * np.exp(-prev))
            out[i + 1:i + 1 + a.size] = np.exp(S) * (x + acc)
        x = out[i + a.size]
    return out


# --- exact Gaussian chains -------------------------------------------------

@dataclass
class ExactChain:
    times: np.ndarray     # reverse-clock times (predictor) or k h (LMC)
    means: np.ndarray     # (N+1, d)
    variances: np.ndarray # (N+1,)
    chi2: np.ndarray      # chi2(q_k || p_k)
    reference_means: np.ndarray
    reference_variances: np.ndarray


def _affine_path(oracle: ScoreOracle, target: GaussianMixture, model: DiffusionModel,
                 s: np.ndarray):
    """Vectorized (a, b, ref_mean, ref_var) of an exact or constant-shift oracle at forward times s."""
    beta = np.asarray(model.schedule.integral(np.zeros_like(s), s), dtype=float)
    if model.family == "SMLD":
        scale, nv = np.ones_like(beta), beta
    else:
        scale, nv = np.exp(-0.5 * beta), -np.expm1(-beta)
    var = scale ** 2 * float(target.variances[0]) + nv
    mean = scale[:, None] * target.means[0][None, :]
    a = -1.0 / var
    b = mean / var[:, None]
    pert = oracle.perturbation
    if pert is not None:
        if not getattr(pert, "affine", False):
            raise UnsupportedOracle(f"{oracle.mode} oracle is not affine")
        b = b + pert.vector[None, :]
    return a, b, mean, var


def gaussian_exact_chain(model: Optional[DiffusionModel], target: GaussianMixture,
                         oracle: ScoreOracle, h: float, N: int, mode: str = "predictor",
                         initial: Optional[tuple] = None, t: float = 0.0) -> ExactChain:
    """Exact mean / variance propagation of an affine oracle through the updates.

    ``mode='lmc'`` iterates ``lmc_step`` against the oracle's law at time
    ``t``; ``mode='predictor'`` iterates ``predictor_step`` from the prior and
    compares with the forward marginal at T - kh.  ``initial`` is an optional
    (mean, variance) pair.
    """
    from .bounds import chi2_gaussians_many

    if target.n_components != 1:
        raise UnsupportedOracle("exact chains need a single-Gaussian target")
    d = target.dim
    if mode == "lmc":
        ref = oracle.marginal(t)
        a, b = oracle.affine_coefficients(t)
        m0 = np.zeros(d) if initial is None else np.broadcast_to(np.asarray(initial[0], float), (d,))
        v0 = 1.0 if initial is None else float(initial[1])
        c = np.full(N, 1.0 + h * a)
        G = np.full(N, 2.0 * h)
        shift = np.broadcast_to(h * np.asarray(b, dtype=float), (N, d))
        rm = np.broadcast_to(ref.means[0], (N + 1, d))
        rv = np.full(N + 1, float(ref.variances[0]))
        times = h * np.arange(N + 1)
    elif mode == "predictor":
        if model is None:
            raise ValueError("predictor mode needs a diffusion model")
        if h * N > model.horizon * (1 + 1e-9):
            raise ValueError("h * N exceeds the model horizon")
        if target.dim != oracle.dim:
            raise ValueError("oracle and target dimensions differ")
        T = model.horizon
        if initial is None:
            m0, v0 = np.zeros(d), prior(model).var
        else:
            m0 = np.broadcast_to(np.asarray(initial[0], float), (d,))
            v0 = float(initial[1])
        times = np.minimum(h * np.arange(N + 1), T)
        s_all = np.clip(T - times, 0.0, None)
        G = np.asarray(model.schedule.integral(s_all[1:], s_all[:-1]), dtype=float).reshape(N)
        a, b, rm, rv = _affine_path(oracle, target, model, s_all)
        a, b = a[:N], b[:N]
        c = 1.0 + G * a + (0.5 * G if model.family == "DDPM" else 0.0)
        shift = G[:, None] * b
    else:
        raise ValueError(f"unknown mode {mode!r}")
    # v_{k+1} = c_k^2 v_k + G_k ; m_{k+1} = c_k m_k + shift_k
    with np.errstate(divide="ignore"):
        logc2 = np.log(c * c)
    vs = affine_scan(v0, G / (c * c), logc2)
    ms = np.empty((N + 1, d))
    for j in range(d):
        ms[:, j] = affine_scan(float(m0[j]), shift[:, j] / c, np.log(np.abs(c)))
    if np.any(c <= 0):
        # sign flips break the log form; fall back to the plain loop
        ms[0] = m0
        for k in range(N):
            ms[k + 1] = c[k] * ms[k] + shift[k]
    chi2 = chi2_gaussians_many(rm, rv, ms, vs, d)
    return ExactChain(times, ms, vs, chi2, np.asarray(rm), np.asarray(rv))


# --- one-dimensional density propagation ------------------------------

def lmc_density_chain(oracle: Callable, density0: np.ndarray, grid: np.ndarray, h: float,
                      N: int, t: float = 0.0) -> np.ndarray:
    """Push a 1-D density on a uniform grid through N LMC transition kernels.

    Returns an array of shape (N+1, len(grid)).  The Gaussian kernel is
    integrated with the trapezoid rule, so the grid spacing must resolve
    ``sqrt(2h)``.
    """
    grid = np.asarray(grid, dtype=float)
    dx = grid[1] - grid[0]
    if dx > 0.5 * math.sqrt(2.0 * h):
        raise ValueError("grid too coarse for the LMC kernel")
    s = oracle(grid[:, None], t) if isinstance(oracle, ScoreOracle) else oracle(grid[:, None])
    mean = grid + h * np.asarray(s, dtype=float).ravel()
    var = 2.0 * h
    # K[j, i] = density of landing at grid[j] from grid[i]
    K = np.exp(-(grid[:, None] - mean[None, :]) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)
    w = np.full(grid.size, dx)
    w[0] = w[-1] = 0.5 * dx
    K *= w[None, :]
    out = np.empty((N + 1, grid.size))
    out[0] = density0
    for k in range(N):
        out[k + 1] = K @ out[k]
    return out
