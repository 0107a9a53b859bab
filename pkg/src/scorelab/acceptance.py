"""Acceptance criteria shared by ``scorelab verify`` and the test suite.

Each criterion returns a :class:`CriterionResult`; the runtime limit is part
of the pass condition.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .bounds import (TheoryParams, chi2_gaussians, lmc_chi2_recursion, noise_schedule,
                     predictor_chi2_recursion, predictor_step_ceiling, warm_start_bound)
from .divergences import QuadratureGrid, histogram_tv, mode_masses, quadrature_divergence
from .samplers import SamplerConfig, annealed_lmc, gaussian_exact_chain, lmc_run
from .score_oracle import ScoreOracle, make_bump_oracle, make_exact_oracle, make_shift_oracle
from .sde_models import forward_noise, make_model
from .targets import BumpTarget, GaussianMixture, SmoothnessInfo, bump_l2_error_bound, smoothness_of_noised


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    limit: float = math.inf

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"criterion {self.number:>2} [{self.name}]: {verdict} ({self.detail}; "
                f"{self.seconds:.2f}s of {self.limit:g}s)")


def _timed(number: int, name: str, limit: float):
    def deco(fn: Callable[[], tuple[bool, str]]):
        def run() -> CriterionResult:
            t0 = time.perf_counter()
            ok, detail = fn()
            dt = time.perf_counter() - t0
            return CriterionResult(number, name, bool(ok) and dt < limit, detail, dt, limit)
        run.number = number
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return deco


# 1 -------------------------------------------------------------------------

def _gaussian_chi2_grid(var1: float, var2: float) -> QuadratureGrid:
    # q^2/p is Gaussian with variance 1/(2/var2 - 1/var1); cover 14 of its sd
    sd = math.sqrt(1.0 / (2.0 / var2 - 1.0 / var1))
    return QuadratureGrid(((-14 * sd, 14 * sd),), 2 ** 16 + 1)


@_timed(1, "closed-form chi2", 1.0)
def criterion_1():
    worst_rel = 0.0
    for eps in (0.1, 0.5, 0.9):
        for d in (1, 2, 5, 50):
            got = chi2_gaussians(0.0, 1.0, 0.0, 1.0 + eps, d)
            ref = (1.0 - eps * eps) ** (-d / 2.0) - 1.0
            worst_rel = max(worst_rel, abs(got - ref) / max(1.0, abs(ref)))
    worst_quad = 0.0
    for eps in (0.1, 0.5, 0.9):
        q, p = GaussianMixture.gaussian([0.0], 1.0 + eps), GaussianMixture.standard(1)
        quad = quadrature_divergence(q, p, "chi2", _gaussian_chi2_grid(1.0, 1.0 + eps)).value
        worst_quad = max(worst_quad, abs(quad - chi2_gaussians(0.0, 1.0, 0.0, 1.0 + eps, 1)))
    ok = worst_rel <= 1e-12 and worst_quad <= 1e-8
    return ok, f"max rel. error vs formula {worst_rel:.1e}, max quadrature gap {worst_quad:.1e}"


# 2 -------------------------------------------------------------------------

@_timed(2, "LMC stationary variance", 30.0)
def criterion_2():
    h = 0.1
    p = GaussianMixture.standard(1)
    cfg = SamplerConfig(h, 150, 10 ** 6, 20220101, make_exact_oracle(p))
    x = lmc_run(cfg, p).states[:, 0]
    target = 1.0 / (1.0 - h / 2.0)
    rel = abs(x.var() - target) / target
    return rel < 0.01, f"variance {x.var():.5f} vs {target:.5f}, rel. gap {rel:.2e}"


# 3 -------------------------------------------------------------------------

@_timed(3, "LSI and moment propagation", 10.0)
def criterion_3():
    ln2 = math.log(2.0)
    ddpm = make_model("DDPM", horizon=1.0)
    smld = make_model("SMLD", horizon=1.0)
    info = SmoothnessInfo(1.0, 5.0, 0.0, 10.0, 2)
    out = smoothness_of_noised(info, ddpm, ln2)
    ok_worked = abs(out.lsi_constant - 3.0) < 1e-12 and abs(out.second_moment - 6.0) < 1e-12
    ok_smld = True
    for t in (0.1, 0.5, 1.0):
        s = smoothness_of_noised(info, smld, t)
        ok_smld &= abs(s.lsi_constant - (5.0 + t)) < 1e-12 and abs(s.second_moment - (10.0 + 2 * t)) < 1e-12
        dd = smoothness_of_noised(info, ddpm, t)
        ok_smld &= abs(dd.lsi_constant - (4.0 * math.exp(-t) + 1.0)) < 1e-12
    # Monte Carlo: forward-noise 1e5 draws of a 2-D mixture under DDPM
    data = GaussianMixture([0.3, 0.7], [[1.0, -2.0], [-1.0, 0.5]], [0.5, 2.0])
    rng = np.random.Generator(np.random.Philox(3))
    x0 = data.sample(10 ** 5, rng)
    worst = 0.0
    for t in (0.25, ln2, 1.0):
        xt = forward_noise(ddpm, x0, t, rng)
        sq = np.sum(xt * xt, axis=1)
        pred = math.exp(-t) * data.second_moment() + 2 * (1 - math.exp(-t))
        z = abs(sq.mean() - pred) / (sq.std(ddof=1) / math.sqrt(sq.size))
        worst = max(worst, z)
    ok = ok_worked and ok_smld and worst <= 4.0
    return ok, f"C 5->{out.lsi_constant:g}, M2 10->{out.second_moment:g}, MC gap {worst:.2f} SE"


# 4 -------------------------------------------------------------------------

@_timed(4, "LMC bound soundness", 5.0)
def criterion_4():
    checked, worst_margin = 0, math.inf
    ok = True
    for d in (1, 2):
        p = GaussianMixture.gaussian(np.zeros(d), 1.0)
        h = 1.0 / (4392.0 * d)
        N = 2000
        for eps1 in (0.0, 0.05):
            shift = np.zeros(d)
            shift[0] = eps1
            oracle = make_shift_oracle(p, shift) if eps1 else make_exact_oracle(p)
            chain = gaussian_exact_chain(None, p, oracle, h, N, mode="lmc", initial=(0.5, 1.4))
            params = TheoryParams(d=d, L=1.0, C_LS=1.0, eps1=eps1, h=h, N=N)
            rep = lmc_chi2_recursion(params, float(chain.chi2[0]))
            if not rep.valid:
                ok = False
                continue
            gap = rep.trajectory - chain.chi2
            ok &= bool(gap[0] >= 0 and np.all(gap[1:] > 0))
            worst_margin = min(worst_margin, float(gap[1:].min()))
            checked += N
    return ok, f"{checked} steps checked, smallest bound - exact = {worst_margin:.3e}"


# 5 -------------------------------------------------------------------------

def predictor_benchmark(d: int, T: float = 1.0, fraction: float = 0.5):
    """DDPM g = 1 with data N(0, 4 I): exact chain and unrolled bound at a fraction of the ceiling."""
    target = GaussianMixture.gaussian(np.zeros(d), 4.0)
    model = make_model("DDPM", horizon=T)
    base = TheoryParams(d=d, L=1.0, L_s=1.0, C_LS=4.0, M2=4.0 * d, family="DDPM", T=T)
    probe = base.updated(h=1e-3)
    ceiling = min(predictor_step_ceiling(probe, kh, h=1e-3) for kh in np.linspace(0.0, T - 1e-3, 5))
    h = fraction * ceiling
    N = int(T / h)
    params = base.updated(h=h, N=N)
    chain = gaussian_exact_chain(model, target, make_exact_oracle(target, model), h, N)
    rep = predictor_chi2_recursion(params, float(chain.chi2[0]))
    return chain, rep, h


@_timed(5, "predictor bound soundness", 5.0)
def criterion_5():
    ok, parts = True, []
    for d in (1, 2):
        chain, rep, h = predictor_benchmark(d)
        good = rep.valid and bool(np.all(rep.trajectory[1:] > chain.chi2[1:]))
        ok &= good
        parts.append(f"d={d}: h={h:.3e}, {len(chain.chi2) - 1} steps, final bound {rep.trajectory[-1]:.4f} "
                     f"vs exact {chain.chi2[-1]:.4f}")
    return ok, "; ".join(parts)


# 6 -------------------------------------------------------------------------

def counterexample_table(Ls=(4.0, 6.0, 8.0, 10.0)):
    p = GaussianMixture.standard(1)
    rows = []
    for L in Ls:
        rep = bump_l2_error_bound(BumpTarget(L))
        tv = quadrature_divergence(p, BumpTarget(L), "tv").value
        rows.append((L, rep, tv))
    return rows


@_timed(6, "bump counterexample", 10.0)
def criterion_6():
    rows = counterexample_table()
    errs = np.array([r.l2_error for _, r, _ in rows])
    tvs = np.array([tv for _, _, tv in rows])
    last = rows[-1][1]
    ok = (last.mean_sq_error <= last.analytic_bound and tvs[-1] >= 0.9
          and np.all(np.diff(errs) < 0) and np.all(np.diff(tvs) > 0))
    return ok, (f"L=10: mean sq. error {last.mean_sq_error:.3e} <= bound {last.analytic_bound:.3e}, "
                f"TV = 1 - {1 - tvs[-1]:.2e}; errors {np.array2string(errs, precision=3)}")


# 7 -------------------------------------------------------------------------

def coupling_config_text(chains: int = 10 ** 5, seed: int = 7) -> str:
    return f"""
kind = "coupled"
seed = {seed}
[target]
kind = "gaussian_mixture"
[oracle]
mode = "bump_mismatch"
L = 10.0
[sampler]
step_size = 0.01
num_steps = 100
chains = {chains}
[sampler.initial]
kind = "gaussian"
mean = [0.0]
var = 1.5
[coupling]
eps1 = 0.5
"""


@_timed(7, "coupling budget", 120.0)
def criterion_7():
    from .config import loads
    from .experiments import run_coupled

    res = run_coupled(loads(coupling_config_text()), threads=1)
    vals = {}
    for step, _, stat, value, *_ in res.table.rows:
        vals[(stat, step)] = value
    upper = vals[("disagreement_upper95", 100)]
    budget = vals[("coupling_budget", 100)]
    return upper <= budget, f"disagreement 95% upper bound {upper:.3e} <= budget {budget:.3e}"


# 8 -------------------------------------------------------------------------

U_TIMES = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0)


def u_shape_curve(L: float = 4.0, h: float = 0.01, chains: int = 10 ** 4, seed: int = 11, start: float = -5.0):
    steps = [int(round(t / h)) for t in U_TIMES]
    cfg = SamplerConfig(h, steps[-1], chains, seed, make_bump_oracle(L), snapshot_steps=tuple(steps))
    run = lmc_run(cfg, np.array([start]))
    p = GaussianMixture.standard(1)
    return np.array([histogram_tv(run.snapshots[k], p) for k in steps])


@_timed(8, "U-shaped error in T", 300.0)
def criterion_8():
    tv = u_shape_curve()
    i = int(np.argmin(tv))
    ok = tv[i] < tv[0] and tv[i] < tv[-1]
    return ok, f"hist TV {np.array2string(tv, precision=3)}; minimum at T={U_TIMES[i]:g}"


# 9 -------------------------------------------------------------------------

MIXTURE_C_LS = 2.0  # user-supplied LSI constant for the two-component mixture (diagnostic only)


@_timed(9, "warm-start bound", 10.0)
def criterion_9():
    cases = [(GaussianMixture.standard(1), 1.0),
             (GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [1.0, 1.0]), MIXTURE_C_LS)]
    ok, parts = True, []
    for p, c_ls in cases:
        m1 = float(np.linalg.norm(p.mean()))
        for s2 in (1.0, 10.0, 100.0):
            q = GaussianMixture.gaussian([0.0], s2)
            chi = quadrature_divergence(q, p.convolved(s2), "chi2").value
            bound = warm_start_bound(m1, c_ls, 1, s2, "proof")
            ok &= chi <= bound
            parts.append(f"{chi:.2e}<={bound:.3g}")
    return ok, "chi2 vs bound: " + ", ".join(parts)


# 10 ------------------------------------------------------------------------

MODE_TARGET = GaussianMixture([0.5, 0.5], [[-4.0], [4.0]], [1.0, 1.0])
MODE_C_LS = 16.0  # user-supplied, only sets the top of the noise ladder


def mode_coverage(chains: int = 10 ** 5, seed: int = 5, steps_per_level: int = 150, h: float = 0.05,
                  threads: int = 1):
    sched = noise_schedule(1, 0.1, MODE_C_LS, 0.0, c=0.5).with_overrides(h, steps_per_level)
    ann = annealed_lmc(sched, MODE_TARGET, chains=chains, seed=seed, threads=threads)
    ref = MODE_TARGET.convolved(sched.sigmas[0] ** 2)
    cold = SamplerConfig(h, sched.total_steps(), chains, seed, ScoreOracle(ref), threads=threads)
    single = lmc_run(cold, np.array([4.0]))
    return mode_masses(ann.states, MODE_TARGET), mode_masses(single.states, MODE_TARGET), sched


@_timed(10, "annealing mode coverage", 180.0)
def criterion_10():
    n = 10 ** 5
    ann, single, sched = mode_coverage(n)
    se = math.sqrt(0.25 / n)
    ok = bool(np.all(np.abs(ann - 0.5) <= 3 * se)) and single[0] < 0.4
    return ok, (f"annealed masses {np.array2string(ann, precision=4)} (3 SE = {3 * se:.4f}), "
                f"single-level far-mode mass {single[0]:.4f}, M={sched.M}")


# 11 ------------------------------------------------------------------------

DETERMINISM_CONFIGS = {
    "lmc": """
kind = "lmc"
seed = 3
[target]
kind = "gaussian_mixture"
[oracle]
mode = "bump_mismatch"
L = 4.0
[sampler]
step_size = 0.01
num_steps = 200
chains = 100000
snapshot_times = [0.5, 1.0]
[sampler.initial]
kind = "point"
value = [-5.0]
""",
    "coupled": coupling_config_text(chains=70000, seed=9),
    "pc": """
kind = "pc"
seed = 4
[target]
weights = [0.5, 0.5]
means = [[-2.0], [2.0]]
variances = [1.0, 1.0]
[model]
family = "DDPM"
horizon = 1.0
[sampler]
step_size = 0.05
num_steps = 20
chains = 80000
[sampler.initial]
kind = "prior"
[sampler.corrector]
plan = "every"
num_steps = 2
step_size = 0.01
""",
}


@_timed(11, "determinism across threads", 300.0)
def criterion_11():
    from .cli import main

    same = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, text in DETERMINISM_CONFIGS.items():
            cfg_path = Path(tmp) / f"{name}.toml"
            cfg_path.write_text(text, encoding="utf-8")
            outs = []
            for threads in (1, 8):
                out = Path(tmp) / f"{name}-{threads}"
                code = main(["run", str(cfg_path), "--threads", str(threads), "--output", str(out), "--quiet"])
                outs.append((code, (out / "results.csv").read_bytes()))
            same.append(outs[0][1] == outs[1][1] and outs[0][0] == outs[1][0])
    return all(same), ", ".join(f"{n}: {'identical' if s else 'DIFFERENT'}"
                                for n, s in zip(DETERMINISM_CONFIGS, same))


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]

SUITES = {
    "closed_forms": [criterion_1, criterion_3, criterion_6, criterion_9],
    "soundness": [criterion_4, criterion_5, criterion_7],
    "simulation": [criterion_2, criterion_8, criterion_10, criterion_11],
}


def run_suite(name: str, echo: Callable[[str], None] = print) -> list[CriterionResult]:
    if name not in SUITES and name != "all":
        raise KeyError(name)
    fns = CRITERIA if name == "all" else SUITES[name]
    results = []
    for fn in fns:
        res = fn()
        echo(res.line())
        results.append(res)
    return results
