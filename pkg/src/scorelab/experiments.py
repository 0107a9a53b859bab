"""Experiment runners behind ``scorelab run``.

Each runner turns a validated config into long-format rows
``(step, time, statistic, value, unit, method, source)`` plus a short text
summary and an exit status.
"""
from __future__ import annotations

import csv
import io
import math
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .bounds import (TheoryParams, budget_planner, chi2_gaussians, framework_tv_budget,
                     lmc_chi2_recursion, noise_schedule, predictor_chi2_recursion,
                     predictor_constants, predictor_step_ceiling, score_perturbation_bound,
                     successive_chi2, warm_start_bound)
from .config import ConfigError, ExperimentConfig, dumps
from .divergences import MIN_SAMPLES, QuadratureGrid, empirical_vs_analytic, quadrature_divergence
from .samplers import (CorrectorPlan, SamplerConfig, SamplerDiverged, annealed_lmc,
                       coupled_run, gaussian_exact_chain, lmc_density_chain, lmc_run,
                       predictor_corrector)
from .score_oracle import UnsupportedOracle, make_bump_oracle, measure_error, splice_badset
from .sde_models import prior
from .targets import BumpTarget, GaussianMixture, bump_l2_error_bound

EXIT_OK, EXIT_CONFIG, EXIT_BOUND, EXIT_DIVERGED = 0, 1, 2, 3
COLUMNS = ("step", "time", "statistic", "value", "unit", "method", "source")


@dataclass
class Table:
    rows: list = field(default_factory=list)

    def add(self, step, time, statistic, value, unit="", method="", source=""):
        self.rows.append((int(step), float(time), statistic, float(value), unit, method, source))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for step, time, stat, value, unit, method, source in self.rows:
            w.writerow((step, repr(time), stat, repr(value), unit, method, source))
        return buf.getvalue()


@dataclass
class ExperimentResult:
    table: Table
    summary: str
    status: int = EXIT_OK


# --- helpers -----------------------------------------------------------------

def _initial(cfg: ExperimentConfig, dim: int):
    ini = cfg.sampler.initial
    if ini.kind == "point":
        return np.broadcast_to(np.asarray(ini.value, dtype=float), (dim,)).copy()
    if ini.kind == "gaussian":
        return GaussianMixture.gaussian(np.broadcast_to(np.asarray(ini.mean, float), (dim,)), ini.var)
    return None  # prior


def _reference(cfg: ExperimentConfig, target, oracle) -> GaussianMixture:
    mode = cfg.measure.reference
    if mode == "oracle_reference" or (mode == "auto" and (oracle.mode == "bump_mismatch"
                                                          or isinstance(target, BumpTarget))):
        return oracle.reference
    if not isinstance(target, GaussianMixture):
        raise ConfigError("measure.reference: a bump target can only be measured against the oracle reference")
    return target


def _measure(table: Table, samples: np.ndarray, ref: GaussianMixture, step: int, time: float,
             suite, source: str):
    """Adds measurement rows; returns None when too few finite samples remain to measure."""
    samples = samples[np.all(np.isfinite(samples), axis=1)]
    table.add(step, time, "measured_chains", len(samples), "count", "finite states", source)
    if len(samples) < MIN_SAMPLES:
        return None
    rep = empirical_vs_analytic(samples, ref, suite)
    if "moments" in suite:
        for j, m in enumerate(rep.sample_mean):
            table.add(step, time, f"mean[{j}]", m, "state", "sample mean", source)
        table.add(step, time, "var", float(np.mean(np.diag(rep.sample_cov))), "state^2",
                  "sample variance, coordinate average", source)
        table.add(step, time, "mean_error", rep.mean_error, "state", "vs analytic mean", source)
        table.add(step, time, "cov_error", rep.cov_error, "state^2", "spectral norm vs analytic", source)
    if rep.hist_tv is not None:
        table.add(step, time, "hist_tv", rep.hist_tv, "probability", "histogram n^-1/3 bins", source)
        if rep.hist_tv_floor is not None:
            table.add(step, time, "hist_tv_floor", rep.hist_tv_floor, "probability",
                      "same estimator on exact samples", source)
    if rep.mode_masses is not None and ref.n_components > 1:
        for j, w in enumerate(rep.mode_masses):
            table.add(step, time, f"mode_mass[{j}]", w, "probability", "nearest component mean", source)
    return rep


# --- runners -----------------------------------------------------------------

def run_lmc(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    target = cfg.target.build()
    oracle = cfg.oracle.build(target, None)
    ref = _reference(cfg, target, oracle)
    s = cfg.sampler
    snaps = sorted({int(round(t / s.step_size)) for t in s.snapshot_times} | {s.num_steps})
    if snaps[-1] > s.num_steps:
        raise ConfigError("sampler.snapshot_times: snapshot beyond num_steps * step_size")
    init = _initial(cfg, oracle.dim)
    if init is None:
        raise ConfigError("sampler.initial.kind: 'prior' needs a diffusion experiment")
    sc = SamplerConfig(s.step_size, s.num_steps, s.chains, cfg.seed, oracle, None, threads, tuple(snaps))
    run = lmc_run(sc, init)
    table = Table()
    src = "LMC with estimated score"
    lines = [f"lmc: {s.chains} chains, h={s.step_size}, N={s.num_steps}, oracle={oracle.mode}"]
    for k in snaps:
        x = run.snapshots[k]
        ok = ~(run.diverged & (run.diverged_step <= k))
        rep = _measure(table, x[ok], ref, k, k * s.step_size, cfg.measure.suite, src)
        if rep is None:
            lines.append(f"  T={k * s.step_size:g}: fewer than {MIN_SAMPLES} finite chains, not measured")
            continue
        tv = "" if rep.hist_tv is None else f" hist_tv={rep.hist_tv:.4f}"
        lines.append(f"  T={k * s.step_size:g}: var={np.mean(np.diag(rep.sample_cov)):.5f}{tv}")
    table.add(s.num_steps, s.num_steps * s.step_size, "diverged_chains", run.n_diverged, "count",
              "non-finite state", src)
    status = EXIT_DIVERGED if run.n_diverged else EXIT_OK
    if status:
        lines.append(f"  {run.n_diverged} chains diverged")
    return ExperimentResult(table, "\n".join(lines), status)


def run_anneal(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    target = cfg.target.build()
    if not isinstance(target, GaussianMixture):
        raise ConfigError("target.kind: annealing needs a gaussian_mixture target")
    a = cfg.sampler.anneal
    info = target.smoothness(cfg.target.c_ls)
    sched = noise_schedule(target.dim, a.sigma_min, info.lsi_constant, info.mean_norm, a.eps_tv, a.c,
                           info.lipschitz, a.c_h, a.c_T)
    sched = sched.with_overrides(a.step_size, a.num_steps)
    table = Table()
    src = "annealed Langevin dynamics"
    for m, (sig, h, n) in enumerate(zip(sched.sigmas, sched.step_sizes, sched.num_steps), 1):
        table.add(m, sig ** 2, "level_var", sig ** 2, "state^2", "geometric ladder", src)
        table.add(m, sig ** 2, "level_h", h, "time", "per-level step", src)
        table.add(m, sig ** 2, "level_N", n, "count", "per-level steps", src)
    try:
        run = annealed_lmc(sched, target, chains=cfg.sampler.chains, seed=cfg.seed, threads=threads)
    except SamplerDiverged as exc:
        return ExperimentResult(table, f"anneal: diverged at level {exc.level}", EXIT_DIVERGED)
    ref = target.convolved(sched.sigmas[0] ** 2)
    total = sched.total_steps()
    rep = _measure(table, run.states, ref, total, 0.0, cfg.measure.suite, src)
    lines = [f"anneal: M={sched.M} levels, {total} steps, {cfg.sampler.chains} chains",
             f"  ratio={sched.flags['ratio']:.4g}, successive chi2 finite: {sched.flags['successive chi2 finite']}"]
    if rep is not None and rep.mode_masses is not None:
        lines.append(f"  mode masses: {np.array2string(rep.mode_masses, precision=4)}")
    if a.baseline_start is not None:
        h = a.step_size if a.step_size is not None else sched.step_sizes[0]
        start = np.broadcast_to(np.asarray(a.baseline_start, float), (target.dim,)).copy()
        from .score_oracle import ScoreOracle

        sc = SamplerConfig(h, total, cfg.sampler.chains, cfg.seed, ScoreOracle(ref), None, threads)
        base = lmc_run(sc, start)
        brep = _measure(table, base.states, ref, total, total * h, cfg.measure.suite,
                        "single-level LMC baseline")
        if brep is not None and brep.mode_masses is not None:
            lines.append(f"  baseline mode masses: {np.array2string(brep.mode_masses, precision=4)}")
    return ExperimentResult(table, "\n".join(lines))


def run_predictor(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    target = cfg.target.build()
    if not isinstance(target, GaussianMixture):
        raise ConfigError("target.kind: predictor runs need a gaussian_mixture target")
    model = cfg.model.build()
    oracle = cfg.oracle.build(target, model)
    s = cfg.sampler
    K, h = s.num_steps, s.step_size
    c = s.corrector
    if cfg.kind == "predictor" or c.plan == "none":
        plan = CorrectorPlan.none(K)
    elif c.plan == "every":
        plan = CorrectorPlan.every(K, c.num_steps, c.step_size)
    else:
        plan = CorrectorPlan.final_only(K, c.num_steps, c.step_size)
    init = _initial(cfg, target.dim) if s.initial.kind != "prior" else None
    sc = SamplerConfig(h, K, s.chains, cfg.seed, oracle, model, threads)
    run = predictor_corrector(sc, plan, init)
    table = Table()
    src = "predictor step" if cfg.kind == "predictor" else "predictor-corrector"
    for k in range(K + 1):
        for j, m in enumerate(run.diagnostics["mean"][k]):
            table.add(k, k * h, f"mean[{j}]", m, "state", "sample mean", src)
        table.add(k, k * h, "var", run.diagnostics["var"][k], "state^2", "sample variance, coordinate average", src)
    lines = [f"{cfg.kind}: {model.family}, T={model.horizon}, h={h}, K={K}, chains={s.chains}"]
    status = EXIT_OK
    exact = None
    if target.n_components == 1 and init is None:
        try:
            exact = gaussian_exact_chain(model, target, oracle, h, K)
        except UnsupportedOracle:
            exact = None
    if exact is not None and cfg.kind == "predictor":
        for k in range(K + 1):
            table.add(k, k * h, "exact_var", exact.variances[k], "state^2", "affine Gaussian recursion",
                      "exact Gaussian chain")
            table.add(k, k * h, "exact_chi2", exact.chi2[k], "dimensionless", "Gaussian closed form",
                      "exact Gaussian chain")
        var0 = float(target.variances[0])
        params = TheoryParams(d=target.dim, L=1.0 / min(var0, 1.0), L_s=1.0 / min(var0, 1.0),
                              C_LS=var0, M2=target.second_moment(), eps1=oracle.declared_eps,
                              h=h, T=model.horizon, N=K, family=model.family,
                              schedule=model.schedule)
        rec = predictor_chi2_recursion(params, float(exact.chi2[0]))
        for k, v in enumerate(rec.trajectory):
            table.add(k, k * h, "chi2_bound", v, "dimensionless", "unrolled one-step bound",
                      "predictor chi-square recursion")
        lines.append(f"  exact chi2 final={exact.chi2[-1]:.6g}, bound final={rec.trajectory[-1]:.6g}, "
                     f"hypotheses hold: {rec.valid}")
        if rec.valid and np.any(rec.trajectory[1:] < exact.chi2[1:]):
            status = EXIT_BOUND
            lines.append("  BOUND VIOLATED")
    elif target.dim <= 2:
        rep = _measure(table, run.finite_states, target, K, K * h, cfg.measure.suite, src)
        if rep is not None and rep.hist_tv is not None:
            lines.append(f"  hist_tv vs data={rep.hist_tv:.4f}")
    if run.n_diverged:
        status = EXIT_DIVERGED
        lines.append(f"  {run.n_diverged} chains diverged")
    return ExperimentResult(table, "\n".join(lines), status)


def _density_chi2_levels(b_oracle, p: GaussianMixture, init, h: float, n: int,
                         grid: QuadratureGrid) -> np.ndarray:
    """sqrt(chi2(qbar_k || p)) for k = 0..n-1 by propagating the b-chain density on a grid."""
    x = grid.axes()[0]
    if isinstance(init, GaussianMixture):
        q0 = init.density(x[:, None])
    else:
        raise ConfigError("coupling: the grid oracle needs a gaussian initial law")
    dens = lmc_density_chain(b_oracle, q0, x, h, n)
    lp = p.log_density(x[:, None])
    out = np.empty(n)
    for k in range(n):
        with np.errstate(divide="ignore"):
            val = grid.integrate(np.exp(2.0 * np.log(np.maximum(dens[k], 0.0)) - lp)) - 1.0
        out[k] = math.sqrt(max(val, 0.0))
    return out


def run_coupled(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    target = cfg.target.build()
    oracle = cfg.oracle.build(target, None)
    p = oracle.reference
    s = cfg.sampler
    eps1 = cfg.coupling.eps1
    b, badset = splice_badset(oracle, eps1)
    init = _initial(cfg, p.dim)
    if init is None:
        raise ConfigError("sampler.initial.kind: coupled runs need a gaussian or point start")
    n = s.num_steps
    if p.dim != 1:
        raise ConfigError("target: coupled runs measure the bad set by 1-D quadrature and need d = 1")
    hi = cfg.coupling.grid_hi
    if hi is None:
        hi = 12.0
        if oracle.mode == "bump_mismatch":
            hi = max(hi, 1.5 * oracle.perturbation.target.L_param + 2.0)
    grid = QuadratureGrid(((cfg.coupling.grid_lo, hi),), cfg.coupling.grid_points)
    delta_val = badset.probability(0.0, grid=QuadratureGrid(grid.bounds, 2 ** 16 + 1))
    D = _density_chi2_levels(b, p, init, s.step_size, n, grid)
    d_method = "grid density propagation"
    delta = np.full(n, delta_val)
    sc = SamplerConfig(s.step_size, n, s.chains, cfg.seed, oracle, None, threads)
    rep = coupled_run(sc, oracle, b, eps1, init, D, delta)
    table = Table()
    src = "coupling of estimated-score and spliced chains"
    for k in range(n + 1):
        table.add(k, k * s.step_size, "disagreement", rep.disagreement[k], "probability",
                  "fraction of chains with Z != Zbar", src)
        table.add(k, k * s.step_size, "badset_hits", rep.hits_per_step[k], "count", "spliced chain in B", src)
    for k in range(n):
        table.add(k, k * s.step_size, "D", D[k], "dimensionless", d_method, "chi-square level of spliced chain")
        table.add(k, k * s.step_size, "delta", delta[k], "probability", "Simpson quadrature of p(B)",
                  "bad-set mass")
        table.add(k + 1, (k + 1) * s.step_size, "coupling_budget", rep.budget[k], "probability",
                  "sum of (D^2+1)^1/2 delta^1/2", "TV budget")
    table.add(n, n * s.step_size, "disagreement_upper95", rep.upper_confidence, "probability",
              "Clopper-Pearson one-sided", src)
    lines = [f"coupled: {s.chains} chains, {n} steps, eps1={eps1}, p(B)={delta_val:.4g}",
             f"  final disagreement={rep.disagreement[-1]:.4g} (95% upper {rep.upper_confidence:.4g}), "
             f"budget={rep.budget[-1]:.4g}, holds: {rep.bound_holds}"]
    return ExperimentResult(table, "\n".join(lines), EXIT_OK if rep.bound_holds else EXIT_BOUND)


def run_counterexample(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    table = Table()
    p = GaussianMixture.standard(1)
    lines = ["counterexample:  L   l2_error   analytic_bound(squared)   tv"]
    status = EXIT_OK
    src = "bump counterexample"
    errs, tvs = [], []
    for i, L in enumerate(cfg.counterexample.Ls):
        q = BumpTarget(L)
        rep = bump_l2_error_bound(q)
        grid_err = measure_error(make_bump_oracle(L))
        tv = quadrature_divergence(p, q, "tv").value
        table.add(i, L, "mean_sq_error", rep.mean_sq_error, "score^2", "adaptive quadrature", src)
        table.add(i, L, "l2_error", rep.l2_error, "score", "adaptive quadrature", src)
        table.add(i, L, "l2_error_grid", grid_err, "score", "Simpson grid", src)
        table.add(i, L, "analytic_bound", rep.analytic_bound, "score^2", "closed form", src)
        table.add(i, L, "tv", tv, "probability", "1 - integral of min(p, q)", src)
        errs.append(rep.l2_error)
        tvs.append(tv)
        lines.append(f"  {L:5g}  {rep.l2_error:.4e}  {rep.analytic_bound:.4e}  {tv:.12f}")
        if not rep.holds:
            status = EXIT_BOUND
    lines.append(f"  error decreasing: {all(np.diff(errs) < 0)}, tv increasing: {all(np.diff(tvs) > 0)}")
    return ExperimentResult(table, "\n".join(lines), status)


def theory_params(values: dict) -> TheoryParams:
    from .sde_models import DiffusionSchedule

    kw = dict(values)
    sched = kw.pop("schedule", None)
    if isinstance(sched, str) and sched != "constant":
        raise ConfigError("bounds.params.schedule: only 'constant' is accepted here; use g for its value")
    g = kw.pop("g", None)
    if g is not None:
        kw["schedule"] = DiffusionSchedule.constant(float(g))
    valid = set(TheoryParams.__dataclass_fields__) - {"clamped", "schedule"} | {"schedule"}
    for key in kw:
        if key not in valid:
            raise ConfigError(f"bounds.params.{key}: unknown parameter")
    for key in ("d", "N"):
        if key in kw:
            kw[key] = int(kw[key])
    return TheoryParams(**kw)


def evaluate_bounds(theorem: str, params: TheoryParams, chi0: float = 0.0, D=(), delta=(), extra=None):
    """Returns (BoundReport-like text, rows)."""
    from .bounds import BoundReport

    extra = extra or {}
    if theorem == "lmc":
        rep = lmc_chi2_recursion(params, chi0)
    elif theorem == "predictor":
        rep = predictor_chi2_recursion(params, chi0)
    elif theorem == "constants":
        rep = BoundReport("predictor_constants", predictor_constants(params),
                          ceiling=predictor_step_ceiling(params, 0.0))
    elif theorem == "framework":
        tv = framework_tv_budget(D, delta)
        rep = BoundReport("framework_tv_budget", {"coupling_tv": tv.coupling, "total_tv": tv.total},
                          trajectory=tv.cumulative)
    elif theorem == "warm_start":
        sig2 = float(extra.get("sigma2", params.T))
        rep = BoundReport("warm_start_bound", {
            v: warm_start_bound(params.M1, params.C_LS, params.d, sig2, v) for v in ("statement", "proof", "max")})
        if params.M1 not in (0.0, 1.0):
            rep.notes.append("statement and proof exponents differ (2 M1 versus 2 M1^2)")
    elif theorem == "perturbation":
        pb = score_perturbation_bound(params.family, params.L, float(extra.get("sigma", 0.1)),
                                      float(extra.get("alpha", 1.0)), params.d,
                                      float(extra.get("gradV_norm", 0.0)), float(extra.get("x_norm", 0.0)))
        rep = BoundReport("score_perturbation_bound", {"value": pb.value},
                          flags={"L <= 1/(2 alpha^2 sigma^2)": pb.hypothesis_holds})
    elif theorem == "budget":
        reps = budget_planner(params.eps_tv, params.eps_chi, params.K_chi, params,
                              float(extra.get("C_T", 1.0)))
        text = "\n".join(r.to_text() for r in reps.values())
        rows = [(step, f"{name}.{stat}", v) for name, r in reps.items() for step, stat, v in r.rows()]
        return text, rows
    elif theorem == "gaussian_chi2":
        v = chi2_gaussians(float(extra.get("mean1", 0.0)), float(extra.get("var1", 1.0)),
                           float(extra.get("mean2", 0.0)), float(extra.get("var2", 1.0)), params.d)
        rep = BoundReport("chi2_gaussians", {"chi2": v})
    else:
        raise ConfigError(f"bounds.theorem: unknown theorem {theorem!r}")
    return rep.to_text(), rep.rows()


_EXTRA_KEYS = ("sigma2", "sigma", "alpha", "gradV_norm", "x_norm", "C_T", "mean1", "var1", "mean2", "var2")


def split_params(values: dict) -> tuple[dict, dict]:
    theory = {k: v for k, v in values.items() if k not in _EXTRA_KEYS}
    extra = {k: v for k, v in values.items() if k in _EXTRA_KEYS}
    return theory, extra


def run_bounds(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    b = cfg.bounds
    theory, extra = split_params(b.params)
    params = theory_params(theory)
    text, rows = evaluate_bounds(b.theorem, params, b.chi0, b.D, b.delta, extra)
    table = Table()
    for step, stat, value in rows:
        table.add(step, step * params.h if step >= 0 else 0.0, stat, value, "dimensionless",
                  "closed form", f"{b.theorem} bound")
    return ExperimentResult(table, text)


def run_schedule(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    s = cfg.schedule
    sched = noise_schedule(s.d, s.sigma_min, s.C_LS, s.M1, s.eps_tv, s.c, s.L)
    table = Table()
    chi = successive_chi2(sched, s.d)
    for m in range(sched.M):
        table.add(m + 1, 0.0, "sigma2", sched.variances[m], "state^2", "geometric ladder", "noise schedule")
        table.add(m + 1, 0.0, "h", sched.step_sizes[m], "time", "default per-level step", "noise schedule")
        table.add(m + 1, 0.0, "N", sched.num_steps[m], "count", "default per-level steps", "noise schedule")
        if m < sched.M - 1:
            table.add(m + 1, 0.0, "successive_chi2", chi[m], "dimensionless", "Gaussian closed form",
                      "noise schedule")
    return ExperimentResult(table, format_schedule(sched, s.d))


def format_schedule(sched, d: int) -> str:
    chi = successive_chi2(sched, d)
    lines = [f"M = {sched.M}, ratio = {sched.flags['ratio']:.6g}, "
             f"successive chi2 finite: {sched.flags['successive chi2 finite']}",
             "  m  sigma^2        h_m           N_m    chi2(next || this)"]
    for m in range(sched.M):
        c = f"{chi[m]:.6g}" if m < sched.M - 1 else "-"
        lines.append(f"  {m + 1:<2d} {sched.variances[m]:<14.6g} {sched.step_sizes[m]:<13.6g} "
                     f"{sched.num_steps[m]:<6d} {c}")
    return "\n".join(lines)


RUNNERS: dict[str, Callable] = {
    "lmc": run_lmc, "anneal": run_anneal, "predictor": run_predictor, "pc": run_predictor,
    "coupled": run_coupled, "counterexample": run_counterexample, "bounds": run_bounds,
    "schedule": run_schedule,
}


def run_experiment(cfg: ExperimentConfig, threads: int = 1,
                   output_dir: Optional[str] = None) -> ExperimentResult:
    """Run ``cfg`` and write ``results.csv``, ``summary.txt`` and ``manifest.txt``."""
    result = RUNNERS[cfg.kind](cfg, threads)
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.table.to_csv(), encoding="utf-8")
    (out / "summary.txt").write_text(result.summary + "\n", encoding="utf-8")
    manifest = [
        "# scorelab run manifest",
        f"# written {datetime.now(timezone.utc).isoformat(timespec='seconds')}",
        f"# scorelab {__version__}, numpy {np.__version__}, python {platform.python_version()}",
        f"# threads {threads}, exit status {result.status}",
        "# rerun with: scorelab run <this file>",
        dumps(cfg),
    ]
    (out / "manifest.txt").write_text("\n".join(manifest), encoding="utf-8")
    return result
