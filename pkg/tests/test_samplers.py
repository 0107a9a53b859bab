import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorelab.bounds import chi2_gaussians
from scorelab.samplers import (BLOCK_ROWS, AnnealSchedule, CorrectorPlan, SamplerConfig, SamplerDiverged,
                               affine_scan, annealed_lmc, clopper_pearson_upper, coupled_run,
                               gaussian_exact_chain, initial_states, lmc_density_chain, lmc_run, lmc_step,
                               noise_block, predictor_corrector, predictor_step)
from scorelab.score_oracle import (UnsupportedOracle, make_bump_oracle, make_exact_oracle, make_linf_oracle,
                                   make_shift_oracle, splice_badset)
from scorelab.sde_models import make_model, marginal_params
from scorelab.targets import GaussianMixture

STD = GaussianMixture.standard(1)
DATA4 = GaussianMixture.gaussian([0.0], 4.0)


def test_lmc_step_example():
    assert lmc_step(np.array([[1.0]]), lambda x: -x, 0.1, np.zeros((1, 1)))[0, 0] == pytest.approx(0.9)


def test_lmc_step_zero_h_is_identity():
    x = np.array([[0.3, -1.2]])
    assert np.array_equal(lmc_step(x, lambda y: -y, 0.0, np.ones_like(x)), x)


def test_lmc_step_rejects_non_finite_score():
    with pytest.raises(SamplerDiverged):
        lmc_step(np.zeros((2, 1)), lambda x: np.full_like(x, np.nan), 0.1, np.zeros((2, 1)))


def test_predictor_step_ddpm_example():
    m = make_model("DDPM", horizon=1.0)
    z = predictor_step(np.array([[1.0]]), lambda x: -np.ones_like(x), m, 0.0, 0.1, np.zeros((1, 1)))
    assert z[0, 0] == pytest.approx(0.95, abs=1e-15)


def test_predictor_step_smld_is_lmc_like():
    m = make_model("SMLD", horizon=1.0)
    z0 = np.array([[0.5], [-2.0]])
    xi = np.array([[0.3], [-0.1]])
    z = predictor_step(z0, lambda x: -x, m, 0.2, 0.1, xi)
    np.testing.assert_allclose(z, z0 + 0.1 * (-z0) + math.sqrt(0.1) * xi, rtol=1e-14)


def test_predictor_step_zero_h_and_horizon():
    m = make_model("DDPM", horizon=1.0)
    z0 = np.array([[0.7]])
    assert np.array_equal(predictor_step(z0, lambda x: -x, m, 0.4, 0.0, np.ones_like(z0)), z0)
    with pytest.raises(ValueError):
        predictor_step(z0, lambda x: -x, m, 0.95, 0.1, np.zeros_like(z0))


def test_config_validation():
    o = make_exact_oracle(STD)
    with pytest.raises(ValueError):
        SamplerConfig(0.0, 10, 5, 0, o)
    with pytest.raises(ValueError):
        SamplerConfig(0.1, 10, 0, 0, o)
    with pytest.raises(ValueError):
        SamplerConfig(0.2, 10, 5, 0, o, make_model("DDPM", horizon=1.0))


def test_noise_is_keyed_by_counter():
    a = noise_block(5, 1, 0, 3, (4, 2))
    assert np.array_equal(a, noise_block(5, 1, 0, 3, (4, 2)))
    assert not np.array_equal(a, noise_block(5, 1, 0, 4, (4, 2)))
    assert not np.array_equal(a, noise_block(5, 2, 0, 3, (4, 2)))


def test_zero_steps_returns_initial():
    cfg = SamplerConfig(0.1, 0, 1000, 3, make_exact_oracle(STD))
    run = lmc_run(cfg, DATA4)
    assert np.array_equal(run.states, initial_states(DATA4, 1000, 1, 3))


@pytest.mark.parametrize("threads", [2, 4, 8])
def test_lmc_bit_identical_across_threads(threads):
    oracle = make_bump_oracle(4.0)
    chains = 2 * BLOCK_ROWS + 123
    base = lmc_run(SamplerConfig(0.01, 30, chains, 11, oracle), np.array([-5.0]))
    other = lmc_run(SamplerConfig(0.01, 30, chains, 11, oracle, threads=threads), np.array([-5.0]))
    assert np.array_equal(base.states, other.states)


def test_shift_oracle_moves_stationary_mean():
    cfg = SamplerConfig(0.1, 200, 100_000, 2, make_shift_oracle(STD, 0.3))
    x = lmc_run(cfg, STD).states[:, 0]
    # AR(1) fixed point of x <- (1 - h) x + 0.3 h + noise
    assert abs(x.mean() - 0.3) <= 4 * x.std() / math.sqrt(x.size)


def test_lmc_matches_exact_chain():
    h, N, n = 0.01, 2000, 100_000
    oracle = make_exact_oracle(STD)
    run = lmc_run(SamplerConfig(h, N, n, 8, oracle), DATA4)
    exact = gaussian_exact_chain(None, STD, oracle, h, N, mode="lmc", initial=(0.0, 4.0))
    x = run.states[:, 0]
    v = exact.variances[-1]
    assert v == pytest.approx(1.0 / (1.0 - h / 2.0), rel=1e-6)
    assert abs(x.mean()) <= 4 * math.sqrt(v / n)
    assert abs(x.var() - v) <= 4 * v * math.sqrt(2.0 / n)


def test_divergent_chains_are_frozen_and_reported():
    # h = 3 makes x <- -2 x + noise, which overflows
    run = lmc_run(SamplerConfig(3.0, 1200, 50, 0, make_exact_oracle(STD)), STD)
    assert run.n_diverged == 50
    assert np.all(run.diverged_step > 0)
    assert np.all(np.isfinite(run.states))


def test_annealed_single_level_equals_lmc_run():
    sched = AnnealSchedule((0.5,), (0.05,), (40,))
    ann = annealed_lmc(sched, STD, chains=2000, seed=4)
    ref = STD.convolved(0.25)
    run = lmc_run(SamplerConfig(0.05, 40, 2000, 4, make_exact_oracle(ref)), GaussianMixture.gaussian([0.0], 0.25))
    assert np.array_equal(ann.states, run.states)


def test_annealed_gaussian_output_variance():
    from scorelab.bounds import noise_schedule

    sched = noise_schedule(1, 0.5, 1.0, 0.0, c=0.5).with_overrides(0.02, 300)
    n = 50_000
    x = annealed_lmc(sched, STD, chains=n, seed=1).states[:, 0]
    # N(0, 1 + sigma_1^2) up to the stationary LMC bias v / (1 - h / (2 v))
    v = 1.0 + 0.25
    biased = v / (1.0 - 0.02 / (2 * v))
    assert abs(x.var() - biased) <= 4 * biased * math.sqrt(2.0 / n)


def test_annealed_divergence_names_level():
    # level 1 targets N(0, 2); h = 5 gives x <- -1.5 x + noise there
    sched = AnnealSchedule((1.0, 1.5), (5.0, 0.1), (3000, 10))
    with pytest.raises(SamplerDiverged) as info:
        annealed_lmc(sched, STD, chains=10, seed=0)
    assert info.value.level == 1


def test_anneal_schedule_validation():
    with pytest.raises(ValueError):
        AnnealSchedule((1.0, 1.0), (0.1, 0.1), (1, 1))
    with pytest.raises(ValueError):
        AnnealSchedule((0.0, 1.0), (0.1, 0.1), (1, 1))


def test_pc_without_correctors_is_pure_predictor():
    model = make_model("DDPM", horizon=1.0)
    cfg = SamplerConfig(0.05, 20, 5000, 3, make_exact_oracle(DATA4, model), model)
    a = predictor_corrector(cfg)
    b = predictor_corrector(cfg, CorrectorPlan.every(20, 0, 0.01))
    assert np.array_equal(a.states, b.states)


def test_pc_matches_exact_chain_within_4se():
    model = make_model("DDPM", horizon=1.0)
    oracle = make_exact_oracle(DATA4, model)
    n, K, h = 100_000, 20, 0.05
    run = predictor_corrector(SamplerConfig(h, K, n, 21, oracle, model))
    exact = gaussian_exact_chain(model, DATA4, oracle, h, K)
    v = exact.variances
    z_mean = np.abs(run.diagnostics["mean"][:, 0] - exact.means[:, 0]) / np.sqrt(v / n)
    z_var = np.abs(run.diagnostics["var"] - v) / (v * math.sqrt(2.0 / n))
    assert z_mean.max() <= 4 and z_var.max() <= 4


def test_pc_bit_identical_across_threads():
    model = make_model("SMLD", horizon=1.0)
    oracle = make_linf_oracle(GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0]), model, 0.1,
                              "smooth_field", seed=2)
    plan = CorrectorPlan.every(10, 3, 0.01)
    chains = BLOCK_ROWS + 77
    a = predictor_corrector(SamplerConfig(0.1, 10, chains, 5, oracle, model), plan)
    b = predictor_corrector(SamplerConfig(0.1, 10, chains, 5, oracle, model, threads=6), plan)
    assert np.array_equal(a.states, b.states)


def test_final_corrector_plan_beats_pure_predictor():
    # exact-chain comparison: predictor to T, then LMC correctors with the t = 0 score
    model = make_model("DDPM", horizon=1.0)
    oracle = make_exact_oracle(DATA4, model)
    h, K = 0.1, 10
    pred = gaussian_exact_chain(model, DATA4, oracle, h, K)
    m, v = pred.means[-1, 0], pred.variances[-1]
    corr = gaussian_exact_chain(None, DATA4, make_exact_oracle(DATA4), 0.05, 400, mode="lmc", initial=(m, v))
    assert abs(corr.variances[-1] - 4.0) <= abs(v - 4.0)
    # Monte Carlo agrees with the composed exact chain
    n = 100_000
    run = predictor_corrector(SamplerConfig(h, K, n, 6, oracle, model), CorrectorPlan.final_only(K, 400, 0.05))
    vc = corr.variances[-1]
    assert abs(run.states[:, 0].var() - vc) <= 4 * vc * math.sqrt(2.0 / n)


def test_predictor_error_first_order_under_halving():
    model = make_model("DDPM", horizon=1.0)
    oracle = make_exact_oracle(DATA4, model)
    vT = DATA4.noised(model, 1.0).variances[0]
    errs = []
    for h in (0.1, 0.05, 0.025, 0.0125):
        chain = gaussian_exact_chain(model, DATA4, oracle, h, int(round(1.0 / h)), initial=(0.0, vT))
        errs.append(abs(chain.variances[-1] - 4.0))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios >= 1.8)


def test_exact_chain_zero_steps():
    model = make_model("DDPM", horizon=1.0)
    chain = gaussian_exact_chain(model, DATA4, make_exact_oracle(DATA4, model), 0.1, 0)
    mp = marginal_params(model, 1.0)
    assert chain.chi2[0] == pytest.approx(chi2_gaussians(0.0, 4 * mp.scale ** 2 + mp.noise_var, 0.0,
                                                         mp.noise_var, 1))


def test_exact_chain_chi2_decreases_for_small_h():
    model = make_model("DDPM", horizon=1.0)
    chain = gaussian_exact_chain(model, DATA4, make_exact_oracle(DATA4, model), 1e-4, 10_000)
    assert np.all(np.diff(chain.chi2) < 0)


def test_exact_chain_lmc_variance_fixed_point():
    h = 0.1
    chain = gaussian_exact_chain(None, STD, make_exact_oracle(STD), h, 500, mode="lmc", initial=(2.0, 3.0))
    v = 3.0
    for _ in range(500):
        v = (1 - h) ** 2 * v + 2 * h
    assert chain.variances[-1] == pytest.approx(v, rel=1e-12)
    assert v == pytest.approx(1 / (1 - h / 2), rel=1e-12)


def test_exact_chain_rejects_non_affine():
    with pytest.raises(UnsupportedOracle):
        gaussian_exact_chain(None, STD, make_bump_oracle(4.0), 0.1, 5, mode="lmc")
    with pytest.raises(UnsupportedOracle):
        gaussian_exact_chain(None, STD, make_linf_oracle(STD, None, 0.1, "smooth_field"), 0.1, 5, mode="lmc")


@settings(max_examples=50, deadline=None)
@given(x0=st.floats(0.0, 10.0), n=st.integers(0, 40),
       seed=st.integers(0, 1000), chunk=st.integers(1, 16))
def test_affine_scan_matches_loop(x0, n, seed, chunk):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.0, 1.0, n)
    B = rng.uniform(-0.5, 0.3, n)
    ref = [x0]
    for a, b in zip(A, B):
        ref.append((ref[-1] + a) * math.exp(b))
    np.testing.assert_allclose(affine_scan(x0, A, B, chunk=chunk), ref, rtol=1e-11, atol=1e-300)


def test_clopper_pearson():
    n = 1000
    assert clopper_pearson_upper(0, n) == pytest.approx(1 - 0.05 ** (1 / n), rel=1e-10)
    assert clopper_pearson_upper(n, n) == 1.0
    assert clopper_pearson_upper(10, n) > 0.01


def test_coupled_run_with_exact_oracle_never_disagrees():
    o = make_exact_oracle(STD)
    b, _ = splice_badset(o, 0.1)
    rep = coupled_run(SamplerConfig(0.05, 50, 5000, 1, o), o, b, 0.1, STD)
    assert np.all(rep.disagreement == 0.0) and np.all(rep.hits_per_step == 0)


def test_coupled_run_huge_eps1_never_disagrees():
    o = make_bump_oracle(4.0)
    b, _ = splice_badset(o, 1e6)
    rep = coupled_run(SamplerConfig(0.01, 200, 5000, 1, o), o, b, 1e6, np.array([3.0]))
    assert np.all(rep.disagreement == 0.0)


def test_coupled_run_rejects_mismatched_oracles():
    o = make_bump_oracle(4.0)
    b, _ = splice_badset(make_bump_oracle(4.0), 0.5)
    with pytest.raises(ValueError):
        coupled_run(SamplerConfig(0.01, 5, 10, 1, o), o, b, 0.5, STD)


def test_coupled_run_disagreement_below_budget():
    o = make_bump_oracle(6.0)
    b, bad = splice_badset(o, 0.5)
    n = 60
    start = GaussianMixture.gaussian([1.0], 1.5)
    rep = coupled_run(SamplerConfig(0.01, n, 20_000, 3, o), o, b, 0.5, start,
                      D=np.full(n, 2.0), delta=np.full(n, bad.probability()))
    assert rep.disagreement[0] == 0.0
    assert np.all(np.diff(rep.disagreement) >= 0)
    assert rep.bound_holds


def test_density_chain_matches_exact_gaussian_chain():
    h, N = 0.05, 40
    grid = np.linspace(-12, 12, 4097)
    oracle = make_exact_oracle(STD)
    q0 = DATA4.density(grid[:, None])
    dens = lmc_density_chain(oracle, q0, grid, h, N)
    chain = gaussian_exact_chain(None, STD, oracle, h, N, mode="lmc", initial=(0.0, 4.0))
    v = chain.variances[-1]
    ref = np.exp(-grid ** 2 / (2 * v)) / math.sqrt(2 * math.pi * v)
    assert np.max(np.abs(dens[-1] - ref)) < 1e-8
    with pytest.raises(ValueError):
        lmc_density_chain(oracle, q0, np.linspace(-12, 12, 33), h, N)
