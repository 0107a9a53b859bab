import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import logsumexp

from scorelab.divergences import QuadratureGrid
from scorelab.sde_models import bridge_params, make_model
from scorelab.targets import (BumpTarget, GaussianMixture, SmoothnessInfo, bump, bump_d1, bump_d1_sq_integral,
                              bump_d2_sup, bump_l2_error_bound, bump_score, numeric_lipschitz,
                              smoothness_of_noised)

TWO_MODES = GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0])
TARGETS = [
    GaussianMixture.standard(1),
    TWO_MODES,
    GaussianMixture([0.2, 0.3, 0.5], [[-1.0, 0.5], [2.0, -1.0], [0.0, 3.0]], [0.5, 1.5, 0.8]),
    GaussianMixture.gaussian([1.0, -2.0, 0.5], 2.5),
]


def reference_log_density(p, x):
    x = np.atleast_2d(x)
    d = p.dim
    sq = ((x[:, None, :] - p.means[None]) ** 2).sum(-1)
    comp = np.log(p.weights) - 0.5 * d * np.log(2 * np.pi * p.variances) - sq / (2 * p.variances)
    return logsumexp(comp, axis=1)


def test_score_examples():
    p = GaussianMixture.standard(1)
    assert p.score(0.0)[0, 0] == 0.0
    assert p.score(2.0)[0, 0] == -2.0
    assert TWO_MODES.score(0.0)[0, 0] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("p", TARGETS, ids=["std", "two_modes", "mix2d", "gauss3d"])
def test_log_density_matches_reference(p):
    x = np.random.default_rng(0).normal(size=(500, p.dim)) * 3
    np.testing.assert_allclose(p.log_density(x), reference_log_density(p, x), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("p", TARGETS, ids=["std", "two_modes", "mix2d", "gauss3d"])
def test_score_matches_finite_differences(p):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, p.dim)) * 2
    step = 1e-5
    fd = np.empty_like(x)
    for j in range(p.dim):
        e = np.zeros(p.dim)
        e[j] = step
        fd[:, j] = (p.log_density(x + e) - p.log_density(x - e)) / (2 * step)
    s = p.score(x)
    assert np.all(np.abs(s - fd) <= 1e-6 * np.maximum(1.0, np.abs(s)))


def test_score_jacobian_matches_finite_differences():
    p = TARGETS[2]
    x = np.random.default_rng(2).normal(size=(50, 2))
    step = 1e-6
    jac = p.score_jacobian(x)
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        fd = (p.score(x + e) - p.score(x - e)) / (2 * step)
        np.testing.assert_allclose(jac[:, :, j], fd, atol=1e-6)


def test_noised_examples():
    p = GaussianMixture.standard(1)
    smld = make_model("SMLD", horizon=1.0)
    assert p.noised(smld, 1.0).allclose(GaussianMixture.gaussian([0.0], 2.0))
    assert TWO_MODES.noised(smld, 0.0) == TWO_MODES
    ddpm = make_model("DDPM", horizon=2.0)
    out = TWO_MODES.noised(ddpm, math.log(4))
    assert out.allclose(GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [1.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(family=st.sampled_from(["SMLD", "DDPM"]), t1=st.floats(0.0, 2.0), t2=st.floats(0.0, 2.0))
def test_noising_then_bridging_matches_direct_noising(family, t1, t2):
    T = 2.0
    s1, s2 = sorted((t1, t2))
    m = make_model(family, horizon=T)
    alpha, sig2 = bridge_params(m, T - s2, T - s1)
    two_step = TARGETS[2].noised(m, s1).bridged(alpha, sig2)
    assert two_step.allclose(TARGETS[2].noised(m, s2), rtol=1e-12, atol=1e-12)


def test_smoothness_of_noised_examples():
    info = SmoothnessInfo(1.0, 5.0, 0.0, 10.0, 2)
    out = smoothness_of_noised(info, make_model("DDPM", horizon=1.0), math.log(2))
    assert out.lsi_constant == pytest.approx(3.0, rel=1e-14)
    assert out.second_moment == pytest.approx(6.0, rel=1e-14)
    smld = make_model("SMLD", horizon=2.0)
    assert smoothness_of_noised(info, smld, 2.0).lsi_constant == 7.0


def test_single_gaussian_smoothness_is_exact():
    info = GaussianMixture.gaussian([0.0, 0.0], 2.5).smoothness()
    assert info.lsi_constant == 2.5 and info.lipschitz == pytest.approx(0.4)
    assert info.lipschitz * info.lsi_constant >= 1.0 - 1e-12
    assert info.provenance == "exact"


def test_mixture_needs_user_lsi_constant():
    with pytest.raises(ValueError):
        TWO_MODES.smoothness()
    assert TWO_MODES.smoothness(3.0).provenance == "user"


@pytest.mark.parametrize("p", TARGETS[:3], ids=["std", "two_modes", "mix2d"])
def test_lipschitz_bound_dominates_numeric(p):
    L, _ = p.lipschitz_bound()
    pts = np.random.default_rng(3).normal(size=(4000, p.dim)) * 4
    assert numeric_lipschitz(p, pts) <= L + 1e-9


def test_mixture_moments_match_sampling():
    p = TARGETS[2]
    x = p.sample(400_000, np.random.default_rng(4))
    np.testing.assert_allclose(x.mean(0), p.mean(), atol=0.01)
    assert np.mean(np.sum(x * x, 1)) == pytest.approx(p.second_moment(), rel=0.01)


def test_bump_shape():
    assert bump(0.0) == 1.0
    assert bump(1.0) == 0.0 and bump(-1.2) == 0.0
    y = np.linspace(-0.99, 0.99, 401)
    h = 1e-6
    np.testing.assert_allclose(bump_d1(y), (bump(y + h) - bump(y - h)) / (2 * h), atol=1e-6)


def test_bump_score_examples():
    q = BumpTarget(10.0)
    assert bump_score(q, 0.0) == 0.0
    assert bump_score(q, 10.0) == -10.0
    assert q.support == (5.0, 15.0)


@pytest.mark.parametrize("L", [2.0, 4.0, 10.0])
def test_bump_normalizer_integrates_to_one(L):
    q = BumpTarget(L)
    grid = QuadratureGrid(((-14.0, 1.5 * L + 6.0),), 2 ** 17 + 1)
    x = grid.axes()[0]
    assert grid.integrate(q.density(x[:, None])) == pytest.approx(1.0, abs=1e-8)


def test_bump_smoothness():
    q = BumpTarget(6.0)
    x = np.linspace(-5, 15, 20001)
    assert np.max(np.abs(q.potential_d2(x))) <= q.lipschitz_bound() + 1e-12
    assert q.lipschitz_bound() == 1.0 + 4.0 * bump_d2_sup()


def test_bump_error_bound_holds_at_L10():
    rep = bump_l2_error_bound(BumpTarget(10.0))
    assert rep.holds and rep.mean_sq_error <= rep.analytic_bound
    ref = quad(lambda y: float(bump_d1(np.array([y]))[0]) ** 2, -1, 1)[0]
    assert bump_d1_sq_integral() == pytest.approx(ref, rel=1e-10)
