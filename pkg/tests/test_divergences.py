import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorelab.bounds import chi2_gaussians
from scorelab.divergences import (MIN_SAMPLES, QuadratureGrid, empirical_vs_analytic, exact_sampler,
                                  histogram_tv, mode_masses, quadrature_divergence)
from scorelab.targets import BumpTarget, GaussianMixture

STD = GaussianMixture.standard(1)


def kl_gaussians(m1, v1, m2, v2):
    """KL(N(m2, v2) || N(m1, v1)) in 1-D."""
    return 0.5 * (v2 / v1 + (m2 - m1) ** 2 / v1 - 1 + math.log(v1 / v2))


def grid_for(v1, v2, m):
    sd = math.sqrt(1.0 / (2.0 / v2 - 1.0 / v1))
    w = 16 * max(sd, math.sqrt(v1), math.sqrt(v2)) + abs(m)
    return QuadratureGrid(((-w, w),), 2 ** 16 + 1)


@pytest.mark.parametrize("kind", ["chi2", "kl", "tv", "fisher"])
def test_identical_densities(kind):
    assert quadrature_divergence(STD, STD, kind).value == pytest.approx(0.0, abs=1e-10)


def test_chi2_example():
    q = GaussianMixture.gaussian([0.0], 1.5)
    val = quadrature_divergence(q, STD, "chi2").value
    assert val == pytest.approx(1.5 ** -0.5 * 0.5 ** -0.5 - 1, abs=1e-10)
    assert val == pytest.approx(0.15470053837925146, abs=1e-12)


def test_tv_bump_far_from_gaussian():
    assert quadrature_divergence(STD, BumpTarget(10.0), "tv").value >= 0.9


@settings(max_examples=40, deadline=None)
@given(m=st.floats(-2.0, 2.0), v1=st.floats(0.5, 2.0), r=st.floats(0.3, 1.8))
def test_quadrature_matches_gaussian_closed_forms(m, v1, r):
    v2 = r * v1
    p, q = GaussianMixture.gaussian([0.0], v1), GaussianMixture.gaussian([m], v2)
    grid = grid_for(v1, v2, m)
    chi = quadrature_divergence(q, p, "chi2", grid).value
    ref = chi2_gaussians(0.0, v1, m, v2, 1)
    assert abs(chi - ref) <= 1e-8 * max(1.0, ref)
    kl = quadrature_divergence(q, p, "kl", grid).value
    assert kl == pytest.approx(kl_gaussians(0.0, v1, m, v2), abs=1e-8)


PAIRS = [
    (GaussianMixture.gaussian([0.5], 2.0), STD),
    (GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0]), GaussianMixture.gaussian([0.0], 4.0)),
    (BumpTarget(4.0), STD),
    (GaussianMixture.gaussian([0.3, -0.2], 1.3), GaussianMixture.standard(2)),
]


@pytest.mark.parametrize("q,p", PAIRS)
def test_tv_symmetric_and_pinsker(q, p):
    tv_qp = quadrature_divergence(q, p, "tv").value
    tv_pq = quadrature_divergence(p, q, "tv").value
    assert abs(tv_qp - tv_pq) <= 1e-12
    assert 0.0 <= tv_qp <= 1.0
    kl = quadrature_divergence(q, p, "kl").value
    assert tv_qp <= math.sqrt(kl / 2) + 1e-9


def test_chi2_and_kl_are_asymmetric():
    q, p = PAIRS[0]
    assert abs(quadrature_divergence(q, p, "kl").value - quadrature_divergence(p, q, "kl").value) > 1e-3
    assert abs(quadrature_divergence(q, p, "chi2").value - quadrature_divergence(p, q, "chi2").value) > 1e-3


@pytest.mark.parametrize("kind", ["chi2", "kl", "tv"])
def test_refinement_within_reported_error(kind):
    q, p = PAIRS[1]
    grid = QuadratureGrid(((-14.0, 14.0),), 2 ** 12 + 1)
    coarse = quadrature_divergence(q, p, kind, grid)
    fine = quadrature_divergence(q, p, kind, grid.refined())
    assert abs(coarse.value - fine.value) <= max(coarse.error, 1e-12)


def test_fisher_matches_gaussian_closed_form():
    # fisher(q || p) = int q^2/p |grad log(q/p)|^2 for q = N(0, 2/3), p = N(0, 1)
    q = GaussianMixture.gaussian([0.0], 2.0 / 3.0)
    val = quadrature_divergence(q, STD, "fisher").value
    # q^2/p is (1 + chi2) times N(0, 1/2); the score gap is -x/2, so E x^2/4 under N(0, 1/2) = 1/8
    ref = (1 + chi2_gaussians(0.0, 1.0, 0.0, 2.0 / 3.0, 1)) * 0.125
    assert val == pytest.approx(ref, rel=1e-10)


def test_divergent_chi2_reported_as_infinite():
    # var2 >= 2 var1: q^2/p does not decay
    rep = quadrature_divergence(GaussianMixture.gaussian([0.0], 3.0), STD, "chi2")
    assert rep.value == math.inf and rep.diagnostic
    # far-apart means overflow the integrand
    assert quadrature_divergence(GaussianMixture.gaussian([60.0], 1.0), STD, "chi2").value == math.inf


def test_grid_auto_widens():
    grid = QuadratureGrid(((-3.0, 3.0),), 2 ** 12 + 1)
    rep = quadrature_divergence(GaussianMixture.gaussian([0.0], 1.2), STD, "chi2", grid)
    assert rep.value == pytest.approx(chi2_gaussians(0.0, 1.0, 0.0, 1.2, 1), abs=1e-6)


def test_exact_sampler_reproducible():
    a = exact_sampler(STD, 1, 42)
    assert np.array_equal(a, exact_sampler(STD, 1, 42))
    x = exact_sampler(STD, 10 ** 6, 1)
    assert x.var() == pytest.approx(1.0, rel=0.005)


def test_exact_sampler_recovers_weights():
    p = GaussianMixture([0.3, 0.7], [[-5.0], [5.0]], [1.0, 1.0])
    n = 200_000
    w = mode_masses(exact_sampler(p, n, 3), p)
    se = math.sqrt(0.21 / n)
    assert abs(w[0] - 0.3) <= 4 * se


def test_histogram_tv_floor_small_for_exact_samples():
    x = exact_sampler(STD, 100_000, 5)
    tv = histogram_tv(x, STD)
    assert 0.0 < tv < 0.02
    assert histogram_tv(x + 1.0, STD) > 0.3


def test_empirical_report():
    p = GaussianMixture([0.5, 0.5], [[-4.0], [4.0]], [1.0, 1.0])
    x = exact_sampler(p, 50_000, 6)
    rep = empirical_vs_analytic(x, p)
    assert rep.mean_error < 0.1 and rep.cov_error < 0.5
    assert rep.hist_tv <= max(3 * rep.hist_tv_floor, 0.02)
    assert np.all(np.abs(rep.mode_masses - 0.5) <= 3 * math.sqrt(0.25 / 50_000) + 1e-3)


def test_empirical_needs_enough_samples():
    with pytest.raises(ValueError):
        empirical_vs_analytic(np.zeros((MIN_SAMPLES - 1, 1)), STD)
