"""Defense tests: Gaussian math, calibration, and the defended oracle."""

import math

import mpmath
import numpy as np
import pytest

from orlab import defense, nn


def cdf_quad_oracle(t):
    """High-precision oracle: quadrature of the Gaussian density (50 digits)."""
    with mpmath.workdps(50):
        val = mpmath.quad(
            lambda u: mpmath.exp(-u * u / 2) / mpmath.sqrt(2 * mpmath.pi),
            [-mpmath.inf, t])
    return float(val)


def probit_bisect_oracle(k, tol=1e-12):
    lo, hi = -10.0, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if defense.std_normal_cdf(mid) < k:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# cdf / probit

def test_cdf_at_zero():
    assert defense.std_normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)


def test_cdf_symmetry():
    rng = np.random.default_rng(0)
    for t in rng.normal(0, 2, 30):
        assert defense.std_normal_cdf(t) + defense.std_normal_cdf(-t) == \
            pytest.approx(1.0, abs=1e-12)


def test_cdf_against_quadrature():
    for t in (-3.0, -0.7, 0.4, 2.1460, 4.0):
        assert defense.std_normal_cdf(t) == pytest.approx(cdf_quad_oracle(t),
                                                          abs=1e-10)
    assert defense.std_normal_cdf(2.1460) == pytest.approx(0.98405, abs=1e-4)


def test_probit_center():
    assert defense.probit(0.5) == pytest.approx(0.0, abs=1e-12)


def test_probit_against_bisection():
    assert defense.probit(0.1) == pytest.approx(probit_bisect_oracle(0.1),
                                                abs=1e-9)
    assert defense.probit(0.1) == pytest.approx(-1.28155, abs=1e-4)


def test_probit_round_trip():
    for t in np.arange(-4.0, 4.01, 0.5):
        assert defense.probit(defense.std_normal_cdf(t)) == \
            pytest.approx(t, abs=1e-6)


def test_probit_domain():
    for bad in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(ValueError):
            defense.probit(bad)


# ---------------------------------------------------------------------------
# pairwise flip probability

def test_flip_prob_symmetric_race():
    assert defense.pairwise_flip_prob(0.0, 0, 0, 0.3, 0.3) == pytest.approx(0.5)


def test_flip_prob_vanishes_at_large_gap():
    assert defense.pairwise_flip_prob(50.0, 0, 0, 0.25, 0.25) < 1e-12


def test_flip_prob_literal_standardization():
    # gap 0.5 over variance sum 0.5 -> Phi(-1)
    got = defense.pairwise_flip_prob(0.5, 0, 0, 0.25, 0.25)
    assert got == pytest.approx(defense.std_normal_cdf(-1.0), abs=1e-12)
    assert got == pytest.approx(0.15866, abs=1e-4)


def test_flip_prob_monotone_in_gap():
    vals = [defense.pairwise_flip_prob(d, 0, 0, 0.1, 0.1)
            for d in (0.0, 0.1, 0.3, 0.7, 1.5)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_flip_prob_degenerate_zero_variance():
    assert defense.pairwise_flip_prob(0.3, 0, 0, 0.0, 0.0) == 0.0
    assert defense.pairwise_flip_prob(0.0, 0, 0, 0.0, 0.0) == 0.5
    assert defense.pairwise_flip_prob(-0.3, 0, 0, 0.0, 0.0) == 1.0


# ---------------------------------------------------------------------------
# misclassification bound

def test_bound_two_class_coin():
    spec = defense.NoiseSpec(sigma2=0.2)
    assert defense.misclassification_bound([0.5, 0.5], spec) == pytest.approx(0.5)


def test_bound_zero_variance():
    spec = defense.NoiseSpec(sigma2=0.0)
    assert defense.misclassification_bound([0.7, 0.2, 0.1], spec) == 0.0


def test_bound_three_class_sum_and_monte_carlo():
    p = np.array([0.6, 0.3, 0.1])
    sigma2 = 0.05
    spec = defense.NoiseSpec(sigma2=sigma2)
    bound = defense.misclassification_bound(p, spec)

    # the bound is the sum of the two pairwise terms, by its own formula
    expected = sum(defense.pairwise_flip_prob(p[0] - p[i], 0, 0, sigma2, sigma2,
                                              standardization="std")
                   for i in (1, 2))
    assert bound == pytest.approx(min(1.0, expected), abs=1e-12)

    # Monte-Carlo argmax-flip frequency must respect the union bound
    rng = np.random.default_rng(1)
    trials = 10**6
    noisy = p + rng.normal(0, math.sqrt(sigma2), (trials, 3))
    flip_rate = np.mean(noisy.argmax(axis=1) != 0)
    se = math.sqrt(flip_rate * (1 - flip_rate) / trials)
    assert flip_rate <= bound + 3 * se


def test_literal_standardization_is_not_a_bound_below_unit_variance():
    # documents why the bound defaults to the exact form: with a variance
    # sum of 0.1 the literal flip probability understates the true rate
    p = np.array([0.6, 0.3, 0.1])
    sigma2 = 0.05
    literal = defense.misclassification_bound(p, defense.NoiseSpec(sigma2=sigma2),
                                              standardization="literal")
    rng = np.random.default_rng(2)
    noisy = p + rng.normal(0, math.sqrt(sigma2), (10**5, 3))
    flip_rate = np.mean(noisy.argmax(axis=1) != 0)
    assert flip_rate > literal  # the literal form fails as an upper bound


# ---------------------------------------------------------------------------
# calibration

def test_calibrate_variance_value():
    expected = -0.5 / (2.0 * probit_bisect_oracle(0.1))
    got = defense.calibrate_variance(0.5, 0.1)
    assert got == pytest.approx(expected, abs=1e-9)
    assert got == pytest.approx(0.19508, abs=1e-4)


def test_calibrate_variance_limits_and_monotone():
    assert defense.calibrate_variance(1e-9, 0.1) < 1e-8
    assert defense.calibrate_variance(0.5, 0.05) < defense.calibrate_variance(0.5, 0.1)
    assert defense.calibrate_variance(0.2, 0.1) < defense.calibrate_variance(0.8, 0.1)


def test_calibrate_variance_domain():
    for bad_k in (0.0, 0.5, 0.7, -0.1):
        with pytest.raises(ValueError):
            defense.calibrate_variance(0.5, bad_k)
    with pytest.raises(ValueError):
        defense.calibrate_variance(0.0, 0.1)


def test_calibrate_mc_matches_gaussian_race():
    # two N(0, s2) draws racing a gap need s2 = delta^2 / (2 probit(K)^2):
    # P(e > delta) = Phi(-delta / sqrt(2 s2)) = K
    analytic = 0.25 / (2.0 * probit_bisect_oracle(0.1) ** 2)
    got = defense.calibrate_variance_mc(0.5, 0.1, trials=10**6, rng=2)
    assert analytic == pytest.approx(0.0761, abs=2e-4)
    assert abs(got - analytic) / analytic <= 0.05


def test_calibrate_mc_round_trip():
    sig2 = defense.calibrate_variance_mc(0.5, 0.1, trials=10**6, rng=3)
    rng = np.random.default_rng(99)
    e = rng.normal(0, math.sqrt(sig2), 10**6) - rng.normal(0, math.sqrt(sig2), 10**6)
    assert np.mean(e > 0.5) == pytest.approx(0.1, abs=0.01)


def test_calibrate_mc_blows_up_near_half():
    big = defense.calibrate_variance_mc(0.5, 0.49, trials=10**5, rng=4)
    small = defense.calibrate_variance_mc(0.5, 0.1, trials=10**5, rng=4)
    assert big > 50 * small


def test_calibrate_mc_rejects_few_trials():
    with pytest.raises(ValueError):
        defense.calibrate_variance_mc(0.5, 0.1, trials=100)


# ---------------------------------------------------------------------------
# perturbation and the defended query

def test_perturb_zero_noise_is_identity():
    spec = defense.NoiseSpec(mu=0.0, sigma2=0.0)
    v = np.array([0.2, 0.8])
    out = defense.perturb_output(v, spec, np.random.default_rng(0))
    assert np.array_equal(out, v)


def test_perturb_monte_carlo_moments():
    spec = defense.NoiseSpec(sigma2=0.01)
    rng = np.random.default_rng(5)
    draws = np.array([defense.perturb_output([0.6, 0.4], spec, rng)
                      for _ in range(10**5)])
    assert np.allclose(draws.mean(axis=0), [0.6, 0.4], atol=0.002)
    assert np.allclose(draws.var(axis=0), 0.01, atol=0.0005)


def test_perturb_does_not_mutate_and_is_seed_deterministic():
    spec = defense.NoiseSpec(sigma2=0.04)
    v = np.array([0.5, 0.5])
    a = defense.perturb_output(v, spec, np.random.default_rng(7))
    b = defense.perturb_output(v, spec, np.random.default_rng(7))
    assert np.array_equal(v, [0.5, 0.5])
    assert np.array_equal(a, b)


def test_perturb_per_class_parameters():
    spec = defense.NoiseSpec(mu=[1.0, -1.0], sigma2=[0.0, 0.0])
    out = defense.perturb_output([0.5, 0.5], spec, np.random.default_rng(0))
    assert np.allclose(out, [1.5, -0.5])  # negative entry is legal


def test_defended_query_zero_noise_equals_clean(blobs_model):
    model, ds = blobs_model
    spec = defense.NoiseSpec(sigma2=0.0)
    ledger = defense.QueryLedger(10)
    out = defense.defended_query(model, ds.x_test[0], spec,
                                 np.random.default_rng(0), ledger)
    assert np.array_equal(out, nn.softmax(nn.forward(model, ds.x_test[0])))
    assert ledger.count == 1


def test_defended_query_noise_varies_per_call(blobs_model):
    model, ds = blobs_model
    spec = defense.NoiseSpec(sigma2=0.01)
    ledger = defense.QueryLedger(10)
    rng = np.random.default_rng(1)
    a = defense.defended_query(model, ds.x_test[0], spec, rng, ledger)
    b = defense.defended_query(model, ds.x_test[0], spec, rng, ledger)
    assert not np.array_equal(a, b)
    assert ledger.count == 2


def test_defended_query_logit_site_stays_pmf(blobs_model):
    model, ds = blobs_model
    spec = defense.NoiseSpec(sigma2=1.0, site="logits")
    out = defense.defended_query(model, ds.x_test[0], spec,
                                 np.random.default_rng(2), defense.QueryLedger(5))
    assert np.all(out >= 0) and out.sum() == pytest.approx(1.0, abs=1e-9)


def test_defended_query_budget_blocks_model_eval(blobs_model, monkeypatch):
    model, ds = blobs_model
    calls = {"n": 0}
    real_forward = nn.forward

    def counting_forward(m, x):
        calls["n"] += 1
        return real_forward(m, x)

    monkeypatch.setattr(defense.nn, "forward", counting_forward)
    ledger = defense.QueryLedger(1)
    spec = defense.NoiseSpec(sigma2=0.01)
    rng = np.random.default_rng(3)
    defense.defended_query(model, ds.x_test[0], spec, rng, ledger)
    assert calls["n"] == 1
    with pytest.raises(defense.QueryBudgetExceededError):
        defense.defended_query(model, ds.x_test[0], spec, rng, ledger)
    assert calls["n"] == 1  # budget error before any evaluation
    assert ledger.count == 1


def test_oracle_counts_every_forward(blobs_model, monkeypatch):
    model, ds = blobs_model
    calls = {"n": 0}
    real_forward = nn.forward

    def counting_forward(m, x):
        calls["n"] += 1
        return real_forward(m, x)

    monkeypatch.setattr(defense.nn, "forward", counting_forward)
    oracle = defense.DefendedOracle(model, defense.NoiseSpec(sigma2=0.01),
                                    np.random.default_rng(4),
                                    defense.QueryLedger(100))
    for _ in range(17):
        oracle(ds.x_test[0])
    assert oracle.queries_used == 17 == calls["n"]


def test_zero_mean_noise_preserves_expected_argmax():
    p = np.array([0.5, 0.3, 0.2])
    spec = defense.NoiseSpec(sigma2=0.25)
    rng = np.random.default_rng(6)
    draws = np.array([defense.perturb_output(p, spec, rng) for _ in range(20000)])
    assert int(np.argmax(draws.mean(axis=0))) == 0


def test_confidence_gaps_tie_break():
    gap = defense.confidence_gaps([0.4, 0.4, 0.2])
    assert gap.top_class == 0
    assert list(gap.classes) == [1, 2]
    assert np.allclose(gap.deltas, [0.0, 0.2])


def test_assert_prob_vector_rejects_bad_input():
    with pytest.raises(ValueError):
        defense.assert_prob_vector([0.5, 0.6])
    with pytest.raises(ValueError):
        defense.assert_prob_vector([-0.1, 1.1])


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        defense.NoiseSpec(sigma2=-0.1)
    with pytest.raises(ValueError):
        defense.NoiseSpec(site="input")
    with pytest.raises(ValueError):
        defense.NoiseSpec(phase="testing")
