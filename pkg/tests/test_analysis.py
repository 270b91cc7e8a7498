"""Analysis tests: FD error math, curvature regularizer, tail bounds."""

import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from orlab import analysis, nn


def tail_oracle(t):
    """50-digit upper-tail oracle."""
    with mpmath.workdps(50):
        val = mpmath.quad(
            lambda u: mpmath.exp(-u * u / 2) / mpmath.sqrt(2 * mpmath.pi),
            [t, mpmath.inf])
    return float(val)


# ---------------------------------------------------------------------------
# FD gradient error

def test_fd_gradient_error_trivial():
    assert analysis.fd_gradient_error(1.5, 1.5) == 0.0
    assert analysis.fd_gradient_error(2.0, -1.0) == 3.0


def test_expected_fd_error_degenerate_cases():
    assert analysis.expected_fd_error_approx(0.7, 0.2, 0.7, 0.2, 0.01, 1e-4) == 0.0
    assert analysis.expected_fd_error_approx(0.7, 0.2, 0.6, 0.3, 0.0, 1e-4) == 0.0


def test_expected_fd_error_plug_in_value():
    # exact rational evaluation of the formula at the reference point
    s2, h = Fraction(1, 100), Fraction(1, 10000)
    pc, po, pcp, pop = (Fraction(7, 10), Fraction(2, 10),
                        Fraction(6, 10), Fraction(3, 10))
    term1 = (s2 + po**2 + pcp**2) / (pcp**2 * po**2)
    term2 = (s2 + pop**2 + pc**2) / (pc**2 * pop**2)
    expected = s2 / (4 * h) * (term1 - term2)
    assert expected == Fraction(221875, 588)
    got = analysis.expected_fd_error_approx(0.7, 0.2, 0.6, 0.3, 0.01, 1e-4)
    assert got == pytest.approx(float(expected), rel=1e-12)


def _mc_fd_error(pc, po, pcp, pop, s2, h, n=2 * 10**6, seed=0):
    """Direct simulation of |E[g - gamma]| with the attacker's log clamp."""
    rng = np.random.default_rng(seed)
    sig = math.sqrt(s2)

    def noisy_log(p):
        return np.log(np.maximum(p + sig * rng.standard_normal(n), 1e-12))

    gamma = (noisy_log(pc) - noisy_log(po)) - (noisy_log(pcp) - noisy_log(pop))
    g = math.log(pc / po) - math.log(pcp / pop)
    return abs(g - gamma.mean()) / (2 * h)


def test_expected_fd_error_against_monte_carlo():
    # in the surrogate's validity regime (noise std well below every
    # probability) the plug-in value tracks direct simulation closely
    approx = analysis.expected_fd_error_approx(0.7, 0.2, 0.6, 0.3, 4e-4, 1e-4)
    empirical = _mc_fd_error(0.7, 0.2, 0.6, 0.3, 4e-4, 1e-4)
    assert abs(approx - empirical) / empirical <= 0.2


def test_expected_fd_error_breaks_down_when_noise_rivals_probs():
    # at sigma = 0.1 vs p_o = 0.2 the clamped log dominates E[gamma]
    # (the floor is hit on ~2.3% of draws), so the second-order value
    # understates the real error by severalfold: the defended gradient
    # is even worse than the surrogate predicts
    approx = analysis.expected_fd_error_approx(0.7, 0.2, 0.6, 0.3, 0.01, 1e-4)
    empirical = _mc_fd_error(0.7, 0.2, 0.6, 0.3, 0.01, 1e-4)
    assert empirical > 2 * approx


def test_expected_fd_error_rejects_bad_probs():
    with pytest.raises(ValueError):
        analysis.expected_fd_error_approx(0.0, 0.2, 0.6, 0.3, 0.01, 1e-4)
    with pytest.raises(ValueError):
        analysis.expected_fd_error_approx(0.7, 0.2, 0.6, 1.2, 0.01, 1e-4)


# ---------------------------------------------------------------------------
# Hessian and the curvature regularizer

def test_hessian_two_class_uniform():
    h = analysis.ce_hessian_logits([0.0, 0.0])
    assert np.allclose(h, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)


def test_hessian_annihilates_ones_and_is_psd():
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = rng.normal(0, 3, 7)
        h = analysis.ce_hessian_logits(z)
        assert np.allclose(h @ np.ones(7), 0.0, atol=1e-12)
        assert np.allclose(h, h.T)
        assert np.linalg.eigvalsh(h).min() >= -1e-10


def test_hessian_matches_double_central_differences():
    rng = np.random.default_rng(2)
    z = rng.normal(0, 1.5, 5)
    y = 3
    step = 1e-4
    h = analysis.ce_hessian_logits(z, y)

    def loss(v):
        return nn.cross_entropy(v, y)[0]

    for i in range(5):
        for j in range(5):
            zpp = z.copy(); zpp[i] += step; zpp[j] += step
            zpm = z.copy(); zpm[i] += step; zpm[j] -= step
            zmp = z.copy(); zmp[i] -= step; zmp[j] += step
            zmm = z.copy(); zmm[i] -= step; zmm[j] -= step
            num = (loss(zpp) - loss(zpm) - loss(zmp) + loss(zmm)) / (4 * step**2)
            assert abs(h[i, j] - num) <= 1e-4


def test_taylor_regularizer_values():
    h = analysis.ce_hessian_logits([0.0, 0.0])
    assert analysis.taylor_regularizer(np.eye(2), h) == pytest.approx(0.5)
    assert analysis.taylor_regularizer(np.zeros((2, 2)), h) == 0.0


def test_taylor_regularizer_trace_identity():
    rng = np.random.default_rng(3)
    z = rng.normal(0, 2, 8)
    h = analysis.ce_hessian_logits(z)
    s2 = 0.37
    direct = analysis.taylor_regularizer(s2 * np.eye(8), h)
    eig_sum = s2 * float(np.linalg.eigvalsh(h).sum())
    assert direct == pytest.approx(eig_sum, abs=1e-8)
    assert direct == pytest.approx(s2 * np.trace(h), abs=1e-12)


def test_taylor_regularizer_shape_mismatch():
    with pytest.raises(ValueError):
        analysis.taylor_regularizer(np.eye(2), np.eye(3))


def test_regularizer_empirical_sigma_zero():
    rep = analysis.regularizer_empirical_check([0.0, 0.0], 0, 0.0)
    assert rep.analytic == rep.empirical == 0.0


def test_regularizer_empirical_uniform_logits():
    rep = analysis.regularizer_empirical_check([0.0, 0.0], 0, 0.05,
                                               trials=10**6, rng=4)
    assert rep.analytic == pytest.approx(6.25e-4, abs=1e-12)
    assert rep.rel_gap <= 0.1
    assert rep.analytic_unhalved == pytest.approx(2 * rep.analytic)


def test_regularizer_relative_gap_shrinks_with_sigma():
    # common random numbers across sigmas: the systematic (higher-order)
    # part of the gap dominates and scales with sigma^2
    gaps = {}
    for sigma in (0.1, 0.05, 0.01):
        rep = analysis.regularizer_empirical_check(
            np.array([0.4, -0.3, 0.1]), 0, sigma, trials=4 * 10**5, rng=5)
        gaps[sigma] = rep.rel_gap
    assert gaps[0.1] > gaps[0.05] > gaps[0.01]


def test_logit_margin():
    assert analysis.logit_margin([5.0, 1.0], 0) == 4.0
    assert analysis.logit_margin([2.0, 2.0, 2.0], 1) == 0.0
    assert analysis.logit_margin([1.0, 3.0], 0) == -2.0


# ---------------------------------------------------------------------------
# Mill's ratio and the tail lemmas

def test_mills_sandwich_holds_on_asserted_range():
    for t in np.arange(1.0, 8.0 + 1e-9, 0.1):
        lo, val, up = analysis.mills_ratio_bounds(float(t))
        assert lo <= val <= up


def test_mills_sandwich_also_holds_at_zero():
    lo, val, up = analysis.mills_ratio_bounds(0.0)
    assert lo <= val <= up
    assert val == pytest.approx(0.5, abs=1e-12)


def test_mills_values_at_two():
    lo, val, up = analysis.mills_ratio_bounds(2.0)
    phi2 = math.exp(-2.0) / math.sqrt(2 * math.pi)
    assert val == pytest.approx(tail_oracle(2.0), abs=1e-12)
    assert lo == pytest.approx(2 * phi2 / (2 + math.sqrt(8.0)), abs=1e-15)
    assert up == pytest.approx(2 * phi2 / (2 + math.sqrt(4 + 8 / math.pi)),
                               abs=1e-15)


def test_mills_ratio_tightens_asymptotically():
    lo, _, up = analysis.mills_ratio_bounds(8.0)
    assert up / lo <= 1.01
    ratios = [analysis.mills_ratio_bounds(t)[2] / analysis.mills_ratio_bounds(t)[0]
              for t in (1.0, 2.0, 4.0, 8.0)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_mills_literal_pair_is_reported_not_asserted():
    # the loose textbook-style expressions sit below the true tail
    # everywhere; at t=0 they evaluate to the familiar constants
    lo0, val0, up0 = analysis.mills_ratio_bounds_literal(0.0)
    assert lo0 == pytest.approx(0.2820947917738781, abs=1e-12)
    assert up0 == pytest.approx(0.3989422804014327, abs=1e-12)
    assert up0 < val0  # not an upper bound even at zero
    for t in (0.0, 1.0, 2.0, 5.0):
        lo, val, up = analysis.mills_ratio_bounds_literal(t)
        assert lo <= up < val


def test_mills_rejects_negative_t():
    with pytest.raises(ValueError):
        analysis.mills_ratio_bounds(-0.5)
    with pytest.raises(ValueError):
        analysis.mills_ratio_bounds_literal(-0.5)


def test_lemma1_analytic_and_empirical():
    # delta = 0.5: threshold sqrt(2 ln 2), true pass prob Phi(threshold)
    chk = analysis.lemma1_bound_check(1.0, 0.5, trials=10**5, rng=6)
    truth = 1.0 - tail_oracle(math.sqrt(2 * math.log(2.0)))
    assert truth == pytest.approx(0.8806, abs=1e-4)
    assert chk.empirical == pytest.approx(truth, abs=0.005)
    assert chk.holds and chk.bound == 0.5

    chk = analysis.lemma1_bound_check(1.0, 0.1, trials=10**5, rng=7)
    truth = 1.0 - tail_oracle(math.sqrt(2 * math.log(10.0)))
    assert truth == pytest.approx(0.98405, abs=1e-4)
    assert chk.empirical == pytest.approx(truth, abs=0.005)
    assert chk.holds and chk.bound == pytest.approx(0.9)


def test_lemma1_scale_invariance():
    a = analysis.lemma1_bound_check(1.0, 0.1, trials=10**4, rng=8)
    b = analysis.lemma1_bound_check(5.0, 0.1, trials=10**4, rng=8)
    assert a.empirical == b.empirical


def test_lemma2_reference_point():
    # K=10, D=1: nu = ln(2 ln 20), threshold = sqrt(2 ln 20 - nu)
    ln20 = math.log(20.0)
    nu = math.log(2.0 * ln20)
    thresh = math.sqrt(2 * ln20 - nu)
    bound = math.exp(-1.0 / (8 * math.sqrt(2 * math.pi)))
    assert bound == pytest.approx(0.9513, abs=1e-4)
    truth = (1.0 - tail_oracle(thresh)) ** 10
    chk = analysis.lemma2_bound_check(10, 1.0, 1.0, trials=10**5, rng=9)
    assert chk.bound == pytest.approx(bound, abs=1e-12)
    assert chk.empirical == pytest.approx(truth, abs=0.01)
    assert chk.holds


def test_lemma2_scale_invariance():
    a = analysis.lemma2_bound_check(10, 1.0, 1.0, trials=10**4, rng=10)
    b = analysis.lemma2_bound_check(10, 5.0, 1.0, trials=10**4, rng=10)
    assert a.empirical == b.empirical


def test_lemma2_monotone_in_d():
    checks = [analysis.lemma2_bound_check(10, 1.0, d, trials=5 * 10**4, rng=11)
              for d in (1.0, 4.0, 16.0)]
    bounds = [c.bound for c in checks]
    emps = [c.empirical for c in checks]
    assert all(a > b for a, b in zip(bounds, bounds[1:]))
    assert all(a > b for a, b in zip(emps, emps[1:]))


def test_lemma2_rejects_imaginary_threshold():
    with pytest.raises(ValueError, match="imaginary"):
        analysis.lemma2_bound_check(2, 1.0, 16.0)


def test_lemma_grid_from_module_invariants():
    for delta in (0.5, 0.1, 0.01):
        assert analysis.lemma1_bound_check(1.0, delta, trials=10**5,
                                           rng=12).holds
    for k in (2, 10, 100):
        for d in (1.0, 4.0):
            ln2k = math.log(2 * k)
            if 2 * ln2k <= math.log(2 * d * ln2k):
                continue
            assert analysis.lemma2_bound_check(k, 1.0, d, trials=10**5,
                                               rng=13).holds


def test_verification_suite_runs_clean():
    rows = analysis.run_verification_suite(seed=0, trials=2 * 10**4,
                                           reg_trials=10**5)
    assert all(r["pass"] for r in rows)
    names = [r["check"] for r in rows]
    assert any("mills" in n for n in names)
    assert any("lemma1" in n for n in names)
    assert any("lemma2" in n for n in names)
