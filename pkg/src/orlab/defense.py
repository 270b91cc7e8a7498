"""Output randomization: noisy model outputs with calibrated variance.

The defense replaces the class-probability vector ``p`` by the
stochastic ``d(p) = p + eps`` with Gaussian ``eps``; the result need not
be a probability mass function (no clipping, no renormalization). This
module carries the probability math for the misclassification rate a
given noise level induces, two variance calibrators (a closed form and
a Monte-Carlo one that double-checks it), and the defended query
wrapper with strict query accounting.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, ndtri

from . import nn

__all__ = [
    "NoiseSpec", "ConfidenceGap", "QueryLedger", "QueryBudgetExceededError",
    "DefendedOracle", "std_normal_cdf", "probit", "pairwise_flip_prob",
    "misclassification_bound", "calibrate_variance", "calibrate_variance_mc",
    "perturb_output", "defended_query", "confidence_gaps", "assert_prob_vector",
]

_SITES = ("probabilities", "logits")
_PHASES = ("inference", "training")


@dataclass(frozen=True)
class NoiseSpec:
    """Per-class noise means/variances plus where and when to inject.

    ``mu`` and ``sigma2`` may be scalars (shared across classes) or
    per-class sequences. ``site`` picks whether noise lands on the
    softmax probabilities or on the pre-softmax logits; ``phase`` records
    whether the spec describes an inference-time defense or train-time
    hardening.
    """

    mu: object = 0.0
    sigma2: object = 0.0
    site: str = "probabilities"
    phase: str = "inference"

    def __post_init__(self):
        if self.site not in _SITES:
            raise ValueError(f"site must be one of {_SITES}, got {self.site!r}")
        if self.phase not in _PHASES:
            raise ValueError(f"phase must be one of {_PHASES}, got {self.phase!r}")
        if np.any(np.asarray(self.sigma2, dtype=np.float64) < 0):
            raise ValueError("sigma2 entries must be nonnegative")

    def mu_vec(self, num_classes):
        v = np.broadcast_to(np.asarray(self.mu, dtype=np.float64),
                            (num_classes,)).copy()
        return v

    def sigma2_vec(self, num_classes):
        v = np.broadcast_to(np.asarray(self.sigma2, dtype=np.float64),
                            (num_classes,)).copy()
        return v

    @property
    def is_zero(self):
        return (not np.any(np.asarray(self.sigma2, dtype=np.float64) > 0)
                and not np.any(np.asarray(self.mu, dtype=np.float64) != 0))


@dataclass(frozen=True)
class ConfidenceGap:
    """Gaps delta_i = p_top - p_i for every class i except the top one."""

    top_class: int
    classes: np.ndarray
    deltas: np.ndarray


class QueryBudgetExceededError(RuntimeError):
    """The attack's query budget is exhausted; partial results stand."""


class QueryLedger:
    """Counts every physical model evaluation against a hard limit."""

    def __init__(self, limit):
        if limit < 0:
            raise ValueError("query limit must be nonnegative")
        self.limit = int(limit)
        self.count = 0

    def charge(self, n=1):
        if self.count + n > self.limit:
            raise QueryBudgetExceededError(
                f"query budget exhausted ({self.count}+{n} > {self.limit})")
        self.count += n

    @property
    def remaining(self):
        return self.limit - self.count

    def __repr__(self):
        return f"QueryLedger({self.count}/{self.limit})"


# ---------------------------------------------------------------------------
# probability primitives

_SQRT2 = float(np.sqrt(2.0))


def std_normal_cdf(t):
    """Standard Gaussian cdf via the complementary error function."""
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("cdf argument must be finite")
    return 0.5 * erfc(-t / _SQRT2)


def probit(k):
    """Inverse standard Gaussian cdf on the open interval (0, 1)."""
    k = float(k)
    if not 0.0 < k < 1.0:
        raise ValueError(f"probit needs 0 < K < 1, got {k}")
    return float(ndtri(k))


def pairwise_flip_prob(delta_i, mu_i=0.0, mu_m=0.0, sigma2_i=0.0, sigma2_m=0.0,
                       standardization="literal"):
    """Probability that noised class i overtakes the noised top class.

    The default "literal" form standardizes the gap by the variance sum,
    Phi(-(delta - mu_i + mu_m) / (sigma2_i + sigma2_m)). The difference
    of the two noise draws is actually N(mu_i - mu_m, sigma2_i + sigma2_m),
    so the dimensionally consistent divisor is sqrt(sigma2_i + sigma2_m);
    pass standardization="std" for that exact flip probability (the one
    Monte-Carlo simulation reproduces). Both are kept on purpose.
    """
    delta_i = float(delta_i)
    var = float(sigma2_i) + float(sigma2_m)
    gap = delta_i - float(mu_i) + float(mu_m)
    if var <= 0.0:
        # degenerate noiseless race: deterministic outcome, fair coin at a tie
        if gap > 0:
            return 0.0
        if gap < 0:
            return 1.0
        return 0.5
    if standardization == "literal":
        denom = var
    elif standardization == "std":
        denom = np.sqrt(var)
    else:
        raise ValueError(f"standardization must be literal|std, "
                         f"got {standardization!r}")
    return std_normal_cdf(-gap / denom)


def misclassification_bound(p, spec, standardization="std"):
    """Union bound on the argmax flipping anywhere in d(p): min(1, sum K_i).

    Defaults to the exact ("std") pairwise flip probability: that is the
    only form under which the result genuinely upper-bounds the empirical
    argmax-flip frequency (the "literal" form understates flips whenever
    the pairwise variance sum is below 1).
    """
    p = assert_prob_vector(p)
    c = p.shape[0]
    mu = spec.mu_vec(c)
    s2 = spec.sigma2_vec(c)
    gap = confidence_gaps(p)
    m = gap.top_class
    total = 0.0
    for i, delta in zip(gap.classes, gap.deltas):
        total += pairwise_flip_prob(delta, mu[i], mu[m], s2[i], s2[m],
                                    standardization=standardization)
    return min(1.0, total)


def calibrate_variance(delta_i, k):
    """Closed-form noise variance for a target per-pair flip rate K < 0.5.

    Returns -delta / (2 * probit(K)); monotone increasing in both the
    gap and K. Note the dimensional quirk inherited from the flip-rate
    formula above: a literal Gaussian race across the gap needs
    delta^2 / (2 * probit(K)^2) instead, which is what the Monte-Carlo
    calibrator converges to. Both are exposed on purpose.
    """
    delta_i = float(delta_i)
    k = float(k)
    if delta_i <= 0:
        raise ValueError("confidence gap delta must be positive")
    if not 0.0 < k < 0.5:
        raise ValueError(f"target flip rate must be in (0, 0.5), got {k}")
    return -delta_i / (2.0 * probit(k))


def calibrate_variance_mc(delta_i, k, trials=10**6, rng=None, max_steps=60):
    """Bisect sigma^2 until the simulated pairwise flip rate matches K.

    Two independent N(0, sigma^2) draws race across the gap; their
    difference is N(0, 2 sigma^2), so the empirical rate is the fraction
    of frozen standard-normal draws z with z * sqrt(2 sigma^2) > delta.
    Stops when the rate is within two standard errors of K.
    """
    delta_i = float(delta_i)
    k = float(k)
    if delta_i <= 0:
        raise ValueError("confidence gap delta must be positive")
    if not 0.0 < k < 0.5:
        raise ValueError(f"target flip rate must be in (0, 0.5), got {k}")
    if trials < 10**4:
        raise ValueError("need at least 1e4 trials")
    rng = np.random.default_rng(rng)
    z = rng.standard_normal(trials)  # frozen across bisection steps
    se = np.sqrt(k * (1.0 - k) / trials)

    def rate(sig2):
        return float(np.mean(z * np.sqrt(2.0 * sig2) > delta_i))

    lo, hi = 0.0, delta_i ** 2
    while rate(hi) < k:
        hi *= 4.0
        if hi > 1e12:
            raise RuntimeError("flip rate target unreachable")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - k) <= 2.0 * se:
            return mid
        if r < k:
            lo = mid
        else:
            hi = mid
    raise RuntimeError(
        f"calibration did not converge in {max_steps} bisection steps "
        f"(delta={delta_i}, K={k}, trials={trials})")


# ---------------------------------------------------------------------------
# the stochastic output function

def perturb_output(v, spec, rng):
    """d(v) = v + eps with eps ~ N(mu, diag(sigma2)); fresh draw per call.

    No clipping or renormalization: the result may have negative entries
    and need not sum to one. The input is never mutated.
    """
    v = np.asarray(v, dtype=np.float64)
    c = v.shape[0]
    eps = rng.normal(spec.mu_vec(c), np.sqrt(spec.sigma2_vec(c)))
    return v + eps


def defended_query(model, x, spec, rng, ledger):
    """One defended model evaluation, charged to the ledger.

    Charges the ledger *before* touching the model, so an exhausted
    budget never leaks an extra evaluation. Noise lands after softmax
    for site "probabilities" and before it for site "logits"; draws are
    independent across calls.
    """
    ledger.charge(1)
    logits = nn.forward(model, x)
    if spec.site == "logits":
        return nn.softmax(perturb_output(logits, spec, rng))
    return perturb_output(nn.softmax(logits), spec, rng)


class DefendedOracle:
    """Black-box view of a defended model: callable, counts queries.

    Attacks receive only this object; it exposes outputs and query
    accounting, never gradients or parameters.
    """

    def __init__(self, model, spec, rng, ledger):
        self._model = model
        self.spec = spec
        self.rng = rng
        self.ledger = ledger

    def __call__(self, x):
        return defended_query(self._model, x, self.spec, self.rng, self.ledger)

    @property
    def queries_used(self):
        return self.ledger.count

    @property
    def queries_remaining(self):
        return self.ledger.remaining


# ---------------------------------------------------------------------------
# helpers

def assert_prob_vector(p, tol=1e-6):
    """Validate and return a probability vector (nonneg, sums to 1 +- tol)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 1:
        raise ValueError(f"expected a 1-D probability vector, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    s = float(p.sum())
    if abs(s - 1.0) > tol:
        raise ValueError(f"probability vector sums to {s}, not 1")
    return p


def confidence_gaps(p):
    """Gaps p_top - p_i for i != argmax; ties break to the lowest index."""
    p = assert_prob_vector(p)
    m = int(np.argmax(p))
    classes = np.array([i for i in range(p.shape[0]) if i != m], dtype=np.int64)
    deltas = p[m] - p[classes]
    return ConfidenceGap(top_class=m, classes=classes, deltas=deltas)
