"""Attack suite.

Black-box: zeroth-order coordinate descent over finite-difference
gradient estimates (Adam or Newton coordinate solvers) and the
query-limited attack driven by an NES gradient estimator with sign
updates. White-box: PGD under cross-entropy or the margin loss, and an
L2 margin attack at a fixed distortion weight. An averaging wrapper
lets an adaptive attacker trade queries for noise suppression.

Black-box attacks see the model only through a query oracle (outputs
plus query accounting, nothing else). A successful result always stores
an example that the *clean* model verifiably misclassifies; attacker
belief based on noisy observations is kept separately in metadata.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .defense import QueryBudgetExceededError

__all__ = [
    "NesParams", "PgdParams", "AttackConfig", "GradientEstimate",
    "AttackResult", "fd_gradient", "fd_gradient_estimate",
    "zoo_untargeted_loss", "zoo_targeted_loss", "zoo_objective",
    "zoo_attack", "nes_gradient", "ql_attack", "pgd_attack",
    "cw_l2_attack", "averaged_oracle", "AveragedOracle",
    "effective_query_limit", "export_loss_trace",
]

_LOG_FLOOR = 1e-12  # noised outputs may go nonpositive; the attacker clamps

_FAMILIES = ("zoo", "ql_nes", "pgd", "cw_l2")


@dataclass(frozen=True)
class NesParams:
    search_sigma: float = 1e-3
    samples: int = 20


@dataclass(frozen=True)
class PgdParams:
    eps: float = 8.0 / 255.0
    step: float = 2.0 / 255.0
    steps: int = 10


@dataclass(frozen=True)
class AttackConfig:
    family: str = "zoo"
    targeted: bool = False
    target: int | None = None
    kappa: float = 0.0
    h: float = 1e-4                     # finite-difference step
    max_queries: int = 20000
    distortion_weight: float = 10.0     # c in dist^2 + c * adv_loss
    solver: str = "adam"                # zoo coordinate solver: adam | newton
    zoo_lr: float = 0.01
    nes: NesParams = field(default_factory=NesParams)
    pgd: PgdParams = field(default_factory=PgdParams)
    pgd_loss: str = "xent"              # xent | cw
    cw_lr: float = 0.01
    cw_steps: int = 200
    averaging_k: int = 1                # >1 turns on the adaptive attacker
    stagnation_queries: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}")
        if self.h <= 0:
            raise ValueError("finite-difference step h must be positive")
        if self.max_queries < 0 or self.distortion_weight <= 0:
            raise ValueError("budgets must be positive")
        if self.averaging_k < 1:
            raise ValueError("averaging k must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.solver not in ("adam", "newton"):
            raise ValueError(f"unknown zoo solver {self.solver!r}")
        if self.pgd_loss not in ("xent", "cw"):
            raise ValueError(f"unknown pgd loss {self.pgd_loss!r}")
        if self.targeted and self.target is None:
            raise ValueError("targeted attack needs a target class")


@dataclass
class GradientEstimate:
    values: np.ndarray
    queries_spent: int
    h: float


@dataclass
class AttackResult:
    success: bool
    adversarial_example: np.ndarray | None
    l2_distortion: float
    linf_distortion: float
    queries_used: int
    loss_trace: list          # (iteration, queries, loss, best_l2) rows
    metadata: dict


def effective_query_limit(config):
    """Adaptive attackers (averaging k > 1) get a doubled query limit."""
    return config.max_queries * (2 if config.averaging_k > 1 else 1)


def _distortions(x, x0):
    d = np.asarray(x, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    return float(np.linalg.norm(d)), float(np.abs(d).max(initial=0.0))


def _result(success, x_adv, x0, queries, trace, meta):
    if x_adv is not None:
        l2, linf = _distortions(x_adv, x0)
    else:
        l2, linf = math.nan, math.nan
    return AttackResult(success=success, adversarial_example=x_adv,
                        l2_distortion=l2, linf_distortion=linf,
                        queries_used=queries, loss_trace=trace, metadata=meta)


def export_loss_trace(result, path):
    """Write a loss trace as CSV (iteration, queries, loss, best_l2)."""
    with open(path, "w") as fh:
        fh.write("iteration,queries,loss,best_l2\n")
        for it, q, loss, best in result.loss_trace:
            fh.write(f"{it},{q},{loss!r},{best!r}\n")


# ---------------------------------------------------------------------------
# gradient estimators

def fd_gradient(loss_oracle, x, i, h):
    """Symmetric difference quotient along coordinate i; exactly 2 calls."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"coordinate {i} out of range")
    xp = x.copy()
    xp[i] += h
    xm = x.copy()
    xm[i] -= h
    return (loss_oracle(xp) - loss_oracle(xm)) / (2.0 * h)


def fd_gradient_estimate(loss_oracle, x, coords, h, query_counter=None):
    """Finite-difference estimate over a set of coordinates."""
    start = query_counter.count if query_counter is not None else None
    values = np.array([fd_gradient(loss_oracle, x, int(i), h) for i in coords])
    spent = (query_counter.count - start) if query_counter is not None \
        else 2 * len(coords)
    return GradientEstimate(values=values, queries_spent=spent, h=h)


def nes_gradient(loss_oracle, x, search_sigma, m, rng, query_counter=None):
    """NES estimator with antithetic Gaussian search directions.

    g = sum_i [L(x + s u_i) u_i - L(x - s u_i) u_i] / (2 m s), exactly
    2m oracle calls, each antithetic pair sharing its direction u_i. On
    a constant loss the pairs cancel exactly and the estimate is the
    zero vector.
    """
    if m < 1:
        raise ValueError("need at least one NES sample")
    if search_sigma <= 0:
        raise ValueError("search sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    start = query_counter.count if query_counter is not None else None
    g = np.zeros_like(x)
    for _ in range(m):
        u = rng.standard_normal(x.shape[0])
        lp = loss_oracle(x + search_sigma * u)
        lm = loss_oracle(x - search_sigma * u)
        g += (lp - lm) * u
    g /= 2.0 * m * search_sigma
    spent = (query_counter.count - start) if query_counter is not None else 2 * m
    return GradientEstimate(values=g, queries_spent=spent, h=search_sigma)


# ---------------------------------------------------------------------------
# adversarial losses on (possibly noised) model outputs

def _safe_log(output):
    return np.log(np.maximum(np.asarray(output, dtype=np.float64), _LOG_FLOOR))


def zoo_untargeted_loss(output, true_class, kappa=0.0):
    """max(log f_i - max_{j != i} log f_j, -kappa) for true class i.

    Nonpositive entries (legitimate under a noised output) are clamped
    to a tiny floor before the log; callers flag clamping in metadata.
    """
    lf = _safe_log(output)
    i = int(true_class)
    rival = np.max(np.delete(lf, i))
    return float(max(lf[i] - rival, -kappa))


def zoo_targeted_loss(output, target, kappa=0.0):
    """max(max_{i != t} log f_i - log f_t, -kappa) for target class t."""
    lf = _safe_log(output)
    t = int(target)
    rival = np.max(np.delete(lf, t))
    return float(max(rival - lf[t], -kappa))


def zoo_objective(x, x0, c, adv_loss):
    """Full attack objective: squared l2 distortion plus weighted loss."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    return float(d @ d + c * adv_loss)


# ---------------------------------------------------------------------------
# black-box attacks

class _Observer:
    """Shared bookkeeping: adversarial loss, success sniffing, clamp count."""

    def __init__(self, config, label):
        self.config = config
        self.label = int(label)
        self.clamp_events = 0

    def adv_loss(self, output):
        if np.any(np.asarray(output) <= 0):
            self.clamp_events += 1
        if self.config.targeted:
            return zoo_targeted_loss(output, self.config.target, self.config.kappa)
        return zoo_untargeted_loss(output, self.label, self.config.kappa)

    def looks_adversarial(self, output):
        pred = int(np.argmax(output))
        if self.config.targeted:
            return pred == self.config.target
        return pred != self.label


def _verify(predict_fn, x, config, label):
    pred = predict_fn(x)
    return pred == config.target if config.targeted else pred != int(label)


def _check_preconditions(oracle, x0, label, config, predict_fn):
    if predict_fn(x0) != int(label):
        raise ValueError("attack precondition violated: x0 is misclassified "
                         "by the target model")
    if config.targeted and config.target == int(label):
        raise ValueError("targeted attack aimed at the true class")


class _Stagnation:
    """Stop after N consecutive queries without objective improvement."""

    def __init__(self, window):
        self.window = window
        self.best = math.inf
        self.stale = 0

    def update(self, objective, queries_spent):
        if objective < self.best - 1e-6 * max(1.0, abs(self.best)):
            self.best = objective
            self.stale = 0
        else:
            self.stale += queries_spent
        return self.stale >= self.window


def zoo_attack(oracle, x0, label, config, predict_fn):
    """Zeroth-order stochastic coordinate descent on the full objective.

    Per iteration: one centre query (objective trace, success sniffing,
    and the Newton curvature term), one random coordinate probed at
    x +- h e_i for the finite-difference slope, then an Adam or Newton
    coordinate update projected back into [0, 1]^n. Stops on observed
    success, budget exhaustion, or stagnation.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _check_preconditions(oracle, x0, label, config, predict_fn)
    start = oracle.queries_used
    if getattr(oracle, "queries_remaining", config.max_queries) < 2:
        return _result(False, None, x0, 0, [],
                       {"stop_reason": "budget", "observed_success": False})

    rng = np.random.default_rng(config.seed)
    obs = _Observer(config, label)
    stag = _Stagnation(config.stagnation_queries)
    dim = x0.shape[0]
    x = x0.copy()
    c = config.distortion_weight
    h = config.h
    lr = config.zoo_lr

    # per-coordinate Adam state
    m_t = np.zeros(dim)
    v_t = np.zeros(dim)
    steps_t = np.zeros(dim)
    beta1, beta2 = 0.9, 0.999

    trace = []
    candidate = None
    stop = "budget"
    it = 0
    try:
        while True:
            out = oracle(x)
            f0 = zoo_objective(x, x0, c, obs.adv_loss(out))
            if obs.looks_adversarial(out):
                candidate = x.copy()
                stop = "observed_success"
                trace.append((it, oracle.queries_used - start, f0,
                              _distortions(x, x0)[0]))
                break
            i = int(rng.integers(dim))
            before = oracle.queries_used
            xp = x.copy()
            xp[i] += h
            fp = zoo_objective(xp, x0, c, obs.adv_loss(oracle(xp)))
            xm = x.copy()
            xm[i] -= h
            fm = zoo_objective(xm, x0, c, obs.adv_loss(oracle(xm)))
            g = (fp - fm) / (2.0 * h)

            if config.solver == "newton":
                hess = (fp - 2.0 * f0 + fm) / (h * h)
                if hess > 0:
                    delta = -g / max(hess, 1e-3)
                else:
                    delta = -lr * g
            else:
                m_t[i] = beta1 * m_t[i] + (1 - beta1) * g
                v_t[i] = beta2 * v_t[i] + (1 - beta2) * g * g
                steps_t[i] += 1
                corr = math.sqrt(1 - beta2 ** steps_t[i]) / (1 - beta1 ** steps_t[i])
                delta = -lr * corr * m_t[i] / (math.sqrt(v_t[i]) + 1e-8)

            x[i] = min(1.0, max(0.0, x[i] + delta))
            spent = oracle.queries_used - before + 1  # probes + centre query
            trace.append((it, oracle.queries_used - start, f0, math.nan))
            if stag.update(f0, spent):
                stop = "stagnation"
                break
            it += 1
    except QueryBudgetExceededError:
        stop = "budget"

    queries = oracle.queries_used - start
    meta = {"stop_reason": stop, "observed_success": candidate is not None,
            "clamp_events": obs.clamp_events, "iterations": it}
    if candidate is None:
        return _result(False, None, x0, queries, trace, meta)
    success = _verify(predict_fn, candidate, config, label)
    return _result(success, candidate if success else None, x0, queries,
                   trace, meta)


def ql_attack(oracle, x0, label, config, predict_fn):
    """Query-limited attack: NES gradient estimate, sign update,
    projection onto the l-inf ball around x0 intersected with [0, 1]^n."""
    x0 = np.asarray(x0, dtype=np.float64)
    _check_preconditions(oracle, x0, label, config, predict_fn)
    start = oracle.queries_used
    if getattr(oracle, "queries_remaining", config.max_queries) < 2:
        return _result(False, None, x0, 0, [],
                       {"stop_reason": "budget", "observed_success": False})

    rng = np.random.default_rng(config.seed)
    obs = _Observer(config, label)
    stag = _Stagnation(config.stagnation_queries)
    eps, eta = config.pgd.eps, config.pgd.step
    x = x0.copy()
    trace = []
    candidate = None
    stop = "budget"
    it = 0

    def loss_at(z):
        return obs.adv_loss(oracle(z))

    try:
        while True:
            out = oracle(x)
            loss = obs.adv_loss(out)
            if obs.looks_adversarial(out):
                candidate = x.copy()
                stop = "observed_success"
                trace.append((it, oracle.queries_used - start, loss,
                              _distortions(x, x0)[0]))
                break
            before = oracle.queries_used
            est = nes_gradient(loss_at, x, config.nes.search_sigma,
                               config.nes.samples, rng)
            x = x - eta * np.sign(est.values)
            x = np.clip(x, x0 - eps, x0 + eps)
            x = np.clip(x, 0.0, 1.0)
            spent = oracle.queries_used - before + 1
            trace.append((it, oracle.queries_used - start, loss, math.nan))
            if stag.update(loss, spent):
                stop = "stagnation"
                break
            it += 1
    except QueryBudgetExceededError:
        stop = "budget"

    queries = oracle.queries_used - start
    meta = {"stop_reason": stop, "observed_success": candidate is not None,
            "clamp_events": obs.clamp_events, "iterations": it}
    if candidate is None:
        return _result(False, None, x0, queries, trace, meta)
    success = _verify(predict_fn, candidate, config, label)
    return _result(success, candidate if success else None, x0, queries,
                   trace, meta)


# ---------------------------------------------------------------------------
# white-box attacks

def pgd_attack(model, x0, y, config):
    """PGD in the l-inf ball: seeded random start, sign steps, projection.

    Maximizes cross-entropy (``pgd_loss="xent"``) or the negated margin
    (``pgd_loss="cw"``). The loss trace records the attacker's objective
    after each step; success means the final prediction differs from y.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = int(y)
    rng = np.random.default_rng(config.seed)
    eps, eta, steps = config.pgd.eps, config.pgd.step, config.pgd.steps
    loss_kind = config.pgd_loss

    def objective(z):
        logits = nn.forward(model, z)
        if loss_kind == "xent":
            return nn.cross_entropy(logits, y)[0]
        return -nn.cw_margin_loss(logits, y, config.kappa)

    x = np.clip(x0 + rng.uniform(-eps, eps, x0.shape), 0.0, 1.0)
    trace = [(0, 0, objective(x), math.nan)]
    for step in range(1, steps + 1):
        g = nn.input_grad_batch(model, x[None, :], np.array([y]),
                                loss_kind, config.kappa)[0]
        direction = np.sign(g) if loss_kind == "xent" else -np.sign(g)
        x = x + eta * direction
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, 0.0, 1.0)
        trace.append((step, 0, objective(x), math.nan))

    success = nn.predict(model, x) != y
    meta = {"stop_reason": "steps", "loss_kind": loss_kind, "final_example": x}
    return _result(success, x if success else None, x0, 0, trace, meta)


def cw_l2_attack(model, x0, target, config):
    """Targeted margin attack on ||x - x0||^2 + c * margin shortfall.

    Plain gradient descent at a fixed distortion weight, box constraint
    kept by clipping; returns the best (lowest-l2) iterate that the
    model classifies as the target.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    target = int(target)
    c = config.distortion_weight
    kappa = config.kappa

    if nn.predict(model, x0) == target:
        return _result(True, x0.copy(), x0, 0, [(0, 0, 0.0, 0.0)],
                       {"stop_reason": "degenerate_target"})

    x = x0.copy()
    best = None
    best_l2 = math.inf
    trace = []
    for step in range(config.cw_steps):
        logits = nn.forward(model, x)
        others = np.delete(np.arange(model.num_classes), target)
        rival = others[int(np.argmax(logits[others]))]
        shortfall = max(float(logits[rival] - logits[target]), -kappa)
        obj = zoo_objective(x, x0, c, shortfall)
        grad = 2.0 * (x - x0)
        if shortfall > -kappa:
            dlog = np.zeros(model.num_classes)
            dlog[rival] = 1.0
            dlog[target] = -1.0
            grad = grad + c * nn.input_grad_from_dlogits(model, x, dlog)
        x = np.clip(x - config.cw_lr * grad, 0.0, 1.0)
        if nn.predict(model, x) == target:
            l2 = _distortions(x, x0)[0]
            if l2 < best_l2:
                best, best_l2 = x.copy(), l2
        trace.append((step, 0, obj, best_l2 if best is not None else math.nan))

    meta = {"stop_reason": "steps"}
    return _result(best is not None, best, x0, 0, trace, meta)


# ---------------------------------------------------------------------------
# the adaptive attacker's averaging wrapper

class AveragedOracle:
    """Mean of k defended queries per logical call; the ledger sees all k."""

    def __init__(self, oracle, k):
        if k < 1:
            raise ValueError("averaging k must be >= 1")
        self.inner = oracle
        self.k = int(k)

    def __call__(self, x):
        acc = None
        for _ in range(self.k):
            out = self.inner(x)  # budget errors propagate with spent queries kept
            acc = out if acc is None else acc + out
        return acc / self.k

    @property
    def queries_used(self):
        return self.inner.queries_used

    @property
    def queries_remaining(self):
        return self.inner.queries_remaining


def averaged_oracle(oracle, k):
    """k = 1 returns the oracle unchanged; otherwise wrap it."""
    if k == 1:
        return oracle
    return AveragedOracle(oracle, k)
