"""Rapid switching: the chain generator is scaled to ``alpha * Q`` with alpha large.

Every limit is governed by the averaged intensity ``lambda_inf = lambda . pi``.
Each check evaluates the finite-alpha object on an alpha grid, measures its
distance to the limit (max norm for matrices, total variation for laws) and
fits the log-log decay order by least squares.
"""

import csv
from dataclasses import dataclass, field
import math

import numpy as np
from scipy import stats

from .base import fitted
from .binomial_model import MMBinomialModel, conditional_joint
from .chain import (
    invariant_distribution,
    make_rng,
    simulate_chains,
    validate_generator,
    validate_rates,
)
from .exceptions import InternalError, PreconditionError
from .linalg import binom, exp_joint_closed_form, mat_exp
from .validation import check_count, check_state, check_time

SLOPE_BAND = (-1.5, -0.5)


@dataclass
class LimitReport:
    """Deviation from a limit along an increasing alpha grid."""

    identity: str
    alphas: np.ndarray
    deviations: np.ndarray
    limit: np.ndarray | None = None
    slope: float = field(init=False)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float)
        self.deviations = np.asarray(self.deviations, dtype=float)
        if np.any(np.diff(self.alphas) <= 0):
            raise PreconditionError("alpha grid must be strictly increasing")
        if np.any(self.deviations < 0):
            raise InternalError("negative deviation")
        if len(self.alphas) > 1 and np.all(self.deviations > 0):
            self.slope = float(np.polyfit(np.log(self.alphas), np.log(self.deviations), 1)[0])
        else:
            self.slope = float("nan")

    @property
    def decreasing(self):
        return bool(np.all(np.diff(self.deviations) < 0))

    @property
    def slope_ok(self):
        return SLOPE_BAND[0] <= self.slope <= SLOPE_BAND[1]

    @property
    def flags(self):
        return {"decreasing": self.decreasing, "slope_in_band": self.slope_ok}

    @property
    def passed(self):
        return self.decreasing and self.slope_ok

    def rows(self):
        return [(a, dev, self.identity) for a, dev in zip(self.alphas, self.deviations)]


def write_reports(path, reports):
    """CSV ``alpha,deviation,identity`` for one or more reports."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "deviation", "identity"])
        for rep in reports:
            for a, dev, name in rep.rows():
                w.writerow([repr(float(a)), repr(float(dev)), name])


def _grid(alpha_grid):
    alphas = np.asarray(alpha_grid, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0 or np.any(alphas <= 0):
        raise PreconditionError("alpha grid must be a nonempty list of positive numbers")
    return alphas


def lambda_infinity(q, rates):
    """Averaged intensity ``lambda . pi``."""
    g = validate_generator(q)
    lam = validate_rates(rates, g.d)
    return float(lam.values @ invariant_distribution(g))


def resolvent_limit(q, rates):
    """``-pi 1^T / lambda_inf``."""
    g = validate_generator(q)
    pi = invariant_distribution(g)
    return -np.outer(pi, np.ones(g.d)) / lambda_infinity(g, rates)


def resolvent_limit_check(q, rates, alpha_grid):
    """Max-norm distance of ``(alpha Q - diag(lambda))^{-1}`` to ``-pi 1^T / lambda_inf``."""
    g = validate_generator(q)
    lam = validate_rates(rates, g.d)
    if not lam.all_positive:
        raise PreconditionError("resolvent limit requires every lambda_i > 0")
    limit = resolvent_limit(g, lam)
    devs = []
    for a in _grid(alpha_grid):
        try:
            inv = np.linalg.inv(a * g.q - np.diag(lam.values))
        except np.linalg.LinAlgError as exc:
            raise InternalError(f"alpha Q - diag(lambda) is singular at alpha={a}") from exc
        devs.append(np.abs(inv - limit).max())
    return LimitReport("resolvent", alpha_grid, devs, limit=limit)


def exp_limit_check(q, rates, k, t, alpha_grid):
    """Max-norm distance of ``exp((alpha Q - k diag(lambda)) t)`` to ``e^{-k lambda_inf t} pi 1^T``."""
    g = validate_generator(q)
    lam = validate_rates(rates, g.d)
    t = check_time(t, strict=True)
    k = float(k)
    pi = invariant_distribution(g)
    limit = math.exp(-k * float(lam.values @ pi) * t) * np.outer(pi, np.ones(g.d))
    devs = [np.abs(mat_exp(a * g.q - k * np.diag(lam.values), t) - limit).max()
            for a in _grid(alpha_grid)]
    return LimitReport(f"exp_k{k:g}", alpha_grid, devs, limit=limit)


def limit_blocks_F(n, lambda_inf, t):
    """Lower-triangular ``f[i, j] = C(n-j, n-i) e^{-(n-i) L t} (1 - e^{-L t})^{i-j}``.

    Column ``j`` is the Bin(n-j, 1-e^{-L t}) law shifted by j.
    """
    n = check_count(n, "n", minimum=1)
    t = check_time(t)
    surv = math.exp(-float(lambda_inf) * t)
    p = -math.expm1(-float(lambda_inf) * t)
    f = np.zeros((n + 1, n + 1))
    for j in range(n + 1):
        for i in range(j, n + 1):
            f[i, j] = binom(n - j, n - i) * surv ** (n - i) * p ** (i - j)
    return f


def limit_blocks_deviation(model, alpha, t):
    """Max distance between the ``alpha Q`` exp(𝐐 t) blocks and ``f[i, j] pi 1^T``."""
    model = fitted(model)
    n, d = model.n_, model.d_
    pi = invariant_distribution(model.q_)
    f = limit_blocks_F(n, float(model.lam_ @ pi), t)
    exact = exp_joint_closed_form(alpha * model.q_, model.lam_, n, t)
    limit = np.kron(f, np.outer(pi, np.ones(d)))
    return float(np.abs(exact - limit).max())


def limit_conditional_law(model, elapsed, state):
    """Blocks ``Bin(n - k0, 1 - e^{-lambda_inf tau})[k - k0] * pi``; shape (n+1, d)."""
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    k0, _ = check_state(state, model.d_, max_count=model.n_)
    pi = invariant_distribution(model.q_)
    lam_inf = float(model.lam_ @ pi)
    counts = np.zeros(model.n_ + 1)
    counts[k0:] = stats.binom.pmf(np.arange(model.n_ - k0 + 1), model.n_ - k0,
                                  -math.expm1(-lam_inf * tau))
    return np.outer(counts, pi)


def limit_conditional_check(model, alpha_grid, elapsed, state, method="auto"):
    """Total variation between the ``alpha Q`` conditional joint law and its limit."""
    model = fitted(model)
    if not isinstance(model, MMBinomialModel):
        raise PreconditionError("conditional limit check needs a binomial model")
    if not model.rates_.all_positive:
        raise PreconditionError("conditional limit requires every lambda_i > 0")
    limit = limit_conditional_law(model, elapsed, state)
    devs = []
    for a in _grid(alpha_grid):
        law = conditional_joint(model.accelerated(a), elapsed, state, method=method).blocks
        devs.append(0.5 * np.abs(law - limit).sum())
    return LimitReport("conditional_tv", alpha_grid, devs, limit=limit)


@dataclass
class TimechangeReport:
    """Outcome of simulating the accelerated count two ways.

    ``coupled_mismatch`` is the fraction of replications whose counts differ
    when both constructions consume the same random stream; ``p_value`` is the
    two-sample chi-square test on independent streams; ``limit_z`` is the
    largest |z| of the empirical count law against the Bin(n, 1-e^{-lambda_inf t})
    limit (binomial model only).
    """

    alpha: float
    replications: int
    coupled_mismatch: float
    max_hazard_gap: float
    p_value: float
    law_direct: np.ndarray
    law_compressed: np.ndarray
    limit: np.ndarray | None
    limit_z: float | None

    @property
    def passed(self):
        return self.p_value > 0.01


def _counts(model, hazard, rng):
    if isinstance(model, MMBinomialModel):
        return rng.binomial(model.n_, -np.expm1(-hazard))
    return rng.poisson(hazard)


def _construct(model, alpha, horizon, rng, size, compressed):
    """Counts at ``horizon`` for the chain ``X^alpha``, built directly or by time change."""
    if compressed:
        state, hazard = simulate_chains(model.q_, model.initial_law_, horizon, rng, size,
                                        rates=model.lam_, time_scale=alpha)
    else:
        state, hazard = simulate_chains(alpha * model.q_, model.initial_law_, horizon, rng,
                                        size, rates=model.lam_)
    return _counts(model, hazard, rng), hazard


def _two_sample_p(a, b):
    top = int(max(a.max(), b.max())) + 1
    table = np.array([np.bincount(a, minlength=top), np.bincount(b, minlength=top)])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(table)[1])


def timechange_simulation_check(model, alpha, seed, horizon, replications=10**5):
    """Compare ``N^alpha`` from the chain ``alpha Q`` with the time-compressed ``X_{alpha t}``.

    Both constructions draw the count from its law given the integrated
    intensity. Coupled run: both use stream ``(seed, 0)``; independent run:
    streams ``(seed, 1)`` and ``(seed, 2)``.
    """
    model = fitted(model)
    alpha = float(alpha)
    if alpha <= 0:
        raise PreconditionError(f"alpha must be positive, got {alpha}")
    horizon = check_time(horizon, "horizon", strict=True)
    size = check_count(replications, "replications", minimum=100)
    n_a, h_a = _construct(model, alpha, horizon, make_rng(seed, 0), size, compressed=False)
    n_b, h_b = _construct(model, alpha, horizon, make_rng(seed, 0), size, compressed=True)
    mismatch = float(np.mean(n_a != n_b))
    gap = float(np.abs(h_a - h_b).max())
    ind_a, _ = _construct(model, alpha, horizon, make_rng(seed, 1), size, compressed=False)
    ind_b, _ = _construct(model, alpha, horizon, make_rng(seed, 2), size, compressed=True)
    p_value = _two_sample_p(ind_a, ind_b)
    top = int(max(ind_a.max(), ind_b.max()))
    law_a = np.bincount(ind_a, minlength=top + 1) / size
    law_b = np.bincount(ind_b, minlength=top + 1) / size
    limit = limit_z = None
    if isinstance(model, MMBinomialModel):
        lam_inf = lambda_infinity(model.q_, model.lam_)
        limit = stats.binom.pmf(np.arange(model.n_ + 1), model.n_, -math.expm1(-lam_inf * horizon))
        emp = np.bincount(ind_a, minlength=model.n_ + 1) / size
        se = np.sqrt(limit * (1 - limit) / size)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (emp - limit) / se, 0.0)
        limit_z = float(np.abs(z).max())
    return TimechangeReport(alpha=alpha, replications=size, coupled_mismatch=mismatch,
                            max_hazard_gap=gap, p_value=p_value, law_direct=law_a,
                            law_compressed=law_b, limit=limit, limit_z=limit_z)
