"""Simulation oracle for the analytic laws.

Two samplers are provided for the joint process ``(X, N)``: event-driven
competing clocks (the default) and thinning against a constant dominating
rate. Both exist as a single-path version returning a :class:`SamplePath` and
a vectorized batch version returning terminal states. Replications are split
into fixed-size batches; batch ``b`` draws from stream ``(seed, b)`` (see
:func:`mmcount.chain.make_rng`), so results do not depend on how batches are
scheduled.
"""

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass
import math

import numpy as np
from scipy import stats

from .base import fitted
from .binomial_model import MMBinomialModel, count_generator
from .chain import ChainPath, jump_tables, make_rng, simulate_chains
from .exceptions import NumericalCheckError, PreconditionError
from .linalg import mat_exp
from .poisson_model import truncation_level
from .validation import check_count, check_time

BATCH_SIZE = 1 << 15
CI_LEVEL = 0.99
SMALL_CELL = 30


def _activity(model, counts):
    if isinstance(model, MMBinomialModel):
        return model.n_ - counts
    return np.ones_like(counts)


def _initial_states(model, rng, size):
    x0 = model.initial_law_
    if np.count_nonzero(x0) == 1:
        return np.full(size, int(np.flatnonzero(x0)[0]))
    return np.searchsorted(np.cumsum(x0)[:-1], rng.random(size), side="right")


@dataclass(frozen=True)
class SamplePath:
    """Jointly simulated chain path and count jump times on ``[0, horizon]``."""

    chain: ChainPath
    jump_times: np.ndarray
    rates: np.ndarray
    n: int | None = None

    @property
    def horizon(self):
        return self.chain.horizon

    def count_at(self, t):
        return int(np.searchsorted(self.jump_times, t, side="right"))

    def hazard(self, t):
        """``integral_0^t lambda[X_s] ds`` (the per-obligor integrated intensity)."""
        edges = np.append(np.minimum(self.chain.times, t), t)
        return float(np.sum(self.rates[self.chain.states] * np.diff(edges)))

    def compensator(self, t):
        """``integral_0^t lambda[X_s] f(N_s) ds``; piecewise linear in t."""
        cuts = np.union1d(self.chain.times, self.jump_times)
        cuts = np.append(cuts[cuts < t], t)
        total = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            f = 1 if self.n is None else self.n - self.count_at(a)
            total += self.rates[self.chain.state_at(a)] * f * (b - a)
        return total


def simulate_joint(model, horizon, seed, rng=None):
    """Exact event-driven path of ``(X, N)``.

    In chain state ``j`` with count ``k`` the next event arrives at rate
    ``|Q_jj| + lambda_j f(k)`` and is a chain move or a count jump in
    proportion to the two rates.
    """
    model = fitted(model)
    horizon = check_time(horizon, "horizon", strict=True)
    rng = make_rng(seed) if rng is None else rng
    exit_rates, cum = jump_tables(model.q_)
    lam = model.lam_
    binomial = isinstance(model, MMBinomialModel)
    j = int(_initial_states(model, rng, 1)[0])
    k, t = 0, 0.0
    times, states, jumps = [0.0], [j], []
    while True:
        count_rate = lam[j] * ((model.n_ - k) if binomial else 1)
        total = exit_rates[j] + count_rate
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            break
        if rng.random() * total < exit_rates[j]:
            j = int(np.searchsorted(cum[j], rng.random(), side="right"))
            times.append(t)
            states.append(j)
        else:
            k += 1
            jumps.append(t)
    chain = ChainPath(times=np.array(times), states=np.array(states, dtype=int), horizon=horizon)
    return SamplePath(chain=chain, jump_times=np.array(jumps), rates=lam.copy(),
                      n=model.n_ if binomial else None)


def simulate_joint_thinning(model, horizon, seed, rng=None):
    """Second sampler: thinning of a Poisson stream at a constant dominating rate."""
    model = fitted(model)
    horizon = check_time(horizon, "horizon", strict=True)
    rng = make_rng(seed) if rng is None else rng
    exit_rates, cum = jump_tables(model.q_)
    lam = model.lam_
    binomial = isinstance(model, MMBinomialModel)
    f_max = model.n_ if binomial else 1
    bound = exit_rates.max() + lam.max() * f_max
    j = int(_initial_states(model, rng, 1)[0])
    k, t = 0, 0.0
    times, states, jumps = [0.0], [j], []
    while bound > 0:
        t += rng.exponential(1.0 / bound)
        if t >= horizon:
            break
        v = rng.random() * bound
        count_rate = lam[j] * ((model.n_ - k) if binomial else 1)
        if v < exit_rates[j]:
            j = int(np.searchsorted(cum[j], rng.random(), side="right"))
            times.append(t)
            states.append(j)
        elif v < exit_rates[j] + count_rate:
            k += 1
            jumps.append(t)
    chain = ChainPath(times=np.array(times), states=np.array(states, dtype=int), horizon=horizon)
    return SamplePath(chain=chain, jump_times=np.array(jumps), rates=lam.copy(),
                      n=model.n_ if binomial else None)


def sample_terminal(model, t, size, rng, method="events"):
    """Vectorized terminal ``(N_t, X_t)`` for ``size`` independent paths.

    ``method`` is ``"events"`` (competing clocks) or ``"thinning"``.
    """
    exit_rates, cum = jump_tables(model.q_)
    lam = model.lam_
    state = _initial_states(model, rng, size)
    count = np.zeros(size, dtype=int)
    clock = np.zeros(size)
    active = np.arange(size)
    if method == "thinning":
        f_max = model.n_ if isinstance(model, MMBinomialModel) else 1
        bound = exit_rates.max() + lam.max() * f_max
    while active.size:
        s = state[active]
        count_rate = lam[s] * _activity(model, count[active])
        chain_rate = exit_rates[s]
        total = np.full(active.size, bound) if method == "thinning" else chain_rate + count_rate
        with np.errstate(divide="ignore"):
            hold = rng.exponential(1.0, active.size) / total
        clock[active] += hold
        alive = clock[active] < t
        active, s = active[alive], s[alive]
        chain_rate, count_rate, total = chain_rate[alive], count_rate[alive], total[alive]
        v = rng.random(active.size) * total
        move = v < chain_rate
        movers = active[move]
        u = rng.random(movers.size)
        state[movers] = (u[:, None] >= cum[state[movers]]).sum(axis=1)
        hit = ~move & (v < chain_rate + count_rate)
        count[active[hit]] += 1
    return count, state


@dataclass
class EstimatorReport:
    """Monte Carlo estimate of the joint law ``P(N_t = k, X_t = e_j)``.

    ``estimates`` and ``standard_errors`` have shape (K+1, d). ``overflow`` is
    the fraction of replications with a count above K (Poisson model only).
    """

    t: float
    estimates: np.ndarray
    standard_errors: np.ndarray
    replications: int
    seed: int
    rao_blackwell: bool
    overflow: float = 0.0
    count_estimates: np.ndarray | None = None
    count_standard_errors: np.ndarray | None = None

    def confidence_interval(self, level=CI_LEVEL, marginal=True):
        """Two-sided interval per cell.

        Normal approximation, except crude cells with fewer than 30 hits,
        which get the exact Clopper-Pearson interval.
        """
        est = self.count_estimates if marginal else self.estimates
        se = self.count_standard_errors if marginal else self.standard_errors
        z = stats.norm.ppf(0.5 + level / 2)
        lo, hi = est - z * se, est + z * se
        if not self.rao_blackwell:
            hits = np.rint(est * self.replications)
            small = hits < SMALL_CELL
            a = 1 - level
            lo_cp = np.where(hits > 0, stats.beta.ppf(a / 2, hits, self.replications - hits + 1), 0.0)
            hi_cp = np.where(hits < self.replications,
                             stats.beta.ppf(1 - a / 2, hits + 1, self.replications - hits), 1.0)
            lo = np.where(small, lo_cp, lo)
            hi = np.where(small, hi_cp, hi)
        return lo, hi

    def z_scores(self, exact, marginal=True):
        est = self.count_estimates if marginal else self.estimates
        se = self.count_standard_errors if marginal else self.standard_errors
        exact = np.asarray(exact)[: est.shape[0]]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (exact - est) / se
        return np.where(se > 0, z, np.where(np.isclose(exact, est), 0.0, np.inf))


def _count_support(model, t):
    if isinstance(model, MMBinomialModel):
        return model.n_
    return truncation_level(model.rates_.max, t, 1e-12)


def _batch_moments(model, t, size, rng, top, rao_blackwell):
    """Per-cell sums and sums of squares for one batch."""
    d = model.d_
    if rao_blackwell:
        state, hazard = simulate_chains(model.q_, model.initial_law_, t, rng, size,
                                        rates=model.lam_)
        ks = np.arange(top + 1)
        if isinstance(model, MMBinomialModel):
            w = stats.binom.pmf(ks[None, :], model.n_, -np.expm1(-hazard)[:, None])
        else:
            w = stats.poisson.pmf(ks[None, :], hazard[:, None])
        onehot = np.eye(d)[state]
        joint = w[:, :, None] * onehot[:, None, :]
        counts_w = w
        overflow = 0.0
    else:
        count, state = sample_terminal(model, t, size, rng)
        over = count > top
        overflow = float(over.sum())
        joint = np.zeros((size, top + 1, d))
        keep = ~over
        joint[np.flatnonzero(keep), count[keep], state[keep]] = 1.0
        counts_w = joint.sum(axis=2)
    return (joint.sum(0), (joint ** 2).sum(0), counts_w.sum(0), (counts_w ** 2).sum(0), overflow)


def estimate_law(model, t, replications, seed, rao_blackwell=False, batch_size=BATCH_SIZE,
                 n_jobs=1):
    """Crude or Rao-Blackwellized estimate of the joint law at time ``t``.

    The Rao-Blackwell estimator simulates only the chain and averages the
    conditional law of ``N_t`` given the path: Bin(n, 1 - exp(-H_t)) for the
    binomial model and Poisson(H_t) for the Poisson model, with ``H_t`` the
    integrated intensity.
    """
    model = fitted(model)
    t = check_time(t, strict=True)
    replications = check_count(replications, "replications", minimum=1000)
    top = _count_support(model, t)
    sizes = [batch_size] * (replications // batch_size)
    if replications % batch_size:
        sizes.append(replications % batch_size)

    def run(b):
        return _batch_moments(model, t, sizes[b], make_rng(seed, b), top, rao_blackwell)

    if n_jobs == 1:
        parts = [run(b) for b in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    # batch results stacked in index order, then pairwise-summed by numpy
    s1, s2, c1, c2, over = (np.sum(np.stack([p[i] for p in parts]), axis=0) for i in range(5))
    r = float(replications)

    def moments(a, b):
        mean = a / r
        var = np.maximum(b / r - mean ** 2, 0.0)
        return mean, np.sqrt(var * r / (r - 1) / r)

    est, se = moments(s1, s2)
    cest, cse = moments(c1, c2)
    return EstimatorReport(t=t, estimates=est, standard_errors=se, replications=replications,
                           seed=seed, rao_blackwell=rao_blackwell, overflow=float(over) / r,
                           count_estimates=cest, count_standard_errors=cse)


def conditional_binomial_law(path, model, t, tol=1e-12):
    """Law of ``N_t`` given the chain path: Bin(n, 1 - exp(-H_t)).

    Computed both as binomial masses and as ``exp(H_t A) e_0``; the two must
    agree to ``tol``.
    """
    model = fitted(model)
    if not isinstance(model, MMBinomialModel):
        raise PreconditionError("conditional binomial law needs a binomial model")
    t = check_time(t)
    if t > path.horizon:
        raise PreconditionError(f"t={t} exceeds the path horizon {path.horizon}")
    n = model.n_
    hazard = path.hazard(t)
    masses = stats.binom.pmf(np.arange(n + 1), n, -math.expm1(-hazard))
    via_exp = mat_exp(count_generator(n), hazard)[:, 0]
    if np.abs(masses - via_exp).max() > tol:
        raise NumericalCheckError(
            f"binomial masses and exp(H A) e_0 disagree by {np.abs(masses - via_exp).max():.3e}")
    return masses


def write_replications(path, model, times, replications, seed):
    """Replication-level samples as CSV ``rep,t,count,state`` (state is 1-based).

    Time ``times[i]`` uses streams ``(seed + i, b)``, matching :func:`estimate_law`.
    """
    model = fitted(model)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "t", "count", "state"])
        for i, t in enumerate(np.atleast_1d(times)):
            t = check_time(float(t), strict=True)
            done = 0
            for b in range(math.ceil(replications / BATCH_SIZE)):
                size = min(BATCH_SIZE, replications - done)
                count, state = sample_terminal(model, t, size, make_rng(seed + i, b))
                w.writerows([done + r, repr(t), int(count[r]), int(state[r]) + 1]
                            for r in range(size))
                done += size
