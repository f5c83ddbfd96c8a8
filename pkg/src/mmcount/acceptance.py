"""Acceptance criteria, runnable from the ``selftest`` command and from pytest.

Each ``criterion_N`` returns a :class:`CriterionResult` holding the measured
quantities and a pass flag. Measurements are deterministic given the seed;
wall-clock time is kept apart so that written reports are byte-stable.
"""

from dataclasses import dataclass, field
import math
import time

import numpy as np
from scipy import stats

from .binomial_model import (
    MMBinomialModel,
    char_function,
    conditional_char_function,
    conditional_joint,
    default_prob_single,
    pde_residual,
    transient_marginals,
)
from .chain import adjugate_identity, invariant_distribution, make_rng, random_generator
from .filtering import (
    FilterState,
    ObservationRecord,
    filter_terminal_batch,
    jump_update,
    predict_cf_filtered,
    predict_default_filtered,
    predict_joint_filtered,
    run_filter,
)
from .linalg import binomial_transform, block_similarity, expm_ode, mat_exp, off_block_max
from .montecarlo import SMALL_CELL, estimate_law, simulate_joint
from .poisson_model import (
    MMPoissonModel,
    backward_phi_check,
    char_function_poisson,
    transient_counts,
)
from .rapid_limits import exp_limit_check, limit_conditional_check, resolvent_limit_check

CANONICAL_Q = np.array([[-1.0, 2.0], [1.0, -2.0]])
CANONICAL_RATES = np.array([1.0, 3.0])
ALPHAS = (10.0, 1e2, 1e3, 1e4)
U_GRID = 2 * np.pi * np.arange(64) / 64
DEFAULT_SEED = 12345


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    measurements: dict = field(default_factory=dict)
    budget: float | None = None
    seconds: float = 0.0

    @property
    def within_budget(self):
        return self.budget is None or self.seconds < self.budget

    @property
    def ok(self):
        return self.passed and self.within_budget

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        budget = f" (budget {self.budget:g}s)" if self.budget else ""
        return f"criterion {self.number:2d} {status}  {self.title}  [{self.seconds:.2f}s{budget}]"


def canonical_binomial(n=3, x0=None):
    return MMBinomialModel(CANONICAL_Q, CANONICAL_RATES, n_obligors=n, initial_law=x0).fit()


def canonical_poisson(x0=None):
    return MMPoissonModel(CANONICAL_Q, CANONICAL_RATES, initial_law=x0).fit()


def _simultaneous_z(cells):
    """Two-sided normal quantile for a 99% confidence region over ``cells`` cells."""
    return float(stats.norm.ppf(1 - 0.01 / (2 * cells)))


def criterion_1(seed=DEFAULT_SEED):
    m = MMBinomialModel([[0.0]], [2.0], n_obligors=3, require_irreducible=False).fit()
    law = m.predict_proba([math.log(2) / 2])[0]
    err = float(np.abs(law - np.array([1, 3, 3, 1]) / 8).max())
    return CriterionResult(1, "constant-intensity reduction to Bin(3, 1/2)", err <= 1e-12,
                           {"max_error": err}, budget=1.0)


def criterion_2(seed=DEFAULT_SEED):
    worst = 0.0
    for n in (1, 2, 3, 5):
        m = canonical_binomial(n)
        for t in (0.1, 1.0, 5.0):
            laws = [transient_marginals(m, t, method=k).zeta
                    for k in ("closed_form", "expm", "blocks")]
            for a in range(3):
                for b in range(a + 1, 3):
                    worst = max(worst, float(np.abs(laws[a] - laws[b]).max()))
    return CriterionResult(2, "three routes to the transient law agree", worst <= 1e-9,
                           {"max_pairwise": worst}, budget=5.0)


def criterion_3(seed=DEFAULT_SEED):
    rng = make_rng(seed, 3)
    off = diag = 0.0
    for d in range(1, 5):
        q = CANONICAL_Q if d == 2 else random_generator(d, rng)
        rates = CANONICAL_RATES if d == 2 else rng.uniform(0.1, 3.0, d)
        for n in range(1, 11):
            m = MMBinomialModel(q, rates, n_obligors=n).fit()
            sim = block_similarity(binomial_transform(n, d), m.joint_generator_)
            off = max(off, off_block_max(sim, d))
            for i in range(n + 1):
                blk = sim[i * d:(i + 1) * d, i * d:(i + 1) * d]
                diag = max(diag, float(np.abs(blk - m.subgenerator(n - i)).max()))
    return CriterionResult(3, "binomial transform block-diagonalizes the joint generator",
                           off < 1e-10 and diag < 1e-10,
                           {"off_block_max": off, "diag_block_error": diag}, budget=5.0)


def _mc_compare(model, exact, seed, reps):
    crude = estimate_law(model, 1.0, reps, seed, rao_blackwell=False)
    rb = estimate_law(model, 1.0, reps, seed + 1, rao_blackwell=True)
    exact = exact[: crude.estimates.shape[0]]
    z = _simultaneous_z(exact.size)
    inside = True
    for rep in (crude, rb):
        # crude cells with few hits use the exact interval at the same level
        lo, hi = rep.confidence_interval(level=1 - 0.01 / exact.size, marginal=False)
        inside &= bool(np.all((exact >= lo) & (exact <= hi)))
    hits = crude.estimates * reps
    cells = hits >= SMALL_CELL
    smaller = bool(np.all(rb.standard_errors[cells] < crude.standard_errors[cells]))
    zs = np.abs(rb.z_scores(exact, marginal=False))
    return inside, smaller, {
        "crude_max_abs_z": float(np.max(np.abs(crude.z_scores(exact, marginal=False))[cells])),
        "rb_max_abs_z": float(zs.max()),
        "critical_z": z,
        "cells_compared": int(cells.sum()),
        "max_se_ratio": float((rb.standard_errors[cells] / crude.standard_errors[cells]).max()),
    }


def criterion_4(seed=DEFAULT_SEED, replications=10**6):
    b = canonical_binomial(3)
    p = canonical_poisson()
    ok_b, rb_b, meas_b = _mc_compare(b, transient_marginals(b, 1.0).blocks, seed, replications)
    ok_p, rb_p, meas_p = _mc_compare(p, transient_counts(p, 1.0).blocks, seed + 10,
                                     replications)
    meas = {f"binomial_{k}": v for k, v in meas_b.items()}
    meas.update({f"poisson_{k}": v for k, v in meas_p.items()})
    meas.update(binomial_inside=ok_b, poisson_inside=ok_p, binomial_rb_smaller=rb_b,
                poisson_rb_smaller=rb_p)
    return CriterionResult(4, "Monte Carlo concordance and Rao-Blackwell variance reduction",
                           ok_b and ok_p and rb_b and rb_p, meas, budget=120.0)


def _invert(cf, size):
    k = np.arange(size)
    kernel = np.exp(-1j * np.outer(k, U_GRID))
    return (kernel @ cf / len(U_GRID)).real


def criterion_5(seed=DEFAULT_SEED):
    fourier = np.exp(1j * np.outer(U_GRID, np.arange(64)))
    errs = {}
    b = canonical_binomial(3)
    blocks = transient_marginals(b, 1.0, method="expm").blocks
    cf = char_function(b, 1.0, U_GRID, method="closed_form")
    errs["binomial_sum"] = float(np.abs(fourier[:, :4] @ blocks - cf).max())
    rec = _invert(cf, 64)
    errs["binomial_inverse"] = float(max(np.abs(rec[:4] - blocks).max(), np.abs(rec[4:]).max()))

    p = canonical_poisson()
    law = transient_counts(p, 1.0)
    cf = char_function_poisson(p, 1.0, U_GRID)
    errs["poisson_sum"] = float(np.abs(fourier[:, :law.n_max + 1] @ law.blocks - cf).max())
    rec = _invert(cf, 64)
    top = law.n_max + 1
    errs["poisson_inverse"] = float(max(np.abs(rec[:top] - law.blocks).max(),
                                        np.abs(rec[top:]).max()))

    cond = conditional_joint(b, 0.7, (1, 1)).count_marginal()
    ccf = np.array([conditional_char_function(b, 0.7, (1, 1), u)[0] for u in U_GRID])
    errs["conditional_inverse"] = float(np.abs(_invert(ccf, 4) - cond).max())

    state = FilterState(0.5, 1, np.array([0.25, 0.75]))
    pred = predict_joint_filtered(b, state, 0.7).count_marginal()
    fcf = np.array([predict_cf_filtered(b, state, 0.7, u) for u in U_GRID])
    errs["filtered_inverse"] = float(np.abs(_invert(fcf, 4) - pred).max())
    worst = max(errs.values())
    return CriterionResult(5, "characteristic functions match Fourier sums and invert",
                           worst <= 1e-8, errs)


def criterion_6(seed=DEFAULT_SEED):
    b = canonical_binomial(3)
    p = canonical_poisson()
    pde = max(pde_residual(b, 1.0, u, 1e-4, 1e-4) for u in (0.3, 1.0, 2.5))
    back = max(backward_phi_check(p, 1.0, u, 2, h=1e-4)[0] for u in (0.3, 1.0, 2.5))
    return CriterionResult(6, "cf PDE and Poisson backward ODE residuals",
                           pde < 1e-5 and back < 1e-5,
                           {"pde_residual": pde, "backward_residual": back})


def criterion_7(seed=DEFAULT_SEED):
    c, qdet = adjugate_identity(CANONICAL_Q, tol=1e-9)
    canon = max(float(np.abs(c - np.array([[-2.0, -2.0], [-1.0, -1.0]])).max()),
                abs(qdet + 3.0))
    rng = make_rng(seed, 7)
    failures = 0
    for _ in range(20):
        d = int(rng.integers(1, 6))
        try:
            adjugate_identity(random_generator(d, rng), tol=1e-9)
        except ArithmeticError:
            failures += 1
    return CriterionResult(7, "adjugate equals det(Q-hat) pi 1^T",
                           canon <= 1e-9 and failures == 0,
                           {"canonical_error": canon, "random_failures": failures})


def criterion_8(seed=DEFAULT_SEED):
    res = resolvent_limit_check(CANONICAL_Q, CANONICAL_RATES, ALPHAS)
    limit_err = float(np.abs(res.limit - np.array([[-0.4, -0.4], [-0.2, -0.2]])).max())
    ex = exp_limit_check(CANONICAL_Q, CANONICAL_RATES, 1, 1.0, ALPHAS)
    tv = limit_conditional_check(canonical_binomial(3), [1e3], 1.0, (1, 0)).deviations[0]
    meas = {"resolvent_slope": res.slope, "exp_slope": ex.slope,
            "resolvent_limit_error": limit_err, "tv_alpha_1e3": float(tv),
            "resolvent_decreasing": res.decreasing, "exp_decreasing": ex.decreasing}
    passed = res.passed and ex.passed and limit_err < 1e-12 and tv < 1e-2
    return CriterionResult(8, "rapid-switching limits decay at order 1/alpha", passed, meas,
                           budget=30.0)


def tower_check(model, s, tau, records, seed):
    """Average filtered predictions over simulated records against the unconditional law.

    Returns the max |z| over joint cells and the simultaneous 99% critical value.
    """
    recs = []
    for r in range(records):
        path = simulate_joint(model, s, seed, rng=make_rng(seed, r))
        recs.append(ObservationRecord.for_model(model, path.jump_times, s))
    counts, xhat = filter_terminal_batch(model, recs)
    n, d = model.n_, model.d_
    init = np.zeros((records, (n + 1) * d))
    for r in range(records):
        init[r, counts[r] * d:(counts[r] + 1) * d] = xhat[r]
    preds = init @ mat_exp(model.joint_generator_, tau).T
    mean = preds.mean(axis=0)
    se = preds.std(axis=0, ddof=1) / math.sqrt(records)
    exact = transient_marginals(model, s + tau).zeta
    live = se > 0
    z = np.abs(mean - exact)[live] / se[live]
    return float(z.max()), _simultaneous_z(int(live.sum()))


def criterion_9(seed=DEFAULT_SEED, records=10**4):
    meas = {}
    upd = jump_update(np.array([0.5, 0.5]), CANONICAL_RATES)
    meas["jump_update_exact"] = bool(np.array_equal(upd, np.array([0.25, 0.75])))
    model = canonical_binomial(3, x0=[0.5, 0.5])
    zmax, zcrit = tower_check(model, 1.0, 1.0, records, seed)
    meas.update(tower_max_abs_z=zmax, tower_critical_z=zcrit)
    single = canonical_binomial(1, x0=[0.5, 0.5])
    ql = single.subgenerator(1)
    errs = []
    states = [FilterState(0.0, 0, np.array([0.25, 0.75])),
              run_filter(single, ObservationRecord.for_model(single, [], 2.0), grid_step=None).final]
    for state in states:
        for tau in (0.5, 1.0, 3.0):
            oracle = 1.0 - expm_ode(ql, tau, steps=4000, x=state.xhat).sum()
            errs.append(abs(predict_default_filtered(single, state, tau) - oracle))
    meas["default_vs_ode"] = float(max(errs))
    passed = meas["jump_update_exact"] and zmax <= zcrit and meas["default_vs_ode"] <= 1e-8
    return CriterionResult(9, "filter: jump update, tower property, ODE oracle", passed, meas,
                           budget=120.0)


def criterion_10(seed=DEFAULT_SEED):
    single = canonical_binomial(1)
    survival = 1.0 - default_prob_single(single, 50.0)
    pi = invariant_distribution(CANONICAL_Q)
    gap = 0.0
    for n in (1, 3):
        m = canonical_binomial(n)
        gap = max(gap, float(np.abs(transient_marginals(m, 50.0).block(n) - pi).max()))
    return CriterionResult(10, "absorption: every obligor eventually defaults",
                           survival < 1e-6 and gap < 1e-6,
                           {"survival_at_50": survival, "last_block_gap": gap})


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10)


def run_criterion(func, seed=DEFAULT_SEED, **kwargs):
    t0 = time.perf_counter()
    res = func(seed=seed, **kwargs)
    res.seconds = time.perf_counter() - t0
    return res


def run_all(seed=DEFAULT_SEED, echo=None):
    out = []
    for func in CRITERIA:
        res = run_criterion(func, seed)
        if echo:
            echo(res.line())
        out.append(res)
    return out
