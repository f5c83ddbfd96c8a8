"""Finite-state chain generators (column convention), invariant laws and paths.

``q[i, j]`` for ``i != j`` is the rate of a jump from state ``j`` to state ``i``;
every column sums to zero.

Random numbers
--------------
All simulation draws from Philox (a counter-based 64-bit generator). A stream
is identified by a root seed plus an index tuple; :func:`make_rng` derives the
child key by hashing both through :class:`numpy.random.SeedSequence`
(``spawn_key=index``), so stream ``(seed, i)`` is the same no matter which
worker or in what order it is consumed.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ColumnSumError,
    DimensionError,
    InternalError,
    NegativeRateError,
    NumericalCheckError,
    PreconditionError,
    ReducibleChainError,
    ValidationError,
)
from .linalg import mat_exp
from .validation import check_count, check_matrix, check_time, check_vector

COLUMN_SUM_TOL = 1e-12


def make_rng(seed, *index):
    """Philox generator for stream ``index`` under root ``seed``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class GeneratorMatrix:
    """A validated irreducible generator under the column convention."""

    q: np.ndarray

    @property
    def d(self):
        return self.q.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.q if dtype is None else self.q.astype(dtype)


@dataclass(frozen=True)
class RateVector:
    """Per-state intensities; ``all_positive`` is required by the stability check."""

    values: np.ndarray
    all_positive: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "all_positive", bool(np.all(self.values > 0)))

    @property
    def d(self):
        return self.values.shape[0]

    @property
    def max(self):
        return float(self.values.max())


def _strongly_connected(adj):
    d = adj.shape[0]

    def reach(a):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(a[u]):
                if v not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        return len(seen) == d

    return reach(adj) and reach(adj.T)


def validate_generator(q, tol=COLUMN_SUM_TOL, irreducible=True):
    """Check sign pattern, zero column sums and (optionally) irreducibility.

    Raises
    ------
    NegativeRateError, ColumnSumError, ReducibleChainError
    """
    if isinstance(q, GeneratorMatrix):
        return q
    q = check_matrix(q, "q")
    d = q.shape[0]
    off = q - np.diag(np.diag(q))
    neg = np.argwhere(off < 0)
    if len(neg):
        i, j = neg[0]
        raise NegativeRateError(
            f"off-diagonal entry q[{i},{j}]={q[i, j]!r} is negative")
    sums = q.sum(axis=0)
    scale = max(1.0, float(np.abs(q).max()))
    bad = np.flatnonzero(np.abs(sums) > tol * scale)
    if len(bad):
        j = int(bad[0])
        raise ColumnSumError(
            f"column {j} sums to {sums[j]!r}, expected 0 (column convention)",
            column=j)
    # edge u -> v when the chain can jump from u to v, i.e. q[v, u] > 0
    if irreducible and d > 1 and not _strongly_connected(off.T > 0):
        raise ReducibleChainError("generator is reducible (more than one communicating class)")
    return GeneratorMatrix(q=q.copy())


def validate_rates(rates, d=None):
    if isinstance(rates, RateVector):
        values = rates.values
    else:
        values = check_vector(rates, "lambda", size=d)
    if d is not None and values.shape[0] != d:
        raise DimensionError(f"lambda has length {values.shape[0]}, expected {d}")
    if np.any(values < 0):
        raise ValidationError(f"lambda must be nonnegative, got {values}")
    return RateVector(values=values.copy())


def _replaced_system(q):
    qhat = np.array(q, dtype=float, copy=True)
    qhat[-1, :] = 1.0
    return qhat


def invariant_distribution(q):
    """Invariant law: solve Q with its last row replaced by ones against e_d."""
    g = validate_generator(q)
    qhat = _replaced_system(g.q)
    rhs = np.zeros(g.d)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(qhat, rhs)
    except np.linalg.LinAlgError as exc:
        raise InternalError("replaced generator system is singular") from exc
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def adjugate(m):
    """Adjugate ``C`` with ``C @ m = det(m) I``, from determinants of minors."""
    m = check_matrix(m, "m")
    d = m.shape[0]
    if d == 1:
        return np.ones((1, 1))
    c = np.empty((d, d))
    idx = np.arange(d)
    for i in range(d):
        for j in range(d):
            minor = m[np.ix_(idx != j, idx != i)]
            c[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return c


def adjugate_identity(q, tol=1e-9):
    """Return ``(C, qdet)`` with ``C = adj(Q)`` and ``qdet = det(Q̂)``.

    For an irreducible generator the adjugate is rank one, ``C = qdet * pi 1^T``;
    that relation is asserted to ``tol`` (relative to ``max|C|``).
    """
    g = validate_generator(q)
    c = adjugate(g.q)
    qdet = float(np.linalg.det(_replaced_system(g.q))) if g.d > 1 else 1.0
    pi = invariant_distribution(g)
    expected = qdet * np.outer(pi, np.ones(g.d))
    err = np.abs(c - expected).max()
    if err > tol * max(1.0, np.abs(c).max()):
        raise NumericalCheckError(f"adjugate is not q*pi*1^T (max deviation {err:.3e})")
    return c, qdet


def subgenerator(q, rates, k):
    """``Q - k diag(lambda)``."""
    g = validate_generator(q)
    lam = validate_rates(rates, g.d)
    k = float(k)
    if k < 0:
        raise PreconditionError("k must be nonnegative")
    return g.q - k * np.diag(lam.values)


@dataclass
class StabilityReport:
    condition_number: float
    times: np.ndarray
    norms: np.ndarray
    survival: np.ndarray
    decreasing: bool
    threshold: float

    @property
    def passed(self):
        return bool(np.isfinite(self.condition_number) and self.decreasing
                    and self.norms[-1] < self.threshold)


def stability_check(q, rates, t_grid, threshold=1e-3):
    """Check invertibility of ``Q - diag(lambda)`` and decay of its exponential.

    The norm is the induced 1-norm, i.e. the largest survival probability
    ``1^T exp(Q_lambda t) e_j`` over starting states, which is nonincreasing.
    """
    g = validate_generator(q)
    lam = validate_rates(rates, g.d)
    if not lam.all_positive:
        raise PreconditionError(
            "stability requires every lambda_i > 0 (lambda has a zero entry)")
    ql = g.q - np.diag(lam.values)
    times = np.asarray(sorted(float(t) for t in t_grid))
    exps = [mat_exp(ql, t) for t in times]
    norms = np.array([np.abs(e).sum(axis=0).max() for e in exps])
    survival = np.array([e.sum(axis=0) for e in exps])
    return StabilityReport(
        condition_number=float(np.linalg.cond(ql)),
        times=times,
        norms=norms,
        survival=survival,
        decreasing=bool(np.all(np.diff(norms) < 0)),
        threshold=threshold,
    )


@dataclass(frozen=True)
class ChainPath:
    """Right-continuous path: ``states[m]`` holds on ``[times[m], times[m+1])``.

    ``times[0] == 0`` and ``states[0]`` is the initial state; transitions are
    at ``times[1:]``.
    """

    times: np.ndarray
    states: np.ndarray
    horizon: float

    @property
    def initial_state(self):
        return int(self.states[0])

    @property
    def n_transitions(self):
        return len(self.times) - 1

    def state_at(self, t):
        return int(self.states[np.searchsorted(self.times, t, side="right") - 1])

    def occupation(self, d, until=None):
        """Time spent in each state on ``[0, until]``."""
        until = self.horizon if until is None else until
        edges = np.append(np.minimum(self.times, until), until)
        out = np.zeros(d)
        np.add.at(out, self.states, np.diff(edges))
        return out


def jump_tables(q):
    """Exit rates and cumulative destination tables for each source state."""
    q = np.asarray(q, dtype=float)
    # 0.0 - x keeps an absorbing state's rate at +0.0, so holding times are +inf
    exit_rates = 0.0 - np.diag(q)
    d = q.shape[0]
    cum = np.zeros((d, d))
    for j in range(d):
        if exit_rates[j] > 0:
            probs = q[:, j].copy()
            probs[j] = 0.0
            cum[j] = np.cumsum(probs / exit_rates[j])
            cum[j, -1] = 1.0
    return exit_rates, cum


def simulate_chain(q, x0, horizon, seed, rng=None):
    """Exact CTMC path on ``[0, horizon]``: exponential holding times, then a jump."""
    g = validate_generator(q)
    x0 = check_count(x0, "x0", maximum=g.d - 1)
    horizon = check_time(horizon, "horizon", strict=True)
    rng = make_rng(seed) if rng is None else rng
    exit_rates, cum = jump_tables(g.q)
    times = [0.0]
    states = [x0]
    t, j = 0.0, x0
    if g.d > 1:
        while True:
            rate = exit_rates[j]
            if rate <= 0:
                raise InternalError(f"state {j} is absorbing")
            t += rng.exponential(1.0 / rate)
            if t >= horizon:
                break
            j = int(np.searchsorted(cum[j], rng.random(), side="right"))
            times.append(t)
            states.append(j)
    return ChainPath(times=np.array(times), states=np.array(states, dtype=int),
                     horizon=horizon)


def simulate_chains(q, x0, horizon, rng, size, rates=None, time_scale=1.0):
    """Vectorized exact simulation of ``size`` independent chain paths.

    Returns the terminal states and, when ``rates`` is given, the integrated
    hazard ``integral_0^horizon rates[X_s] ds``. ``x0`` is a state index or a
    probability vector. With ``time_scale=a`` the chain runs under ``Q`` on
    ``[0, a*horizon]`` and the hazard integral is divided by ``a`` (the
    time-compressed construction of a chain with generator ``a*Q``).
    """
    q = np.asarray(q, dtype=float)
    d = q.shape[0]
    exit_rates, cum = jump_tables(q)
    if np.ndim(x0) == 0:
        state = np.full(size, int(x0))
    else:
        state = np.searchsorted(np.cumsum(x0)[:-1], rng.random(size), side="right")
    end = horizon * time_scale
    t = np.zeros(size)
    hazard = np.zeros(size)
    lam = None if rates is None else np.asarray(rates, dtype=float)
    active = np.arange(size)
    while active.size:
        r = exit_rates[state[active]]
        with np.errstate(divide="ignore"):
            hold = rng.exponential(1.0, active.size) / r
        t_next = t[active] + hold
        stop = t_next >= end
        dt = np.where(stop, end - t[active], hold)
        if lam is not None:
            hazard[active] += lam[state[active]] * dt
        t[active] = np.minimum(t_next, end)
        moving = active[~stop]
        u = rng.random(moving.size)
        c = cum[state[moving]]
        state[moving] = (u[:, None] >= c).sum(axis=1)
        active = moving
    if lam is None:
        return state, None
    return state, hazard / time_scale


def random_generator(d, rng, scale=1.0):
    """Irreducible generator with Exp(scale) off-diagonal rates (all positive)."""
    d = check_count(d, "d", minimum=1)
    q = rng.exponential(scale, size=(d, d))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=0))
    return q
