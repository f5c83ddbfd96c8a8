"""Filter for the hidden chain given only the jump times of the counting process.

Between jumps the posterior ``xhat`` follows

    dxhat/dt = Q xhat - f(N) (diag(lambda) xhat - xhat (lambda . xhat)),

with ``f(N) = n - N`` for the binomial model and ``f = 1`` for the Poisson
model. At a jump it is reweighted by ``lambda`` and renormalized.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .base import JointDistribution, fitted
from .binomial_model import MMBinomialModel, _conditional_blocks, _conditional_cf
from .exceptions import (
    DegenerateObservationError,
    PreconditionError,
    StepSizeError,
    ValidationError,
)
from .linalg import mat_exp, mat_exp_complex
from .poisson_model import (
    TruncatedCountLaw,
    modulated_exponent,
    poisson_tail_bound,
    qn_matrix,
    truncation_level,
)
from .validation import SIMPLEX_TOL, basis_vector, check_simplex, check_time

NEGATIVITY_TOL = 1e-12
MAX_HALVINGS = 30


@dataclass(frozen=True)
class FilterState:
    """Posterior of the chain at ``time`` given ``count`` observed jumps."""

    time: float
    count: int
    xhat: np.ndarray

    def intensity(self, model):
        """Filtered intensity ``lambda . xhat * f(count)``."""
        return float(model.lam_ @ self.xhat) * _activity(model, self.count)


@dataclass(frozen=True)
class ObservationRecord:
    """Strictly increasing jump times observed on ``[0, horizon]``."""

    jump_times: np.ndarray
    horizon: float
    max_count: int | None = None

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float).reshape(-1)
        object.__setattr__(self, "jump_times", times)
        if times.size:
            if not np.all(np.isfinite(times)) or times[0] <= 0:
                raise ValidationError("jump times must be finite and positive")
            if np.any(np.diff(times) <= 0):
                raise ValidationError("jump times must be strictly increasing")
            if times[-1] > self.horizon:
                raise ValidationError(
                    f"jump at {times[-1]} lies beyond horizon {self.horizon}")
        if self.max_count is not None and times.size > self.max_count:
            raise ValidationError(
                f"{times.size} jumps observed but at most {self.max_count} are possible")

    @classmethod
    def for_model(cls, model, jump_times, horizon):
        n = model.n_ if isinstance(model, MMBinomialModel) else None
        return cls(jump_times=jump_times, horizon=float(horizon), max_count=n)


def _activity(model, count):
    if isinstance(model, MMBinomialModel):
        return model.n_ - count
    return 1


def jump_update(xhat, rates):
    """Bayes reweighting ``diag(lambda) xhat / (lambda . xhat)`` at an observed jump."""
    xhat = np.asarray(xhat, dtype=float)
    lam = np.asarray(getattr(rates, "values", rates), dtype=float)
    weighted = lam * xhat
    total = weighted.sum()
    if not total > 0:
        raise DegenerateObservationError(
            "jump observed while the filtered intensity lambda . xhat is zero")
    return weighted / total


def _drift(q, lam, f, x):
    return q @ x - f * (lam * x - x * (lam @ x))


def _rk4_step(q, lam, f, x, h):
    k1 = _drift(q, lam, f, x)
    k2 = _drift(q, lam, f, x + 0.5 * h * k1)
    k3 = _drift(q, lam, f, x + 0.5 * h * k2)
    k4 = _drift(q, lam, f, x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def default_step(gap):
    return min(0.01, gap / 100.0)


def flow_between_jumps(state, model, dt, step=None, drift_log=None):
    """Propagate the posterior over ``dt`` time units with no observed jump.

    Classical fourth-order Runge-Kutta with renormalization after every step;
    a step that leaves a component below ``-1e-12`` is retried at half size.
    When no further jumps are possible (``f(N) = 0``) the exact linear
    propagator ``exp(Q dt)`` is used.
    """
    model = fitted(model)
    dt = check_time(dt, "dt")
    if dt == 0:
        return state
    f = _activity(model, state.count)
    q, lam = model.q_, model.lam_
    if f == 0:
        x = mat_exp(q, dt) @ state.xhat
        x = np.clip(x, 0.0, None)
        return FilterState(state.time + dt, state.count, x / x.sum())
    h = default_step(dt) if step is None else min(step, dt)
    x = state.xhat
    elapsed = 0.0
    # a remainder at rounding level would only inflate the drift log
    while dt - elapsed > 1e-12 * dt:
        hh = min(h, dt - elapsed)
        for _ in range(MAX_HALVINGS):
            y = _rk4_step(q, lam, f, x, hh)
            if y.min() >= -NEGATIVITY_TOL:
                break
            hh /= 2.0
        else:
            raise StepSizeError(
                f"posterior turned negative even with step {hh:.3e} at t={state.time + elapsed}")
        total = y.sum()
        if drift_log is not None:
            drift_log.append(abs(total - 1.0) / hh)
        x = np.clip(y, 0.0, None) / total
        elapsed += hh
    return FilterState(state.time + dt, state.count, x)


@dataclass
class FilterTrajectory:
    """Posterior sampled on a grid (plus every jump time, post-jump)."""

    times: np.ndarray
    counts: np.ndarray
    xhat: np.ndarray
    final: FilterState
    max_drift_rate: float = 0.0
    jump_states: list = field(default_factory=list)

    def rows(self):
        for t, c, x in zip(self.times, self.counts, self.xhat):
            yield t, int(c), x


def run_filter(model, observations, grid_step=0.1, step=None, initial=None):
    """Run the filter over an observation record.

    Parameters
    ----------
    model : fitted MMBinomialModel or MMPoissonModel
    observations : ObservationRecord or array of jump times
        A bare array uses its last jump as the horizon.
    grid_step : float
        Spacing of the emitted trajectory.
    step : float, optional
        Integrator step; defaults to ``min(0.01, gap/100)`` per gap.
    initial : FilterState, optional
        Defaults to ``FilterState(0, 0, model.initial_law_)``.
    """
    model = fitted(model)
    if not isinstance(observations, ObservationRecord):
        times = np.asarray(observations, dtype=float).reshape(-1)
        horizon = float(times[-1]) if times.size else 0.0
        observations = ObservationRecord.for_model(model, times, horizon)
    if isinstance(model, MMBinomialModel) and observations.jump_times.size > model.n_:
        raise ValidationError(
            f"{observations.jump_times.size} jumps observed but the model has n={model.n_}")
    state = initial or FilterState(0.0, 0, model.initial_law_.copy())
    horizon = observations.horizon
    grid = np.arange(0.0, horizon, grid_step) if grid_step else np.array([0.0])
    grid = np.append(grid, horizon)
    events = sorted([(float(t), 1) for t in observations.jump_times]
                    + [(float(t), 0) for t in grid if t >= state.time])
    # integrator step follows the gap between consecutive jumps, not the grid
    bounds = np.concatenate([[state.time], observations.jump_times, [horizon]])
    times, counts, xs, drift, jumps = [], [], [], [], []
    for t, is_jump in events:
        if step is None:
            seg = min(np.searchsorted(bounds, t, side="left"), len(bounds) - 1)
            gap = bounds[seg] - bounds[max(seg - 1, 0)]
            h = default_step(gap) if gap > 0 else None
        else:
            h = step
        state = flow_between_jumps(state, model, t - state.time, step=h, drift_log=drift)
        if is_jump:
            state = FilterState(t, state.count + 1, jump_update(state.xhat, model.lam_))
            jumps.append(state)
        times.append(t)
        counts.append(state.count)
        xs.append(state.xhat)
    return FilterTrajectory(times=np.array(times), counts=np.array(counts),
                            xhat=np.array(xs), final=state,
                            max_drift_rate=max(drift, default=0.0), jump_states=jumps)


def filter_terminal_batch(model, records):
    """Terminal posteriors for many records at once.

    Same scheme as :func:`run_filter` with no output grid: each record steps
    with ``min(0.01, gap/100)`` inside the gap between its own jumps, a
    rejected step is retried at half size, and after the last possible jump
    the exact propagator takes over. All records advance together, one RK4
    step per iteration.

    Returns
    -------
    counts : ndarray of int, shape (R,)
    xhat : ndarray, shape (R, d)
    """
    model = fitted(model)
    records = list(records)
    size, d = len(records), model.d_
    q, lam = model.q_, model.lam_
    binomial = isinstance(model, MMBinomialModel)
    if binomial and any(r.jump_times.size > model.n_ for r in records):
        raise ValidationError(f"a record has more than n={model.n_} jumps")
    # segment s of record r runs from bounds[r][s] to bounds[r][s+1]
    bounds = [np.concatenate([[0.0], r.jump_times, [r.horizon]]) for r in records]
    n_seg = np.array([len(b) - 1 for b in bounds])
    seg = np.zeros(size, dtype=int)
    x = np.tile(model.initial_law_, (size, 1))
    count = np.zeros(size, dtype=int)
    seg_len = np.array([b[1] - b[0] for b in bounds])
    elapsed = np.zeros(size)
    h = np.minimum(0.01, seg_len / 100.0)
    trial = h.copy()
    halvings = np.zeros(size, dtype=int)
    live = np.ones(size, dtype=bool)

    def close_segments(rows):
        # jump at the end of every segment except the last
        for r in rows:
            if seg[r] < n_seg[r] - 1:
                x[r] = jump_update(x[r], lam)
                count[r] += 1
                seg[r] += 1
                b = bounds[r]
                seg_len[r] = b[seg[r] + 1] - b[seg[r]]
                elapsed[r] = 0.0
                h[r] = trial[r] = min(0.01, seg_len[r] / 100.0)
            else:
                live[r] = False

    close_segments(np.flatnonzero(seg_len <= 0))
    while live.any():
        f = model.n_ - count if binomial else np.ones(size, dtype=int)
        frozen = live & (f == 0)
        for r in np.flatnonzero(frozen):
            # no jump can follow: exact linear flow to the horizon
            y = mat_exp(q, bounds[r][-1] - bounds[r][seg[r]] - elapsed[r]) @ x[r]
            y = np.clip(y, 0.0, None)
            x[r] = y / y.sum()
            live[r] = False
        rows = np.flatnonzero(live)
        if rows.size == 0:
            break
        xr, fr = x[rows], f[rows][:, None]
        hh = np.minimum(trial[rows], seg_len[rows] - elapsed[rows])[:, None]

        def drift(v):
            return v @ q.T - fr * (v * lam - v * (v @ lam)[:, None])

        k1 = drift(xr)
        k2 = drift(xr + 0.5 * hh * k1)
        k3 = drift(xr + 0.5 * hh * k2)
        k4 = drift(xr + hh * k3)
        y = xr + (hh / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        ok = y.min(axis=1) >= -NEGATIVITY_TOL
        acc, rej = rows[ok], rows[~ok]
        x[acc] = np.clip(y[ok], 0.0, None) / y[ok].sum(axis=1)[:, None]
        elapsed[acc] += hh[ok, 0]
        trial[acc] = h[acc]
        halvings[acc] = 0
        trial[rej] /= 2.0
        halvings[rej] += 1
        if np.any(halvings > MAX_HALVINGS):
            raise StepSizeError("posterior turned negative even after repeated step halving")
        close_segments(acc[seg_len[acc] - elapsed[acc] <= 1e-12 * seg_len[acc]])
    return count, x


def _check_state(model, state):
    x = check_simplex(state.xhat, "xhat", size=model.d_, tol=SIMPLEX_TOL)
    return replace(state, xhat=x)


def predict_joint_filtered(model, state, elapsed, method="auto"):
    """Law of ``(N_t, X_t)`` given the counting history up to ``state.time``.

    Binomial model: ``exp(𝐐 tau) (e_count ⊗ xhat)`` as a JointDistribution.
    Poisson model: the truncated system on levels up to ``count + m`` as a
    TruncatedCountLaw, ``m`` chosen from the tail bound.
    """
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    state = _check_state(model, state)
    if isinstance(model, MMBinomialModel):
        blocks = _conditional_blocks(model, tau, state.count, state.xhat, method)
        return JointDistribution(n=model.n_, d=model.d_, zeta=blocks.ravel())
    rate_max = model.rates_.max
    m = truncation_level(rate_max, tau, model.truncation_epsilon_)
    top = state.count + m
    init = np.kron(basis_vector(state.count, top + 1), state.xhat)
    zeta = mat_exp(qn_matrix(model, top), tau) @ init
    return TruncatedCountLaw(n_max=top, blocks=np.clip(zeta.reshape(top + 1, model.d_), 0, None),
                             tail_bound=poisson_tail_bound(rate_max * tau, m))


def predict_cf_filtered(model, state, elapsed, u):
    """``E[exp(i u N_t) | counting history to state.time]``."""
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    state = _check_state(model, state)
    if isinstance(model, MMBinomialModel):
        return complex(_conditional_cf(model, tau, state.count, state.xhat, u).sum())
    vec = mat_exp_complex(modulated_exponent(model, u), tau) @ state.xhat
    return complex(vec.sum() * np.exp(1j * u * state.count))


def predict_default_filtered(model, state, elapsed):
    """``1 - 1^T exp(Q_lambda tau) xhat (1 - Y_s)`` for a single obligor."""
    model = fitted(model)
    if not isinstance(model, MMBinomialModel) or model.n_ != 1:
        raise PreconditionError("filtered default probability needs a binomial model with n=1")
    tau = check_time(elapsed, "elapsed")
    state = _check_state(model, state)
    if state.count >= 1:
        return 1.0
    surv = mat_exp(model.subgenerator(1), tau) @ state.xhat
    return float(min(1.0, max(0.0, 1.0 - surv.sum())))


class HiddenChainFilter(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`run_filter`.

    ``fit`` consumes one observation record; ``transform`` maps a list of
    records to their terminal posteriors, one row each.

    Parameters
    ----------
    model : MMBinomialModel or MMPoissonModel
        Fitted on demand if needed.
    grid_step : float, default=0.1
    step : float, optional
    """

    def __init__(self, model=None, grid_step=0.1, step=None):
        self.model = model
        self.grid_step = grid_step
        self.step = step

    def _model(self):
        if self.model is None:
            raise ValidationError("a model is required")
        try:
            return fitted(self.model)
        except Exception:
            return self.model.fit()

    def fit(self, X, y=None, horizon=None):
        model = self._model()
        times = np.asarray(X, dtype=float).reshape(-1)
        if horizon is None:
            horizon = float(times[-1]) if times.size else 0.0
        record = ObservationRecord.for_model(model, times, horizon)
        self.model_ = model
        self.trajectory_ = run_filter(model, record, grid_step=self.grid_step, step=self.step)
        self.state_ = self.trajectory_.final
        return self

    def transform(self, X):
        model = self._model()
        records = []
        for item in X:
            if isinstance(item, ObservationRecord):
                records.append(item)
            else:
                times = np.asarray(item, dtype=float).reshape(-1)
                records.append(ObservationRecord.for_model(
                    model, times, float(times[-1]) if times.size else 0.0))
        if self.step is None:
            return filter_terminal_batch(model, records)[1]
        return np.array([run_filter(model, rec, grid_step=None, step=self.step).final.xhat
                         for rec in records])

    def predict_proba(self, elapsed):
        """Predicted count law ``elapsed`` time units after the fitted horizon."""
        check_is_fitted(self, "state_")
        law = predict_joint_filtered(self.model_, self.state_, elapsed)
        return law.count_marginal()

    def predict_cf(self, elapsed, u):
        check_is_fitted(self, "state_")
        return predict_cf_filtered(self.model_, self.state_, elapsed, u)


def read_observations(path):
    """Jump times from a CSV with header ``jump_time``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "jump_time" not in reader.fieldnames:
            raise ValidationError(f"{path}: expected a 'jump_time' header column")
        return np.array([float(row["jump_time"]) for row in reader])


def write_trajectory(path, trajectory, fmt=repr):
    d = trajectory.xhat.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "count"] + [f"xhat_{j + 1}" for j in range(d)])
        for t, c, x in trajectory.rows():
            w.writerow([fmt(float(t)), c] + [fmt(float(v)) for v in x])
