"""Markov-modulated Poisson process: counts jump at rate ``lambda[X_t]``.

Count probabilities come from the truncated generator ``𝐐_n`` (levels
``0..n``), whose exponential is exact for those levels; the truncation level
is picked from a Chernoff bound on a Poisson variable with the largest rate,
which dominates the modulated count pathwise.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.integrate import quad_vec

from .base import ModulatedCountingModel, fitted
from .binomial_model import MMBinomialModel, char_function as binomial_char_function
from .exceptions import CapacityError, PreconditionError, ValidationError
from .linalg import kron, mat_exp, mat_exp_complex
from .validation import basis_vector, check_count, check_state, check_time

DEFAULT_EPSILON = 1e-12
MAX_TRUNCATION = 1000


class MMPoissonModel(ModulatedCountingModel):
    """Markov-modulated Poisson process.

    Parameters
    ----------
    generator : array_like, shape (d, d)
    rates : array_like, shape (d,)
    initial_law : array_like, shape (d,), optional
    truncation_epsilon : float, default=1e-12
        Target tail mass beyond the automatically chosen truncation level.
    convention : {"column", "row"}, default="column"
    """

    def __init__(self, generator=None, rates=None, initial_law=None,
                 truncation_epsilon=DEFAULT_EPSILON, convention="column",
                 require_irreducible=True):
        super().__init__(generator=generator, rates=rates, initial_law=initial_law,
                         convention=convention, require_irreducible=require_irreducible)
        self.truncation_epsilon = truncation_epsilon

    def fit(self, X=None, y=None):
        self._fit_chain()
        eps = float(self.truncation_epsilon)
        if not 0.0 < eps <= 1e-3:
            raise ValidationError(f"truncation_epsilon must be in (0, 1e-3], got {eps}")
        self.truncation_epsilon_ = eps
        return self

    def predict_proba(self, times):
        """Count law for each time, zero-padded to a common truncation level."""
        laws = [transient_counts(self, t) for t in np.atleast_1d(times)]
        width = max(law.n_max for law in laws) + 1
        out = np.zeros((len(laws), width))
        for row, law in zip(out, laws):
            row[:law.n_max + 1] = law.count_marginal()
        return out

    def characteristic_function(self, t, u):
        return char_function_poisson(self, t, u).sum(axis=-1)


@dataclass(frozen=True)
class TruncatedCountLaw:
    """Blocks ``P(N_t = k, X_t = e_j)`` for ``k <= n_max`` plus a tail bound."""

    n_max: int
    blocks: np.ndarray
    tail_bound: float

    def count_marginal(self):
        return self.blocks.sum(axis=1)

    @property
    def mass(self):
        return float(self.blocks.sum())


def poisson_tail_bound(mean, n):
    """Chernoff bound on ``P(Pois(mean) > n)``: ``e^{-mean} (e mean / (n+1))^{n+1}``."""
    k = n + 1
    if mean <= 0:
        return 0.0
    if k <= mean:
        return 1.0
    return math.exp(-mean + k * (1.0 + math.log(mean / k)))


def truncation_level(rate_max, t, epsilon, cap=MAX_TRUNCATION):
    """Smallest n with Chernoff tail bound below ``epsilon``."""
    mean = rate_max * t
    n = int(math.floor(mean))
    while poisson_tail_bound(mean, n) >= epsilon:
        n += 1
        if n > cap:
            raise CapacityError(
                f"truncation level exceeds {cap} for rate*t={mean:g}; "
                "raise truncation_epsilon or shorten the horizon")
    return n


def shift_matrix(size):
    """Lower shift ``J`` with ones on the first subdiagonal."""
    return np.eye(size, k=-1)


def qn_matrix(model, n):
    """Truncated generator ``I ⊗ (Q - diag(lambda)) + J ⊗ diag(lambda)`` on levels 0..n."""
    model = fitted(model)
    n = check_count(n, "n")
    lam = np.diag(model.lam_)
    return kron(np.eye(n + 1), model.q_ - lam) + kron(shift_matrix(n + 1), lam)


def transient_counts(model, t, n_max=None):
    """``Pi^n(t) = exp(𝐐_n t)(e_0 ⊗ x(0))`` with certified truncation."""
    model = fitted(model)
    t = check_time(t)
    rate_max = model.rates_.max
    if n_max is None:
        n_max = truncation_level(rate_max, t, model.truncation_epsilon_)
    else:
        n_max = check_count(n_max, "n_max")
    init = np.kron(basis_vector(0, n_max + 1), model.initial_law_)
    zeta = mat_exp(qn_matrix(model, n_max), t) @ init
    blocks = np.clip(zeta.reshape(n_max + 1, model.d_), 0.0, None)
    return TruncatedCountLaw(n_max=n_max, blocks=blocks,
                             tail_bound=poisson_tail_bound(rate_max * t, n_max))


def pi1_integral_check(model, t, epsabs=1e-10, epsrel=1e-10):
    """Deviation of the level-1 block from its variation-of-constants integral.

    ``pi^1(t) = int_0^t exp(Q_lambda (t-s)) diag(lambda) exp(Q_lambda s) x(0) ds``
    solves ``pi1' = diag(lambda) pi0 + Q_lambda pi1`` with ``pi1(0) = 0``.

    Returns
    -------
    deviation : float
    integral : ndarray, shape (d,)
    """
    model = fitted(model)
    t = check_time(t, strict=True)
    ql = model.subgenerator(1)
    lam = np.diag(model.lam_)
    x0 = model.initial_law_

    def integrand(s):
        return mat_exp(ql, t - s) @ (lam @ (mat_exp(ql, s) @ x0))

    integral, _ = quad_vec(integrand, 0.0, t, epsabs=epsabs, epsrel=epsrel)
    law = transient_counts(model, t, n_max=max(1, truncation_level(
        model.rates_.max, t, model.truncation_epsilon_)))
    return float(np.abs(integral - law.blocks[1]).max()), integral


def modulated_exponent(model, u):
    """``(e^{iu} - 1) diag(lambda) + Q``."""
    return (np.exp(1j * u) - 1.0) * np.diag(model.lam_) + model.q_


def char_function_poisson(model, t, u):
    """``E[exp(i u N_t) X_t] = exp(((e^{iu}-1) diag(lambda) + Q) t) x(0)``.

    Returns shape (d,) for scalar ``u`` and (len(u), d) for an array.
    """
    model = fitted(model)
    t = check_time(t)
    us = np.atleast_1d(np.asarray(u, dtype=float))
    out = np.array([mat_exp_complex(modulated_exponent(model, v), t) @ model.initial_law_
                    for v in us])
    return out[0] if np.ndim(u) == 0 else out


def binomial_limit_check(model, t, u, n_list):
    """Deviation of the n-obligor cf with rates ``lambda/n`` from the Poisson cf.

    Returns
    -------
    ndarray
        Max-abs deviation over chain states for each n in ``n_list``.
    """
    model = fitted(model)
    target = char_function_poisson(model, t, u)
    devs = []
    for n in n_list:
        n = check_count(n, "n", minimum=1)
        bm = MMBinomialModel(model.q_, model.lam_ / n, n_obligors=n,
                             initial_law=model.initial_law_).fit()
        devs.append(float(np.abs(binomial_char_function(bm, t, u) - target).max()))
    return np.array(devs)


def conditional_counts_poisson(model, elapsed, state, m):
    """Law of ``(N_t, X_t)`` for ``N_t = k0..k0+m`` given ``(N_s, X_s) = state``.

    Uses the truncated generator on levels ``0..k0+m`` applied to
    ``e_{k0} ⊗ e_{j0}``; levels up to the truncation are exact.

    Returns
    -------
    ndarray, shape (m+1, d)
        Row ``r`` is ``P(N_t = k0 + r, X_t = e_j | F_s)``.
    """
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    k0, j0 = check_state(state, model.d_)
    m = check_count(m, "m")
    top = k0 + m
    init = np.kron(basis_vector(k0, top + 1), basis_vector(j0, model.d_))
    zeta = mat_exp(qn_matrix(model, top), tau) @ init
    return zeta.reshape(top + 1, model.d_)[k0:]


def conditional_cf_poisson(model, elapsed, state, u):
    """Forward conditional cf ``exp(M(u) tau) e^{iu k0} e_{j0}``; returns (scalar, vector)."""
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    k0, j0 = check_state(state, model.d_)
    vec = mat_exp_complex(modulated_exponent(model, u), tau)[:, j0] * np.exp(1j * u * k0)
    return complex(vec.sum()), vec


def backward_phi(model, t, u, n):
    """``Phi(t, n) = exp(((e^{iu}-1) diag(lambda) + Q) t) e^{iun}`` (a d x d matrix)."""
    return mat_exp_complex(modulated_exponent(model, u), t) * np.exp(1j * u * n)


def backward_phi_check(model, t, u, n, h=1e-4):
    """Residual of ``Phi' = Phi(t, n+1) diag(lambda) + Phi(t, n) (Q - diag(lambda))``.

    Returns
    -------
    residual : float
        Max-abs residual with a central difference in t (one-sided at t < h).
    shift_error : float
        ``max|Phi(t, n+1) - Phi(t, n) e^{iu}|``.
    """
    model = fitted(model)
    t = check_time(t)
    n = check_count(n, "n")
    if h <= 0:
        raise PreconditionError("h must be positive")
    lam = np.diag(model.lam_)
    phi = backward_phi(model, t, u, n)
    phi_next = backward_phi(model, t, u, n + 1)
    if t >= h:
        dphi = (backward_phi(model, t + h, u, n) - backward_phi(model, t - h, u, n)) / (2 * h)
    else:
        dphi = (-3 * phi + 4 * backward_phi(model, t + h, u, n)
                - backward_phi(model, t + 2 * h, u, n)) / (2 * h)
    rhs = phi_next @ lam + phi @ (model.q_ - lam)
    return float(np.abs(dphi - rhs).max()), float(np.abs(phi_next - phi * np.exp(1j * u)).max())
