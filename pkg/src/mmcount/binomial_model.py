"""Markov-modulated default counts among ``n`` exchangeable obligors.

Each surviving obligor defaults at rate ``lambda[X_t]``, so the count ``N``
jumps at rate ``lambda[X_t] (n - N_t)``. The pair ``(N, X)`` is a Markov chain
on ``{0..n} x {1..d}`` with generator ``A ⊗ diag(lambda) + I ⊗ Q``; its
transient law is computed either from the full exponential or from n+1
exponentials of the subgenerators ``Q - k diag(lambda)``.
"""

import numpy as np

from .base import JointDistribution, ModulatedCountingModel, fitted
from .exceptions import PreconditionError
from .linalg import binom, compensated_sum, exp_joint_closed_form, kron, mat_exp
from .validation import basis_vector, check_count, check_state, check_time

# Alternating binomial sums lose about log10(max_i C(n,i) 2^i) digits; above
# this obligor count the full (n+1)d exponential is used instead.
CLOSED_FORM_MAX_N = 12


class MMBinomialModel(ModulatedCountingModel):
    """Markov-modulated binomial default-count model.

    Parameters
    ----------
    generator : array_like, shape (d, d)
    rates : array_like, shape (d,)
        Default intensity of a single obligor in each chain state.
    n_obligors : int, default=1
    initial_law : array_like, shape (d,), optional
    convention : {"column", "row"}, default="column"
    require_irreducible : bool, default=True

    Attributes
    ----------
    generator_ : GeneratorMatrix
    rates_ : RateVector
    n_ : int
    initial_law_ : ndarray, shape (d,)
    invariant_ : ndarray, shape (d,)
    joint_generator_ : ndarray, shape ((n+1) d, (n+1) d)

    Examples
    --------
    >>> m = MMBinomialModel([[-1, 2], [1, -2]], [1, 3], n_obligors=2).fit()
    >>> m.predict_proba([0.0])[0]
    array([1., 0., 0.])
    """

    def __init__(self, generator=None, rates=None, n_obligors=1, initial_law=None,
                 convention="column", require_irreducible=True):
        super().__init__(generator=generator, rates=rates, initial_law=initial_law,
                         convention=convention, require_irreducible=require_irreducible)
        self.n_obligors = n_obligors

    def fit(self, X=None, y=None):
        self._fit_chain()
        self.n_ = check_count(self.n_obligors, "n_obligors", minimum=1)
        self.joint_generator_ = big_generator(self)
        return self

    def joint_proba(self, t, method="auto"):
        return transient_marginals(self, t, method=method)

    def predict_proba(self, times, method="auto"):
        """Count law ``P(N_t = k)`` for each time; shape (len(times), n+1)."""
        return np.array([transient_marginals(self, t, method=method).count_marginal()
                         for t in np.atleast_1d(times)])

    def conditional_proba(self, elapsed, state):
        return conditional_count_probs(self, elapsed, state)

    def characteristic_function(self, t, u):
        return char_function(self, t, u).sum(axis=-1)


def count_generator(n):
    """The (n+1) x (n+1) matrix ``A``: ``A[k,k] = -(n-k)``, ``A[k+1,k] = n-k``."""
    a = np.zeros((n + 1, n + 1))
    for k in range(n + 1):
        a[k, k] = -(n - k)
        if k < n:
            a[k + 1, k] = n - k
    return a


def big_generator(model):
    """Joint generator ``A ⊗ diag(lambda) + I ⊗ Q`` (count-major ordering)."""
    n, q, lam = model.n_, model.q_, model.lam_
    return kron(count_generator(n), np.diag(lam)) + kron(np.eye(n + 1), q)


def exp_bigq_closed_form(model, t):
    """exp(𝐐 t) assembled block-wise from the subgenerator exponentials."""
    model = fitted(model)
    return exp_joint_closed_form(model.q_, model.lam_, model.n_, check_time(t))


def _sub_exps(model, t, x, ks):
    """``exp((Q - (n-k) diag(lambda)) t) @ x`` for each k in ``ks``."""
    n = model.n_
    return {k: mat_exp(model.subgenerator(n - k), t) @ x for k in ks}


def _resolve(method, n):
    if method == "auto":
        return "closed_form" if n <= CLOSED_FORM_MAX_N else "expm"
    if method not in ("closed_form", "expm", "blocks"):
        raise ValueError(f"unknown method {method!r}")
    return method


def transient_marginals(model, t, method="auto"):
    """Joint law of ``(N_t, X_t)`` started from ``e_0 ⊗ x(0)``.

    ``method`` is ``"closed_form"`` (binomial alternating sum over the
    subgenerator exponentials), ``"expm"`` (exponential of the joint
    generator), ``"blocks"`` (block closed form of that exponential) or
    ``"auto"``.
    """
    model = fitted(model)
    t = check_time(t)
    n, d, x0 = model.n_, model.d_, model.initial_law_
    method = _resolve(method, n)
    if method == "closed_form":
        e = _sub_exps(model, t, x0, range(n + 1))
        blocks = np.empty((n + 1, d))
        for i in range(n + 1):
            terms = [(-1.0) ** (i - k) * binom(i, k) * e[k] for k in range(i + 1)]
            blocks[i] = binom(n, i) * compensated_sum(terms)
        zeta = blocks.ravel()
    else:
        init = np.kron(basis_vector(0, n + 1), x0)
        if method == "expm":
            zeta = mat_exp(model.joint_generator_, t) @ init
        else:
            zeta = exp_bigq_closed_form(model, t) @ init
    return JointDistribution(n=n, d=d, zeta=zeta)


def default_prob_single(model, t):
    """``P(Y_t = 1) = 1 - 1^T exp((Q - diag(lambda)) t) x(0)`` for one obligor."""
    model = fitted(model)
    if model.n_ != 1:
        raise PreconditionError(f"single-obligor formula needs n=1, model has n={model.n_}")
    t = check_time(t)
    surv = mat_exp(model.subgenerator(1), t) @ model.initial_law_
    return float(min(1.0, max(0.0, 1.0 - surv.sum())))


def _conditional_blocks(model, tau, k0, x, method):
    """Blocks of ``exp(𝐐 tau) (e_{k0} ⊗ x)``; ``x`` may be any chain vector."""
    n, d = model.n_, model.d_
    method = _resolve(method, n)
    if method == "closed_form":
        e = _sub_exps(model, tau, x, range(k0, n + 1))
        blocks = np.zeros((n + 1, d))
        for k in range(k0, n + 1):
            terms = [(-1.0) ** (k - i) * binom(k - k0, k - i) * e[i]
                     for i in range(k0, k + 1)]
            blocks[k] = binom(n - k0, k - k0) * compensated_sum(terms)
        return blocks
    init = np.kron(basis_vector(k0, n + 1), x)
    if method == "expm":
        return (mat_exp(model.joint_generator_, tau) @ init).reshape(n + 1, d)
    return (exp_bigq_closed_form(model, tau) @ init).reshape(n + 1, d)


def conditional_joint(model, elapsed, state, method="auto"):
    """Law of ``(N_t, X_t)`` given ``(N_s, X_s) = state`` with ``t - s = elapsed``."""
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    k0, j0 = check_state(state, model.d_, max_count=model.n_)
    blocks = _conditional_blocks(model, tau, k0, basis_vector(j0, model.d_), method)
    return JointDistribution(n=model.n_, d=model.d_, zeta=blocks.ravel())


def conditional_count_probs(model, elapsed, state, method="auto"):
    """``P(N_t = k | N_s, X_s)`` over ``k = 0..n``."""
    return conditional_joint(model, elapsed, state, method=method).count_marginal()


def _cf_weights(n, u, k0=0):
    """Weights ``C(n-k0, j-k0) (1 - e^{iu})^{n-j} e^{iuj}`` for ``j = k0..n``; shape (len(u), n-k0+1)."""
    w = np.exp(1j * np.atleast_1d(np.asarray(u, dtype=float)))[:, None]
    j = np.arange(k0, n + 1)[None, :]
    c = np.array([binom(n - k0, jj - k0) for jj in range(k0, n + 1)])[None, :]
    return c * (1.0 - w) ** (n - j) * w ** j


def char_function(model, t, u, method="auto"):
    """``E[exp(i u N_t) X_t]``; complex array of shape (d,) or (len(u), d).

    The closed form is ``sum_k C(n,k) e^{iuk} (1-e^{iu})^{n-k} exp(Q_{(n-k)lambda} t) x(0)``.
    """
    model = fitted(model)
    t = check_time(t)
    scalar = np.ndim(u) == 0
    n, d = model.n_, model.d_
    if _resolve(method, n) == "closed_form":
        e = _sub_exps(model, t, model.initial_law_, range(n + 1))
        stack = np.array([e[k] for k in range(n + 1)])
        out = _cf_weights(n, u) @ stack
    else:
        blocks = transient_marginals(model, t, method=method).blocks
        k = np.arange(n + 1)
        out = np.exp(1j * np.outer(np.atleast_1d(u), k)) @ blocks
    return out[0] if scalar else out


def mgf(model, t, v):
    """``E[exp(-v N_t) X_t]`` as a binomial mixture of ``exp(Q_{k lambda} t) x(0)``.

    Mixing law is Bin(n, 1 - e^{-v}); every weight is nonnegative so there is
    no cancellation.
    """
    model = fitted(model)
    t = check_time(t)
    v = float(v)
    if v < 0:
        raise PreconditionError(f"v must be >= 0, got {v}")
    n = model.n_
    p = -np.expm1(-v)
    terms = [binom(n, k) * p ** k * (1.0 - p) ** (n - k)
             * (mat_exp(model.subgenerator(k), t) @ model.initial_law_)
             for k in range(n + 1)]
    return compensated_sum(terms)


def conditional_char_function(model, elapsed, state, u, method="auto"):
    """``E[exp(i u N_t) X_t | N_s, X_s]`` and its scalar version.

    Returns
    -------
    scalar : complex
    vector : ndarray of complex, shape (d,)
    """
    model = fitted(model)
    tau = check_time(elapsed, "elapsed")
    k0, j0 = check_state(state, model.d_, max_count=model.n_)
    vec = _conditional_cf(model, tau, k0, basis_vector(j0, model.d_), u, method)
    return complex(vec.sum()), vec


def _conditional_cf(model, tau, k0, x, u, method="auto"):
    n = model.n_
    if _resolve(method, n) == "closed_form":
        e = _sub_exps(model, tau, x, range(k0, n + 1))
        stack = np.array([e[j] for j in range(k0, n + 1)])
        return (_cf_weights(n, u, k0) @ stack)[0]
    blocks = _conditional_blocks(model, tau, k0, x, method)
    return np.exp(1j * u * np.arange(n + 1)) @ blocks


def pde_residual(model, t, u, h_t=1e-4, h_u=1e-4):
    """Max residual of ``phi_t = (Q + n(e^{iu}-1)Λ) phi + i(e^{iu}-1) Λ phi_u``.

    Both derivatives are central differences of :func:`char_function`.
    """
    model = fitted(model)
    t = check_time(t, strict=True)
    if h_t >= t:
        raise PreconditionError("time step must be smaller than t")
    n, lam, q = model.n_, np.diag(model.lam_), model.q_
    w1 = np.exp(1j * u) - 1.0
    phi = char_function(model, t, u)
    dphi_dt = (char_function(model, t + h_t, u) - char_function(model, t - h_t, u)) / (2 * h_t)
    dphi_du = (char_function(model, t, u + h_u) - char_function(model, t, u - h_u)) / (2 * h_u)
    rhs = (q + n * w1 * lam) @ phi + 1j * w1 * (lam @ dphi_du)
    return float(np.abs(dphi_dt - rhs).max())
