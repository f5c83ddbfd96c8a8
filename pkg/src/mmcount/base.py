"""Estimator base class shared by the binomial and Poisson models.

Models follow the scikit-learn contract: ``__init__`` only stores
hyperparameters, :meth:`fit` validates them and sets the trailing-underscore
attributes, and ``get_params``/``set_params``/``clone`` come from
:class:`sklearn.base.BaseEstimator`. ``fit`` takes no data: a model is fully
specified by its parameters, and fitting is validation plus precomputation.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .chain import invariant_distribution, validate_generator, validate_rates
from .exceptions import InternalError, ValidationError
from .validation import check_simplex


class ModulatedCountingModel(BaseEstimator):
    """Common parameters of a Markov-modulated counting process.

    Parameters
    ----------
    generator : array_like, shape (d, d)
        Chain generator.
    rates : array_like, shape (d,)
        Per-state intensity ``lambda``.
    initial_law : array_like, shape (d,), optional
        Law of the chain at time zero. Defaults to the first basis vector.
    convention : {"column", "row"}
        ``"row"`` means rows of ``generator`` sum to zero; it is transposed
        on fit.
    require_irreducible : bool, default=True
        Reject reducible generators. Switch off only for degenerate
        experiments such as a frozen chain (``Q = 0``); ``invariant_`` is then
        ``None`` whenever the invariant law is not unique.
    """

    def __init__(self, generator=None, rates=None, initial_law=None, convention="column",
                 require_irreducible=True):
        self.generator = generator
        self.rates = rates
        self.initial_law = initial_law
        self.convention = convention
        self.require_irreducible = require_irreducible

    def _fit_chain(self):
        if self.generator is None or self.rates is None:
            raise ValidationError("generator and rates are required")
        if self.convention not in ("column", "row"):
            raise ValidationError(f"convention must be 'column' or 'row', got {self.convention!r}")
        q = np.asarray(self.generator, dtype=float)
        if self.convention == "row":
            q = q.T
        self.generator_ = validate_generator(q, irreducible=self.require_irreducible)
        d = self.generator_.d
        self.rates_ = validate_rates(self.rates, d)
        if self.initial_law is None:
            x0 = np.zeros(d)
            x0[0] = 1.0
        else:
            x0 = check_simplex(self.initial_law, "initial_law", size=d)
        self.initial_law_ = x0
        try:
            self.invariant_ = invariant_distribution(self.generator_)
        except InternalError:
            self.invariant_ = None
        return self

    @property
    def q_(self):
        return self.generator_.q

    @property
    def lam_(self):
        return self.rates_.values

    @property
    def d_(self):
        return self.generator_.d

    def subgenerator(self, k):
        """``Q - k diag(lambda)`` for the fitted model."""
        check_is_fitted(self, "generator_")
        return self.q_ - k * np.diag(self.lam_)

    def accelerated(self, alpha):
        """Fitted copy with the chain generator scaled by ``alpha``."""
        check_is_fitted(self, "generator_")
        model = clone(self)
        model.set_params(generator=alpha * self.q_, convention="column")
        return model.fit()


def fitted(model):
    check_is_fitted(model, "generator_")
    return model


@dataclass(frozen=True)
class JointDistribution:
    """Law over the (count, chain state) lattice, count-major: index ``k*d + j``."""

    n: int
    d: int
    zeta: np.ndarray

    @property
    def blocks(self):
        """Array of shape (n+1, d); row ``k`` is ``P(N=k, X=e_j)`` over ``j``."""
        return self.zeta.reshape(self.n + 1, self.d)

    def count_marginal(self):
        return self.blocks.sum(axis=1)

    def chain_marginal(self):
        return self.blocks.sum(axis=0)

    def block(self, k):
        return self.blocks[k]
