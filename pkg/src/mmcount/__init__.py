"""Exact laws, filters and rapid-switching limits for Markov-modulated counting processes.

Two models share a finite-state background chain ``X`` with generator ``Q``
(column convention) and state intensities ``lambda``:

* :class:`MMBinomialModel`: ``n`` obligors, each defaulting at rate ``lambda[X_t]``;
* :class:`MMPoissonModel`: a counting process with intensity ``lambda[X_t]``.
"""

__version__ = "0.1.0"

from .binomial_model import MMBinomialModel
from .chain import invariant_distribution, make_rng, validate_generator
from .exceptions import NumericalCheckError, ValidationError
from .filtering import HiddenChainFilter, run_filter
from .poisson_model import MMPoissonModel

__all__ = [
    "HiddenChainFilter",
    "MMBinomialModel",
    "MMPoissonModel",
    "NumericalCheckError",
    "ValidationError",
    "invariant_distribution",
    "make_rng",
    "run_filter",
    "validate_generator",
]
