"""Exponential-family building blocks.

Each family exposes the cumulant function ``b``, its first two derivatives
(the canonical inverse link ``b'`` and the unscaled variance function
``b''``), and the per-observation log-likelihood kernel ``y*eta - b(eta)``.
The normalizing term of the density is never needed: every statistic in
this package is a difference of kernels, so it cancels.

Dispersion is handled by policy: binomial and poisson responses have
dispersion fixed at 1, gaussian and gamma responses get a method-of-moments
estimate from the fitted model (see :func:`gsim.fitting.estimate_dispersion`).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .exceptions import DataError, DomainError, UsageError

DISPERSION_FIXED_ONE = "fixed_one"
DISPERSION_ESTIMATED = "estimated"


class Family:
    """Base class for exponential-family response distributions.

    All operations are pure functions of their inputs and accept scalars
    or numpy arrays. ``b`` is strictly convex on the family's
    natural-parameter domain, so ``variance_unscaled`` is positive and
    ``mean`` is strictly increasing.
    """

    kind: str
    dispersion_policy: str

    def check_eta(self, eta) -> None:
        """Raise :class:`DomainError` if ``eta`` leaves the natural domain."""

    def cumulant(self, eta):
        """b(eta)."""
        raise NotImplementedError

    def mean(self, eta):
        """b'(eta), the canonical inverse link."""
        raise NotImplementedError

    def variance_unscaled(self, eta):
        """b''(eta), the variance function without the dispersion factor."""
        raise NotImplementedError

    def loglik_kernel(self, y, eta):
        """Per-observation kernel ``y*eta - b(eta)``."""
        self.validate_y(y)
        self.check_eta(eta)
        return np.asarray(y) * np.asarray(eta) - self.cumulant(eta)

    def kernel_saturated(self, y):
        """Per-observation supremum of the kernel over eta (deviance baseline)."""
        raise NotImplementedError

    def validate_y(self, y) -> None:
        """Raise :class:`DataError` if ``y`` is invalid for this family."""

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))


class GaussianFamily(Family):
    kind = "gaussian"
    dispersion_policy = DISPERSION_ESTIMATED

    def cumulant(self, eta):
        eta = np.asarray(eta, dtype=float)
        return 0.5 * eta * eta

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def variance_unscaled(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def kernel_saturated(self, y):
        y = np.asarray(y, dtype=float)
        return 0.5 * y * y

    def validate_y(self, y):
        y = np.asarray(y)
        if not np.all(np.isfinite(y)):
            raise DataError("gaussian responses must be finite")


class BinomialFamily(Family):
    kind = "binomial"
    dispersion_policy = DISPERSION_FIXED_ONE

    def cumulant(self, eta):
        # log(1 + exp(eta)) in overflow-safe form; exact for |eta| up to ~700.
        eta = np.asarray(eta, dtype=float)
        return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))

    def mean(self, eta):
        return expit(np.asarray(eta, dtype=float))

    def variance_unscaled(self, eta):
        eta = np.asarray(eta, dtype=float)
        return expit(eta) * expit(-eta)

    def kernel_saturated(self, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def validate_y(self, y):
        y = np.asarray(y)
        if not np.all((y == 0) | (y == 1)):
            raise DataError("binomial responses must be 0 or 1")


class PoissonFamily(Family):
    kind = "poisson"
    dispersion_policy = DISPERSION_FIXED_ONE

    def cumulant(self, eta):
        with np.errstate(over="ignore"):
            return np.exp(np.asarray(eta, dtype=float))

    def mean(self, eta):
        return self.cumulant(eta)

    def variance_unscaled(self, eta):
        return self.cumulant(eta)

    def kernel_saturated(self, y):
        y = np.asarray(y, dtype=float)
        out = -y.copy()
        pos = y > 0
        out[pos] += y[pos] * np.log(y[pos])
        return out

    def validate_y(self, y):
        y = np.asarray(y)
        if np.any(y < 0) or not np.allclose(y, np.round(y)):
            raise DataError("poisson responses must be non-negative integers")


class GammaFamily(Family):
    kind = "gamma"
    dispersion_policy = DISPERSION_ESTIMATED

    def check_eta(self, eta):
        if np.any(np.asarray(eta) >= 0):
            raise DomainError("gamma natural parameter must be negative")

    def cumulant(self, eta):
        self.check_eta(eta)
        return -np.log(-np.asarray(eta, dtype=float))

    def mean(self, eta):
        self.check_eta(eta)
        return -1.0 / np.asarray(eta, dtype=float)

    def variance_unscaled(self, eta):
        self.check_eta(eta)
        eta = np.asarray(eta, dtype=float)
        return 1.0 / (eta * eta)

    def kernel_saturated(self, y):
        y = np.asarray(y, dtype=float)
        return -1.0 - np.log(y)

    def validate_y(self, y):
        y = np.asarray(y)
        if np.any(y <= 0):
            raise DataError("gamma responses must be strictly positive")


GAUSSIAN = GaussianFamily()
BINOMIAL = BinomialFamily()
POISSON = PoissonFamily()
GAMMA = GammaFamily()

_FAMILIES = {f.kind: f for f in (GAUSSIAN, BINOMIAL, POISSON, GAMMA)}


def get_family(name: str) -> Family:
    """Resolve a family by name ("gaussian", "binomial", "poisson", "gamma")."""
    try:
        return _FAMILIES[name]
    except KeyError:
        raise UsageError(f"unknown family {name!r}; expected one of {sorted(_FAMILIES)}")
