"""Spline bases and the curvature penalty.

Two cubic bases are provided behind one interface: the truncated-power
basis ``1, z, z^2, z^3, (z - k_j)_+^3`` and a clamped cubic B-spline basis
on the same knots. Both span every cubic polynomial on the boundary
interval and have dimension ``n_interior_knots + 4``.

The penalty matrix ``D`` satisfies ``delta' D delta = integral of g''(z)^2``
over the boundary interval for ``g = delta' B``. Between consecutive knots
the integrand is a polynomial of degree two, so two-point Gauss-Legendre
quadrature per piece is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import DataError

TRUNCATED_CUBIC = "truncated_cubic"
CUBIC_REGRESSION = "cubic_regression"

_BASIS_KINDS = (TRUNCATED_CUBIC, CUBIC_REGRESSION)

# Relative paddings used by place_knots.
_BOUNDARY_PAD = 1e-6
_TIE_NUDGE = 1e-8


@dataclass(frozen=True, eq=False)
class KnotSequence:
    """Strictly increasing interior knots enclosed by a boundary interval."""

    interior: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        interior = np.atleast_1d(np.asarray(self.interior, dtype=float))
        object.__setattr__(self, "interior", interior)
        if interior.size and np.any(np.diff(interior) <= 0):
            raise ValueError("interior knots must be strictly increasing")
        if not self.lo < self.hi:
            raise ValueError("boundary must satisfy lo < hi")
        if interior.size and (interior[0] <= self.lo or interior[-1] >= self.hi):
            raise ValueError("boundary must strictly enclose all interior knots")

    @property
    def breaks(self) -> np.ndarray:
        """All breakpoints: lo, interior knots, hi."""
        return np.concatenate(([self.lo], self.interior, [self.hi]))


def place_knots(index_values, n_knots: int) -> KnotSequence:
    """Place interior knots at equally spaced quantiles of the index values.

    Knot ``j`` sits at the ``j/(n_knots+1)`` empirical quantile. The
    boundary is the data range padded outward by ``1e-6`` of the range;
    tied knots are nudged apart by ``1e-8`` of the range.
    """
    values = np.asarray(index_values, dtype=float).ravel()
    if n_knots < 1:
        raise ValueError("n_knots must be >= 1")
    if np.unique(values).size < n_knots + 2:
        raise DataError(
            f"need at least {n_knots + 2} distinct index values for {n_knots} knots"
        )
    lo, hi = values.min(), values.max()
    rng = hi - lo
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    interior = np.quantile(values, probs)
    for j in range(1, n_knots):
        if interior[j] <= interior[j - 1]:
            interior[j] = interior[j - 1] + _TIE_NUDGE * rng
    pad = _BOUNDARY_PAD * rng
    return KnotSequence(interior=interior, lo=lo - pad, hi=hi + pad)


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """A cubic spline basis over a knot sequence.

    ``dim`` equals ``len(interior) + 4`` for either kind. Evaluation
    outside the boundary extrapolates the polynomial pieces.
    """

    kind: str
    knots: KnotSequence
    _bsp: BSpline | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _BASIS_KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == CUBIC_REGRESSION:
            t = np.concatenate(
                (
                    np.repeat(self.knots.lo, 4),
                    self.knots.interior,
                    np.repeat(self.knots.hi, 4),
                )
            )
            object.__setattr__(self, "_bsp", BSpline(t, np.eye(self.dim), 3))

    @property
    def dim(self) -> int:
        return self.knots.interior.size + 4

    def design(self, z, deriv: int = 0) -> np.ndarray:
        """Evaluate all basis functions (or a derivative) at ``z``.

        Returns an ``(n, dim)`` matrix for vector input, ``(dim,)`` for a
        scalar. ``deriv`` must be 0, 1 or 2.
        """
        if deriv not in (0, 1, 2):
            raise ValueError("deriv must be 0, 1 or 2")
        scalar = np.isscalar(z) or np.ndim(z) == 0
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if self.kind == TRUNCATED_CUBIC:
            out = self._design_truncated(z, deriv)
        else:
            out = self._bsp(z, nu=deriv)
        return out[0] if scalar else out

    def _design_truncated(self, z: np.ndarray, deriv: int) -> np.ndarray:
        n = z.size
        cols = np.empty((n, self.dim))
        if deriv == 0:
            cols[:, 0] = 1.0
            cols[:, 1] = z
            cols[:, 2] = z * z
            cols[:, 3] = z * z * z
            t = np.maximum(z[:, None] - self.knots.interior[None, :], 0.0)
            cols[:, 4:] = t * t * t
        elif deriv == 1:
            cols[:, 0] = 0.0
            cols[:, 1] = 1.0
            cols[:, 2] = 2.0 * z
            cols[:, 3] = 3.0 * z * z
            t = np.maximum(z[:, None] - self.knots.interior[None, :], 0.0)
            cols[:, 4:] = 3.0 * t * t
        else:
            cols[:, 0] = 0.0
            cols[:, 1] = 0.0
            cols[:, 2] = 2.0
            cols[:, 3] = 6.0 * z
            t = np.maximum(z[:, None] - self.knots.interior[None, :], 0.0)
            cols[:, 4:] = 6.0 * t
        return cols

    def penalty(self) -> np.ndarray:
        """Curvature penalty matrix D with D_jk = int B_j'' B_k'' over [lo, hi]."""
        breaks = self.knots.breaks
        half = 0.5 * np.diff(breaks)
        mid = 0.5 * (breaks[:-1] + breaks[1:])
        offset = half / np.sqrt(3.0)
        nodes = np.concatenate((mid - offset, mid + offset))
        weights = np.concatenate((half, half))
        d2 = self.design(nodes, deriv=2)
        D = d2.T @ (weights[:, None] * d2)
        return 0.5 * (D + D.T)


def eval_basis(basis: SplineBasis, z, deriv: int = 0) -> np.ndarray:
    """Functional alias for :meth:`SplineBasis.design`."""
    return basis.design(z, deriv)


def penalty_matrix(basis: SplineBasis) -> np.ndarray:
    """Functional alias for :meth:`SplineBasis.penalty`."""
    return basis.penalty()
