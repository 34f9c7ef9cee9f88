"""B-spline bases on uniform clamped knots, tensor products and difference matrices.

Surfaces are vectorized column-major throughout the package: the value at
grid position ``(r, c)`` of an ``n1 x n2`` surface sits at index ``r + n1 * c``.
Tensor-product coefficients follow the same rule, so the design matrix of a
surface is ``kron(B_t2, B_t1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import BSpline

from .errors import DomainError, InvalidArgumentError

# relative slack when deciding whether a point is inside the domain
_DOMAIN_RTOL = 1e-12


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot vector with interior breaks inside ``(domain_lo, domain_hi)``."""

    interior_breaks: tuple
    degree: int
    domain_lo: float
    domain_hi: float

    def __post_init__(self):
        breaks = np.asarray(self.interior_breaks, dtype=float)
        if self.degree < 0:
            raise InvalidArgumentError("degree must be nonnegative")
        if not self.domain_hi > self.domain_lo:
            raise InvalidArgumentError("degenerate domain: need domain_hi > domain_lo")
        if breaks.size and (np.any(np.diff(breaks) <= 0) or breaks[0] <= self.domain_lo
                            or breaks[-1] >= self.domain_hi):
            raise InvalidArgumentError("interior breaks must be strictly increasing inside the domain")

    @cached_property
    def knots(self) -> np.ndarray:
        d = self.degree
        return np.concatenate([
            np.full(d + 1, float(self.domain_lo)),
            np.asarray(self.interior_breaks, dtype=float),
            np.full(d + 1, float(self.domain_hi)),
        ])

    @property
    def n_basis(self) -> int:
        return len(self.interior_breaks) + self.degree + 1

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knots, boundaries included."""
        return np.concatenate([[self.domain_lo], self.interior_breaks, [self.domain_hi]])


@dataclass(frozen=True)
class BasisSystem1D:
    knots: KnotVector

    @property
    def n_basis(self) -> int:
        return self.knots.n_basis

    @property
    def degree(self) -> int:
        return self.knots.degree

    @property
    def domain(self) -> tuple[float, float]:
        return (self.knots.domain_lo, self.knots.domain_hi)

    def integrals(self) -> np.ndarray:
        """Exact integral of every basis function over the domain."""
        t = self.knots.knots
        k = self.degree
        return (t[k + 1:] - t[:-(k + 1)]) / (k + 1)


@dataclass(frozen=True)
class BasisSystem2D:
    """Tensor product of a ``t1`` basis and a ``t2`` basis."""

    basis_t1: BasisSystem1D
    basis_t2: BasisSystem1D

    @property
    def n_basis(self) -> int:
        return self.basis_t1.n_basis * self.basis_t2.n_basis

    @property
    def shape(self) -> tuple[int, int]:
        return (self.basis_t1.n_basis, self.basis_t2.n_basis)


def make_basis(domain_lo: float, domain_hi: float, n_basis: int, degree: int = 3) -> BasisSystem1D:
    """Build a B-spline basis with equally spaced interior breaks.

    Parameters
    ----------
    domain_lo, domain_hi : float
        Domain end points.
    n_basis : int
        Number of basis functions; must be at least ``degree + 1``.
    degree : int, default=3
        Polynomial degree.

    Returns
    -------
    BasisSystem1D
    """
    if int(n_basis) != n_basis or n_basis < degree + 1:
        raise InvalidArgumentError(f"n_basis={n_basis} must be an integer >= degree + 1 = {degree + 1}")
    if not (np.isfinite(domain_lo) and np.isfinite(domain_hi)) or not domain_hi > domain_lo:
        raise InvalidArgumentError(f"degenerate domain [{domain_lo}, {domain_hi}]")
    n_inner = int(n_basis) - degree - 1
    i = np.arange(1, n_inner + 1)
    breaks = domain_lo + (domain_hi - domain_lo) * i / (n_inner + 1)
    return BasisSystem1D(KnotVector(tuple(float(b) for b in breaks), int(degree),
                                    float(domain_lo), float(domain_hi)))


def make_basis_2d(domain_t1, domain_t2, n_basis: tuple[int, int], degree: int = 3) -> BasisSystem2D:
    return BasisSystem2D(make_basis(*domain_t1, n_basis[0], degree),
                         make_basis(*domain_t2, n_basis[1], degree))


def _checked_points(basis: BasisSystem1D, points) -> np.ndarray:
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if x.ndim != 1:
        raise InvalidArgumentError("points must be a 1D array")
    lo, hi = basis.domain
    slack = _DOMAIN_RTOL * (hi - lo)
    if not np.all(np.isfinite(x)) or np.any(x < lo - slack) or np.any(x > hi + slack):
        bad = x[~((x >= lo - slack) & (x <= hi + slack))]
        raise DomainError(f"points {bad[:5]} outside basis domain [{lo}, {hi}]")
    return np.clip(x, lo, hi)


def eval_design(basis: BasisSystem1D, points) -> np.ndarray:
    """Dense design matrix with one row per point and one column per basis function."""
    x = _checked_points(basis, points)
    return BSpline.design_matrix(x, basis.knots.knots, basis.degree).toarray()


def eval_design_2d(basis: BasisSystem2D, grid_t1, grid_t2) -> np.ndarray:
    """Design matrix of a tensor basis on the product grid ``grid_t1 x grid_t2``.

    Rows follow column-major vectorization of the surface (``t1`` fastest).
    """
    b1 = eval_design(basis.basis_t1, grid_t1)
    b2 = eval_design(basis.basis_t2, grid_t2)
    return np.kron(b2, b1)


def diff_matrix(order: int, n: int) -> np.ndarray:
    """Finite difference matrix of the given order, shape ``(n - order, n)``."""
    if order < 0 or n <= order:
        raise InvalidArgumentError(f"need n > order, got n={n}, order={order}")
    return np.diff(np.eye(n), n=order, axis=0)
