"""Penalized weighted least squares smoothing of partially observed curves and surfaces.

Each sample is represented on a B-spline basis evaluated over the whole grid.
Rows of the design at unobserved grid positions are zeroed by a 0/1 weight
matrix, and the coefficients solve

    (Phi' W Phi + P) a = Phi' W y

with ``P`` a second-order difference penalty (anisotropic in 2D).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.linalg.lapack import dpocon

from .basis import (BasisSystem1D, BasisSystem2D, diff_matrix, eval_design,
                    eval_design_2d)
from .errors import (DimensionMismatchError, DomainError, EmptyMaskError,
                     InvalidArgumentError, RidgeWarning, SingularSystemError)

Basis = Union[BasisSystem1D, BasisSystem2D]

DEFAULT_LAMBDAS_1D = tuple(float(v) for v in np.logspace(-3, 4, 15))
DEFAULT_LAMBDAS_2D = tuple((float(v), float(v)) for v in np.logspace(-3, 4, 8))

_RIDGE = 1e-10
_WOODBURY_COND = 1e8


@dataclass(frozen=True, eq=False)
class FunctionalSample:
    """One curve (``dim=1``) or surface (``dim=2``) with its observation mask.

    ``values`` may hold NaN at unobserved positions; they are never read.
    Surfaces are stored as ``(len(grids[0]), len(grids[1]))`` arrays, rows
    indexing ``t1``.
    """

    grids: tuple
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        grids = tuple(np.asarray(g, dtype=float) for g in self.grids)
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if len(grids) not in (1, 2):
            raise InvalidArgumentError("a sample has one or two grids")
        for g in grids:
            if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
                raise InvalidArgumentError("grids must be strictly increasing vectors of length >= 2")
        shape = tuple(g.size for g in grids)
        if values.shape != shape or mask.shape != shape:
            raise DimensionMismatchError(
                f"values {values.shape} and mask {mask.shape} must match grid shape {shape}")
        if not np.all(np.isfinite(values[mask])):
            raise InvalidArgumentError("observed values must be finite")
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_array(cls, values, grids, mask=None) -> "FunctionalSample":
        """Build a sample whose mask is the non-NaN pattern of ``values`` unless given."""
        values = np.asarray(values, dtype=float)
        if mask is None:
            mask = ~np.isnan(values)
        if not isinstance(grids, (tuple, list)) or np.ndim(grids[0]) == 0:
            grids = (grids,)
        return cls(tuple(grids), values, mask)

    @property
    def dim(self) -> int:
        return len(self.grids)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def flat_values(self) -> np.ndarray:
        """Column-major vector of values with zeros at unobserved positions."""
        v = np.where(self.mask, self.values, 0.0)
        return v.ravel(order="F")

    def flat_mask(self) -> np.ndarray:
        return self.mask.ravel(order="F")


@dataclass(frozen=True)
class SmoothedCoefficients:
    coeffs: np.ndarray
    lambda_used: Union[float, tuple]
    gcv_score: float
    edf: float = field(default=float("nan"))


def _grid_key(grids) -> tuple:
    return tuple(np.asarray(g, dtype=float).tobytes() for g in grids)


class _Smoother:
    """Design, penalty parts and null-space basis shared by every sample on one grid."""

    def __init__(self, basis: Basis, grids: tuple):
        self.basis = basis
        self._spectral: dict = {}
        if isinstance(basis, BasisSystem2D):
            if len(grids) != 2:
                raise DimensionMismatchError("a 2D basis needs a surface sample")
            self.design = eval_design_2d(basis, grids[0], grids[1])
            n1, n2 = basis.shape
            k1 = _gram_diff(n1)
            k2 = _gram_diff(n2)
            self.penalty_parts = (np.kron(np.eye(n2), k1), np.kron(k2, np.eye(n1)))
            self.penalty_roots = (np.kron(np.eye(n2), diff_matrix(2, n1)),
                                  np.kron(diff_matrix(2, n2), np.eye(n1)))
            self.null_basis = np.kron(_null_vectors(n2), _null_vectors(n1))
        else:
            if len(grids) != 1:
                raise DimensionMismatchError("a 1D basis needs a curve sample")
            self.design = eval_design(basis, grids[0])
            self.penalty_parts = (_gram_diff(basis.n_basis),)
            self.penalty_roots = (diff_matrix(2, basis.n_basis),)
            self.null_basis = _null_vectors(basis.n_basis)

    def penalty(self, lam) -> np.ndarray:
        lams = _as_lambda_tuple(lam, len(self.penalty_parts))
        return sum(l * p for l, p in zip(lams, self.penalty_parts))

    def check_identifiable(self, mask_flat: np.ndarray) -> None:
        if not mask_flat.any():
            raise EmptyMaskError("sample has no observed values")
        span = self.design[mask_flat] @ self.null_basis
        if np.linalg.matrix_rank(span) < self.null_basis.shape[1]:
            raise SingularSystemError(
                "observed positions cannot identify the penalty null space "
                f"({int(mask_flat.sum())} observed points)")

    def spectral(self, direction):
        """Generalized eigenpairs of the full-grid cross product against ``F + S``."""
        if direction not in self._spectral:
            full = self.design.T @ self.design
            try:
                kappa, vecs = eigh(full, full + self.penalty(direction), check_finite=False)
            except LinAlgError:
                self._spectral[direction] = None
            else:
                self._spectral[direction] = (np.clip(kappa, 0.0, 1.0), vecs, self.design @ vecs)
        return self._spectral[direction]

    def factor(self, mask_flat: np.ndarray, lam):
        """Return weighted design, its cross product and the factorized normal matrix."""
        weighted = self.design * mask_flat[:, None]
        cross = weighted.T @ weighted
        lhs = cross + self.penalty(lam)
        try:
            cho = cho_factor(lhs, lower=True, check_finite=False)
        except LinAlgError:
            warnings.warn("masked normal matrix is numerically singular; adding a 1e-10 ridge",
                          RidgeWarning, stacklevel=3)
            cho = cho_factor(lhs + _RIDGE * np.eye(lhs.shape[0]), lower=True, check_finite=False)
        return weighted, cross, cho


@lru_cache(maxsize=64)
def _smoother_cached(basis: Basis, key: tuple, shape: tuple) -> _Smoother:
    grids = tuple(np.frombuffer(k, dtype=float) for k in key)
    return _Smoother(basis, grids)


def _smoother_for(basis: Basis, sample: FunctionalSample) -> _Smoother:
    _check_cover(basis, sample)
    return _smoother_cached(basis, _grid_key(sample.grids), sample.values.shape)


def _check_cover(basis: Basis, sample: FunctionalSample) -> None:
    marginals = (basis.basis_t1, basis.basis_t2) if isinstance(basis, BasisSystem2D) else (basis,)
    if len(marginals) != sample.dim:
        raise DimensionMismatchError(f"basis of dimension {len(marginals)} for a {sample.dim}D sample")
    for b, g in zip(marginals, sample.grids):
        lo, hi = b.domain
        slack = 1e-12 * (hi - lo)
        if g[0] < lo - slack or g[-1] > hi + slack:
            raise DomainError(f"grid [{g[0]}, {g[-1]}] exceeds basis domain [{lo}, {hi}]")


def _gram_diff(n: int) -> np.ndarray:
    d = diff_matrix(2, n)
    return d.T @ d


def _null_vectors(n: int) -> np.ndarray:
    return np.column_stack([np.ones(n), np.arange(1.0, n + 1)])


def _as_lambda_tuple(lam, n: int) -> tuple:
    lams = tuple(float(v) for v in np.atleast_1d(lam))
    if len(lams) == 1 and n > 1:
        lams = lams * n
    if len(lams) != n:
        raise InvalidArgumentError(f"expected {n} smoothing parameter(s), got {len(lams)}")
    if any(not (v > 0) or not np.isfinite(v) for v in lams):
        raise InvalidArgumentError(f"smoothing parameters must be positive and finite, got {lams}")
    return lams


def _lambda_size(lam) -> float:
    return float(np.sum(np.atleast_1d(lam)))


def smooth_sample(sample: FunctionalSample, basis: Basis, lambdas) -> SmoothedCoefficients:
    """Penalized weighted least squares fit of one sample at fixed smoothing parameters.

    Parameters
    ----------
    sample : FunctionalSample
    basis : BasisSystem1D or BasisSystem2D
        Basis whose domain covers the sample grid.
    lambdas : float or pair of floats
        Smoothing parameter, or ``(lambda_t1, lambda_t2)`` for surfaces.
    """
    sm = _smoother_for(basis, sample)
    n_pen = len(sm.penalty_parts)
    lam = _as_lambda_tuple(lambdas, n_pen)
    w = sample.flat_mask()
    sm.check_identifiable(w)
    y = sample.flat_values()
    weighted, cross, cho = sm.factor(w, lam)
    # augmented least squares keeps large smoothing parameters well conditioned
    aug = np.vstack([weighted] + [np.sqrt(l) * r for l, r in zip(lam, sm.penalty_roots)])
    rhs = np.concatenate([y * w, np.zeros(aug.shape[0] - y.size)])
    coef = np.linalg.lstsq(aug, rhs, rcond=None)[0]
    score, edf = _gcv(y[w], (sm.design @ coef)[w], cross, cho)
    return SmoothedCoefficients(coef, lam[0] if n_pen == 1 else lam, score, edf)


def _gcv(y_obs, fitted_obs, cross, cho):
    n = y_obs.size
    edf = float(np.trace(cho_solve(cho, cross, check_finite=False)))
    rss = float(np.sum((y_obs - fitted_obs) ** 2))
    denom = (n - edf) ** 2
    return (n * rss / denom if denom > 1e-12 * n * n else np.inf), edf


def _gcv_tied(score: float, best: float, scale: float) -> bool:
    return score <= best + 1e-9 * abs(best) + 1e-12 * scale


def select_lambda_gcv(sample: FunctionalSample, basis: Basis,
                      grid_of_lambdas: Sequence) -> SmoothedCoefficients:
    """Smooth ``sample`` at the grid value minimizing GCV; ties go to the larger value."""
    grid = list(grid_of_lambdas)
    if not grid:
        raise InvalidArgumentError("empty smoothing-parameter grid")
    fits = []
    last_error = None
    for lam in grid:
        try:
            fits.append(smooth_sample(sample, basis, lam))
        except SingularSystemError as exc:
            last_error = exc
    if not fits:
        raise SingularSystemError(f"all smoothing candidates singular: {last_error}")
    scale = float(np.mean(sample.values[sample.mask] ** 2))
    return _pick(fits, scale)


def _pick(fits, scale):
    best = min(f.gcv_score for f in fits)
    tied = [f for f in fits if _gcv_tied(f.gcv_score, best, scale)]
    return max(tied, key=lambda f: _lambda_size(f.lambda_used))


def _proportional(grid):
    """Split a grid into a common direction and scalar multiples, if it has one."""
    direction = tuple(v / grid[0][0] for v in grid[0])
    scalars = [lam[0] for lam in grid]
    for lam, sc in zip(grid, scalars):
        if not np.allclose(lam, np.multiply(direction, sc), rtol=1e-12, atol=0.0):
            return None, None
    return direction, scalars


def _direct_fits(sm: _Smoother, grid, w, y):
    out = []
    for lam in grid:
        weighted, cross, cho = sm.factor(w, lam)
        c = cho_solve(cho, weighted.T @ y.T, check_finite=False).T
        r = np.sum((y[:, w] - c @ sm.design[w].T) ** 2, axis=1)
        out.append((c, r, float(np.trace(cho_solve(cho, cross, check_finite=False)))))
    return out


def _lowrank_fits(sm: _Smoother, direction, scalars, w, y):
    """Fits for every ``lambda = s * direction`` as a rank-``g`` downdate of the full grid.

    With ``V' (F + S) V = I`` and ``V' F V = K`` for the full-grid cross
    product ``F`` and penalty ``S``, deleting the ``g`` unobserved rows gives
    ``V' (F_w + s S) V = D_s - Q' Q`` where ``D_s = K + s (I - K)`` and
    ``Q = Phi[~w] V``; the Woodbury identity reduces each solve to a
    ``g x g`` system. Returns ``None`` when that system is ill conditioned.
    """
    spec = sm.spectral(direction)
    if spec is None:
        return None
    kappa, vecs, phiv = spec
    q = phiv[~w]
    b = phiv[w].T @ y[:, w].T
    p = kappa.size
    out = []
    for sc in scalars:
        d = kappa + sc * (1.0 - kappa)
        qd = q / d
        x = b / d[:, None]
        extra = 0.0
        if q.shape[0]:
            m = np.eye(q.shape[0]) - qd @ q.T
            try:
                cho = cho_factor(m, lower=True, check_finite=False)
            except LinAlgError:
                return None
            rcond, info = dpocon(cho[0], np.abs(m).sum(axis=0).max(), uplo="L")
            if info != 0 or rcond < 1.0 / _WOODBURY_COND:
                return None
            x = x + qd.T @ cho_solve(cho, qd @ b, check_finite=False)
            extra = float(np.trace(cho_solve(cho, (qd * (1.0 - kappa)) @ qd.T, check_finite=False)))
        fitted = phiv[w] @ x
        r = np.sum((y[:, w].T - fitted) ** 2, axis=0)
        edf = p - sc * (float(np.sum((1.0 - kappa) / d)) + extra)
        out.append(((vecs @ x).T, r, edf))
    return out


def smooth_samples(samples: Sequence[FunctionalSample], basis: Basis,
                   grid_of_lambdas: Sequence | None = None,
                   shared: bool = False, fixed_lambda=None) -> list[SmoothedCoefficients]:
    """Smooth many samples on a common grid, selecting smoothing by GCV.

    Samples sharing a mask share one factorization per candidate. With
    ``shared=True`` a single value minimizing the pooled GCV is used for all
    samples; ``fixed_lambda`` bypasses selection altogether.
    """
    if not samples:
        return []
    sm = _smoother_for(basis, samples[0])
    n_pen = len(sm.penalty_parts)
    if fixed_lambda is not None:
        grid = [fixed_lambda]
    elif grid_of_lambdas is None:
        grid = list(DEFAULT_LAMBDAS_2D if n_pen == 2 else DEFAULT_LAMBDAS_1D)
    else:
        grid = list(grid_of_lambdas)
    if not grid:
        raise InvalidArgumentError("empty smoothing-parameter grid")
    grid = [_as_lambda_tuple(l, n_pen) for l in grid]
    direction, scalars = _proportional(grid)

    groups: dict[bytes, list[int]] = {}
    for i, s in enumerate(samples):
        if _grid_key(s.grids) != _grid_key(samples[0].grids):
            raise DimensionMismatchError(f"sample {i} is on a different grid")
        groups.setdefault(s.flat_mask().tobytes(), []).append(i)

    n = len(samples)
    coefs = np.empty((len(grid), n, sm.design.shape[1]))
    scores = np.full((len(grid), n), np.inf)
    rss = np.zeros((len(grid), n))
    edfs = np.zeros((len(grid), n))
    nobs = np.zeros(n)
    for key, idx in groups.items():
        w = np.frombuffer(key, dtype=bool)
        try:
            sm.check_identifiable(w)
        except (SingularSystemError, EmptyMaskError) as exc:
            raise type(exc)(f"subject {idx[0]}: {exc}") from None
        y = np.stack([samples[i].flat_values() for i in idx])
        n_o = int(w.sum())
        nobs[idx] = n_o
        res = _lowrank_fits(sm, direction, scalars, w, y) if direction is not None else None
        if res is None:
            res = _direct_fits(sm, grid, w, y)
        for g, (c, r, edf) in enumerate(res):
            denom = (n_o - edf) ** 2
            coefs[g, idx] = c
            rss[g, idx] = r
            edfs[g, idx] = edf
            scores[g, idx] = n_o * r / denom if denom > 1e-12 * n_o * n_o else np.inf

    def out(g, i):
        lam = grid[g]
        return SmoothedCoefficients(coefs[g, i].copy(), lam[0] if n_pen == 1 else lam,
                                    float(scores[g, i]), float(edfs[g, i]))

    if shared:
        tot = nobs.sum()
        pooled = np.array([
            tot * rss[g].sum() / max((tot - edfs[g].sum()) ** 2, 1e-300) for g in range(len(grid))
        ])
        best = pooled.min()
        scale = float(np.mean([np.mean(s.values[s.mask] ** 2) for s in samples]))
        tied = [g for g in range(len(grid)) if _gcv_tied(pooled[g], best, scale)]
        g_best = max(tied, key=lambda g: _lambda_size(grid[g]))
        return [out(g_best, i) for i in range(n)]

    result = []
    for i, s in enumerate(samples):
        scale = float(np.mean(s.values[s.mask] ** 2))
        best = scores[:, i].min()
        tied = [g for g in range(len(grid)) if _gcv_tied(scores[g, i], best, scale)]
        result.append(out(max(tied, key=lambda g: _lambda_size(grid[g])), i))
    return result


def fitted_values(sample_or_grids, basis: Basis, coeffs: np.ndarray) -> np.ndarray:
    """Evaluate a smoothed representation back on a grid (array shaped like the grid)."""
    grids = sample_or_grids.grids if isinstance(sample_or_grids, FunctionalSample) else tuple(sample_or_grids)
    if isinstance(basis, BasisSystem2D):
        flat = eval_design_2d(basis, grids[0], grids[1]) @ coeffs
        return flat.reshape(len(grids[0]), len(grids[1]), order="F")
    return eval_design(basis, grids[0]) @ coeffs
