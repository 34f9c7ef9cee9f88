"""Impute-then-fit baseline.

Missing parts of each curve or (vectorized) surface are predicted by the
ridge-regularized conditional expectation

    x_M = mu_M + C_MO (C_OO + rho I)^{-1} (x_O - mu_O),

with ``mu`` the pointwise observed mean and ``C`` the pairwise-complete
covariance projected onto the PSD cone. The completed data are then passed to
the ordinary fit with full masks.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (DimensionMismatchError, InsufficientCompletenessError, InvalidArgumentError,
                     SingularSystemError)
from .model import Dataset, PofrFit, PofrSpec, fit
from .smoothing import FunctionalSample

logger = logging.getLogger(__name__)

DEFAULT_CAP = 0.8
AREA_WARNING = 0.6
RHO_GRID = np.logspace(-6, 1, 15)  # multiples of the mean covariance eigenvalue


@dataclass(frozen=True, eq=False)
class ImputationModel:
    """Mean and covariance on the (vectorized) grid plus the ridge ``rho``."""

    mean: np.ndarray
    cov: np.ndarray
    rho: float
    shape: tuple
    grids: tuple

    @property
    def regularized_cov(self) -> np.ndarray:
        return self.cov + self.rho * np.eye(self.cov.shape[0])


def _stack(samples):
    if not samples:
        raise InvalidArgumentError("no samples to fit")
    shape = samples[0].values.shape
    for i, s in enumerate(samples):
        if s.values.shape != shape:
            raise DimensionMismatchError(f"sample {i} has shape {s.values.shape}, expected {shape}")
    X = np.stack([np.where(s.mask, s.values, 0.0).ravel(order="F") for s in samples])
    M = np.stack([s.flat_mask() for s in samples])
    return X, M, shape


def _psd(c):
    vals, vecs = np.linalg.eigh((c + c.T) / 2)
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def _gcv_rho(X, M, mean, cov, grid):
    """Pooled GCV of the kriging smoother ``C_OO (C_OO + rho I)^{-1}`` on observed residuals."""
    groups: dict[bytes, list[int]] = {}
    for i, m in enumerate(M):
        groups.setdefault(m.tobytes(), []).append(i)
    rss = np.zeros(grid.size)
    dof = np.zeros(grid.size)
    n_tot = 0
    for key, idx in groups.items():
        o = np.frombuffer(key, dtype=bool)
        e, v = np.linalg.eigh(cov[np.ix_(o, o)])
        e = np.clip(e, 0.0, None)
        proj = (X[idx][:, o] - mean[o]) @ v  # residuals in the eigenbasis
        shrink = grid[:, None] / (e[None, :] + grid[:, None])  # (I - H) eigenvalues
        rss += (proj ** 2).sum(axis=0) @ (shrink ** 2).T
        dof += len(idx) * shrink.sum(axis=1)
        n_tot += len(idx) * o.sum()
    scores = n_tot * rss / np.maximum(dof, 1e-300) ** 2
    return float(grid[int(np.argmin(scores))])


def fit_imputer(samples, rho: float | None = None, rho_grid=None,
                max_incomplete: float = DEFAULT_CAP) -> ImputationModel:
    """Estimate mean, covariance and ridge from partially observed samples.

    Parameters
    ----------
    samples : sequence of FunctionalSample
        All on a common grid.
    rho : float, optional
        Fixed ridge; chosen by GCV over ``rho_grid`` (relative to the mean
        covariance eigenvalue) when omitted.
    max_incomplete : float, default=0.8
        Largest admissible fraction of incomplete samples.

    Raises
    ------
    InsufficientCompletenessError
        If a grid position is never observed, a covariance entry rests on
        fewer than two pairs, or too many samples are incomplete.
    """
    X, M, shape = _stack(samples)
    n = X.shape[0]
    frac = float(np.mean(~M.all(axis=1)))
    if frac > max_incomplete + 1e-12:
        raise InsufficientCompletenessError(
            f"{frac:.0%} of samples are incomplete; the imputer accepts at most {max_incomplete:.0%}")
    counts = M.sum(axis=0)
    if np.any(counts == 0):
        raise InsufficientCompletenessError(f"grid positions {np.flatnonzero(counts == 0)[:5]} are never observed")
    if len(shape) == 2:
        worst = float(np.max(1.0 - M.mean(axis=1)))
        if worst > AREA_WARNING:
            warnings.warn(f"a surface misses {worst:.0%} of its area; reconstructions beyond "
                          f"{AREA_WARNING:.0%} are unreliable", UserWarning, stacklevel=2)
    Mf = M.astype(float)
    mean = (X * Mf).sum(axis=0) / counts
    R = np.where(M, X - mean, 0.0)
    pair = Mf.T @ Mf
    if np.any(pair < 2):
        raise InsufficientCompletenessError("some covariance entries have fewer than two complete pairs")
    cov = _psd((R.T @ R) / (pair - 1.0))
    if rho is None:
        scale = max(float(np.trace(cov)) / cov.shape[0], 1e-300)
        grid = scale * np.asarray(RHO_GRID if rho_grid is None else rho_grid, dtype=float)
        rho = _gcv_rho(X, M, mean, cov, grid)
        logger.debug("imputation ridge %.3g selected from %d samples", rho, n)
    if not rho > 0:
        raise InvalidArgumentError("rho must be positive")
    return ImputationModel(mean, cov, float(rho), shape, tuple(samples[0].grids))


def impute(model: ImputationModel, sample: FunctionalSample) -> FunctionalSample:
    """Return a fully observed copy of ``sample``; observed entries are untouched."""
    if sample.values.shape != model.shape:
        raise DimensionMismatchError(f"sample shape {sample.values.shape} differs from model {model.shape}")
    if sample.is_complete:
        return sample
    o = sample.flat_mask()
    m = ~o
    x = sample.values.ravel(order="F")
    if o.any():
        c_oo = model.cov[np.ix_(o, o)] + model.rho * np.eye(int(o.sum()))
        try:
            cho = cho_factor(c_oo, lower=True, check_finite=False)
        except LinAlgError:
            raise SingularSystemError("observed covariance block is singular even after the ridge") from None
        w = cho_solve(cho, x[o] - model.mean[o], check_finite=False)
        fill = model.mean[m] + model.cov[np.ix_(m, o)] @ w
    else:
        fill = model.mean[m]
    flat = x.copy()
    flat[m] = fill
    values = sample.values.copy()
    values[~sample.mask] = flat.reshape(sample.values.shape, order="F")[~sample.mask]
    return FunctionalSample(sample.grids, values, np.ones_like(sample.mask))


def impute_dataset(dataset: Dataset, rho: float | None = None,
                   max_incomplete: float = DEFAULT_CAP) -> Dataset:
    covs = []
    for samples in dataset.covariates:
        if all(s.is_complete for s in samples):
            covs.append(list(samples))
            continue
        model = fit_imputer(samples, rho=rho, max_incomplete=max_incomplete)
        covs.append([impute(model, s) for s in samples])
    return Dataset(dataset.y.copy(), covs)


def fit_pofrm_i(dataset: Dataset, spec: PofrSpec, rho: float | None = None,
                max_incomplete: float = DEFAULT_CAP) -> tuple[PofrFit, dict]:
    """Impute every incomplete sample, then fit with full masks.

    Returns the fit and wall times ``{"imputation", "fit", "total"}`` in seconds.
    """
    t0 = time.perf_counter()
    completed = impute_dataset(dataset, rho=rho, max_incomplete=max_incomplete)
    t1 = time.perf_counter()
    result = fit(completed, spec)
    t2 = time.perf_counter()
    return result, {"imputation": t1 - t0, "fit": t2 - t1, "total": t2 - t0}
