"""End-to-end fit of the partially observed functional regression model.

Pipeline: smooth every covariate sample on its observed points, integrate
covariate and coefficient bases over each subject's observed subdomain,
assemble ``B = [1 | A Psi]`` and estimate ``theta`` with the mixed-model
PIRLS fit. Coefficient functions are recovered as ``beta_j = Gamma_j b_j``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import (BasisSystem1D, BasisSystem2D, eval_design, eval_design_2d, make_basis,
                    make_basis_2d)
from .errors import DimensionMismatchError, EmptyMaskError, InvalidArgumentError, PofrmError
from .innerprod import DEFAULT_REFINE, PsiCache, assemble_design
from .mixedmodel import (MixedModelFit, build_penalty, fit_pirls_sop, get_family,
                         reparameterize)
from .smoothing import FunctionalSample, smooth_samples

DEFAULT_BASIS = {1: ((25,), (15,)), 2: ((15, 15), (10, 10))}


@dataclass(frozen=True)
class CovariateSpec:
    """Basis layout for one functional covariate.

    ``cov_basis``/``coef_basis`` are basis counts per axis; ``None`` picks the
    defaults (25 and 15 for curves, 15x15 and 10x10 for surfaces).
    """

    dim: int
    cov_basis: tuple | None = None
    coef_basis: tuple | None = None
    degree: int = 3

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidArgumentError(f"covariate dimension must be 1 or 2, got {self.dim}")
        for name in ("cov_basis", "coef_basis"):
            val = getattr(self, name)
            if val is None:
                continue
            val = tuple(int(v) for v in np.atleast_1d(val))
            if len(val) != self.dim or min(val) < self.degree + 1:
                raise InvalidArgumentError(f"{name}={val} invalid for a {self.dim}D covariate of degree {self.degree}")
            object.__setattr__(self, name, val)

    @property
    def cov_sizes(self) -> tuple:
        return self.cov_basis or DEFAULT_BASIS[self.dim][0]

    @property
    def coef_sizes(self) -> tuple:
        return self.coef_basis or DEFAULT_BASIS[self.dim][1]


@dataclass(frozen=True)
class PofrSpec:
    covariates: tuple
    family: str = "gaussian"
    smoothing_lambdas: tuple | None = None
    shared_smoothing: bool = False
    lambdas: tuple | None = None
    tol: float = 1e-6
    max_iter: int = 200
    refine: int = DEFAULT_REFINE

    def __post_init__(self):
        covs = tuple(c if isinstance(c, CovariateSpec) else CovariateSpec(int(c)) for c in self.covariates)
        if not covs:
            raise InvalidArgumentError("at least one covariate is required")
        object.__setattr__(self, "covariates", covs)
        get_family(self.family)

    @classmethod
    def from_dims(cls, dims: Sequence[int], **kwargs) -> "PofrSpec":
        return cls(tuple(CovariateSpec(d) for d in dims), **kwargs)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Responses plus ``covariates[j][i]``: sample of covariate ``j`` for subject ``i``."""

    y: np.ndarray
    covariates: list

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "y", y)
        if not self.covariates:
            raise InvalidArgumentError("dataset has no covariates")
        for j, samples in enumerate(self.covariates):
            if len(samples) != y.size:
                raise DimensionMismatchError(f"covariate {j} has {len(samples)} samples for {y.size} responses")

    @property
    def n_subjects(self) -> int:
        return self.y.size

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], [[s[i] for i in idx] for s in self.covariates])


@dataclass(frozen=True, eq=False)
class CoefficientField:
    basis: BasisSystem1D | BasisSystem2D
    coeffs: np.ndarray


@dataclass(frozen=True, eq=False)
class PofrFit:
    mixed: MixedModelFit
    beta_hats: list
    alpha_hat: float
    spec: PofrSpec
    cov_bases: list
    grids: list
    smoothing_lambdas: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    cache_stats: list = field(default_factory=list)
    design: np.ndarray | None = field(default=None, repr=False)

    @property
    def theta(self) -> np.ndarray:
        return self.mixed.theta

    @property
    def family(self) -> str:
        return self.mixed.family

    @property
    def eta(self) -> np.ndarray:
        return self.mixed.eta

    @property
    def mu(self) -> np.ndarray:
        return self.mixed.mu


def _bases_for(cov: CovariateSpec, grids):
    domains = [(float(g[0]), float(g[-1])) for g in grids]
    if cov.dim == 1:
        return (make_basis(*domains[0], cov.cov_sizes[0], cov.degree),
                make_basis(*domains[0], cov.coef_sizes[0], cov.degree))
    return (make_basis_2d(domains[0], domains[1], cov.cov_sizes, cov.degree),
            make_basis_2d(domains[0], domains[1], cov.coef_sizes, cov.degree))


def _check_samples(samples, j, dim):
    for i, s in enumerate(samples):
        if not isinstance(s, FunctionalSample):
            raise InvalidArgumentError(f"subject {i}, covariate {j}: expected a FunctionalSample")
        if s.dim != dim:
            raise DimensionMismatchError(f"subject {i}, covariate {j}: {s.dim}D sample for a {dim}D covariate")
        if not s.mask.any():
            raise EmptyMaskError(f"subject {i}, covariate {j}: no observed points")


def _smooth_and_integrate(covariates, spec: PofrSpec, cov_bases, coef_bases, caches, fixed=None):
    coeffs, blocks, lams = [], [], []
    t_smooth = t_psi = 0.0
    for j, (samples, cov) in enumerate(zip(covariates, spec.covariates)):
        _check_samples(samples, j, cov.dim)
        t0 = time.perf_counter()
        try:
            sm = smooth_samples(samples, cov_bases[j], spec.smoothing_lambdas,
                                shared=spec.shared_smoothing,
                                fixed_lambda=None if fixed is None else fixed[j])
        except PofrmError as exc:  # tag with the covariate index
            raise type(exc)(f"covariate {j}: {exc}") from exc
        t1 = time.perf_counter()
        blocks.append([caches[j].get(s.mask) for s in samples])
        t_psi += time.perf_counter() - t1
        t_smooth += t1 - t0
        coeffs.append(sm)
        lams.append(sm[0].lambda_used if spec.shared_smoothing else None)
    n = len(covariates[0])
    per_subject_a = [[coeffs[j][i] for j in range(len(coeffs))] for i in range(n)]
    per_subject_psi = [[blocks[j][i] for j in range(len(blocks))] for i in range(n)]
    return assemble_design(per_subject_a, per_subject_psi), lams, t_smooth, t_psi


def fit(dataset: Dataset, spec: PofrSpec) -> PofrFit:
    """Fit the model to a dataset.

    Parameters
    ----------
    dataset : Dataset
    spec : PofrSpec

    Returns
    -------
    PofrFit

    Raises
    ------
    EmptyMaskError
        If some subject has a covariate with no observed points; the message
        names the subject and covariate.
    """
    if len(dataset.covariates) != len(spec.covariates):
        raise DimensionMismatchError(
            f"dataset has {len(dataset.covariates)} covariates, spec has {len(spec.covariates)}")
    t_start = time.perf_counter()
    grids, cov_bases, coef_bases, caches = [], [], [], []
    for j, (samples, cov) in enumerate(zip(dataset.covariates, spec.covariates)):
        _check_samples(samples, j, cov.dim)
        g = samples[0].grids
        cb, kb = _bases_for(cov, g)
        grids.append(g)
        cov_bases.append(cb)
        coef_bases.append(kb)
        caches.append(PsiCache(g, cb, kb, spec.refine))

    design, lams, t_smooth, t_psi = _smooth_and_integrate(
        dataset.covariates, spec, cov_bases, coef_bases, caches)

    t0 = time.perf_counter()
    sizes = [c.coef_sizes if c.dim == 2 else c.coef_sizes[0] for c in spec.covariates]
    structure = build_penalty(sizes, [(1.0,) * c.dim for c in spec.covariates])
    rp = reparameterize(structure)
    mixed = fit_pirls_sop(design.B, dataset.y, spec.family, rp,
                          lambdas=spec.lambdas, tol=spec.tol, max_iter=spec.max_iter)
    t_fit = time.perf_counter() - t0

    theta = mixed.theta
    betas = []
    for kb, sl in zip(coef_bases, design.block_slices):
        betas.append(CoefficientField(kb, theta[sl].copy()))
    timing = {"smoothing": t_smooth, "psi": t_psi, "fit": t_fit,
              "total": time.perf_counter() - t_start}
    return PofrFit(mixed=mixed, beta_hats=betas, alpha_hat=float(theta[0]), spec=spec,
                   cov_bases=cov_bases, grids=grids, smoothing_lambdas=lams, timing=timing,
                   cache_stats=[c.stats for c in caches], design=design.B)


def linear_predictor(fit_: PofrFit, covariates: list) -> np.ndarray:
    """``eta`` for new subjects given ``covariates[j][i]``."""
    spec = fit_.spec
    if len(covariates) != len(spec.covariates):
        raise DimensionMismatchError(f"expected {len(spec.covariates)} covariates, got {len(covariates)}")
    caches = []
    for samples, cb, beta, cov in zip(covariates, fit_.cov_bases, fit_.beta_hats, spec.covariates):
        if not samples:
            raise InvalidArgumentError("no subjects to predict")
        caches.append(PsiCache(samples[0].grids, cb, beta.basis, spec.refine))
    fixed = fit_.smoothing_lambdas if spec.shared_smoothing else None
    design, _, _, _ = _smooth_and_integrate(
        covariates, spec, fit_.cov_bases, [b.basis for b in fit_.beta_hats], caches, fixed)
    return design.B @ fit_.theta


def predict(fit_: PofrFit, new_samples: list) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(eta, mu)`` for new subjects; ``new_samples[j][i]`` as in :class:`Dataset`."""
    eta = linear_predictor(fit_, new_samples)
    return eta, get_family(fit_.family).inverse_link(eta)


def eval_beta(fit_: PofrFit, covariate_id: int, points) -> np.ndarray:
    """Evaluate an estimated coefficient function.

    For a curve ``points`` is a vector; for a surface it is a pair of grids
    and the result has shape ``(len(t1), len(t2))``.
    """
    beta = fit_.beta_hats[covariate_id]
    if isinstance(beta.basis, BasisSystem2D):
        t1, t2 = (np.atleast_1d(np.asarray(p, dtype=float)) for p in points)
        vals = eval_design_2d(beta.basis, t1, t2) @ beta.coeffs
        return vals.reshape(t1.size, t2.size, order="F")
    return eval_design(beta.basis, points) @ beta.coeffs
