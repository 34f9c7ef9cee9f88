"""Difference penalties, their mixed-model reparameterization and the PIRLS/SOP fit.

Coefficients ``theta = (alpha, b_1, b_2, ...)`` are rotated by an orthogonal
``T`` into unpenalized fixed effects ``nu`` and penalized random effects
``delta`` with diagonal precision ``sum_k Lambda_k / tau2_k``. Variance
components are measured relative to the dispersion, so ``tau2_k = 1 /
lambda_k`` holds exactly for the penalty weights of the working model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, block_diag, cho_factor, cho_solve
from scipy.special import expit, logit, xlogy

from .basis import diff_matrix
from .errors import (InvalidArgumentError, NonConvergenceError, NumericalRankError,
                     RankDeficiencyError, SeparationWarning)

logger = logging.getLogger(__name__)

TAU2_FLOOR = 1e-8
ED_FLOOR = 1e-8
# smallest penalized precision relative to the largest design column energy
PRECISION_FLOOR = 1e-10
_ETA_CLIP = 30.0
_EXACT_FIT = 1e-20


@dataclass(frozen=True)
class CovariatePenalty:
    """Penalty on one covariate's coefficient block.

    ``shape`` is ``(q,)`` for a curve coefficient or ``(r, c)`` for a surface
    coefficient stored column-major; ``lambdas`` has one entry per direction.
    """

    shape: tuple
    lambdas: tuple
    order: int = 2

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def null_dim(self) -> int:
        return self.order ** len(self.shape)

    def direction_grams(self) -> list[np.ndarray]:
        out = []
        for n in self.shape:
            d = diff_matrix(self.order, n)
            out.append(d.T @ d)
        return out

    def matrix(self, lambdas=None) -> np.ndarray:
        lam = self.lambdas if lambdas is None else tuple(lambdas)
        grams = self.direction_grams()
        if len(self.shape) == 1:
            return lam[0] * grams[0]
        r, c = self.shape
        return lam[0] * np.kron(np.eye(c), grams[0]) + lam[1] * np.kron(grams[1], np.eye(r))


@dataclass(frozen=True)
class PenaltySpec:
    """Block-diagonal penalty ``blockdiag(0, P_1, P_2, ...)``; the intercept is free."""

    blocks: tuple

    @property
    def n_params(self) -> int:
        return 1 + sum(b.size for b in self.blocks)

    @property
    def lambdas(self) -> tuple:
        return tuple(l for b in self.blocks for l in b.lambdas)

    @property
    def component_names(self) -> tuple:
        names = []
        for j, b in enumerate(self.blocks):
            if len(b.shape) == 1:
                names.append(f"cov{j}")
            else:
                names.extend([f"cov{j}_t1", f"cov{j}_t2"])
        return tuple(names)

    @property
    def matrix(self) -> np.ndarray:
        return self.materialize()

    def materialize(self, lambdas=None) -> np.ndarray:
        flat = self.lambdas if lambdas is None else tuple(lambdas)
        parts, pos = [np.zeros((1, 1))], 0
        for b in self.blocks:
            k = len(b.lambdas)
            parts.append(b.matrix(flat[pos:pos + k]))
            pos += k
        return block_diag(*parts)


def build_penalty(coef_basis_sizes: Sequence, lambdas: Sequence, order: int = 2) -> PenaltySpec:
    """Assemble the penalty for covariates with the given coefficient basis sizes.

    Parameters
    ----------
    coef_basis_sizes : sequence
        ``q`` for a 1D coefficient, ``(r, c)`` for a 2D one.
    lambdas : sequence
        Per covariate, a positive float (1D) or a pair ``(lambda_t1, lambda_t2)`` (2D).
    """
    if len(coef_basis_sizes) != len(lambdas):
        raise InvalidArgumentError("one lambda entry per covariate is required")
    blocks = []
    for size, lam in zip(coef_basis_sizes, lambdas):
        shape = tuple(int(s) for s in np.atleast_1d(size))
        lam = tuple(float(v) for v in np.atleast_1d(lam))
        if len(shape) not in (1, 2) or len(lam) != len(shape):
            raise InvalidArgumentError(f"coefficient shape {shape} needs {len(shape)} lambda(s), got {lam}")
        if any(not (v > 0) or not np.isfinite(v) for v in lam):
            raise InvalidArgumentError(f"lambdas must be positive and finite, got {lam}")
        if any(n <= order for n in shape):
            raise InvalidArgumentError(f"coefficient basis {shape} too small for order-{order} differences")
        blocks.append(CovariatePenalty(shape, lam, order))
    return PenaltySpec(tuple(blocks))


@dataclass(frozen=True, eq=False)
class Reparameterization:
    """Orthogonal ``T = [T_n | T_s]`` with the per-component precision diagonals.

    Column layout: intercept, null-space columns of every covariate, then
    penalized columns of every covariate. ``precisions[k]`` is the diagonal
    of ``Lambda_k`` over the penalized columns; ``eigenvalues[k]`` holds the
    nonzero eigenvalues of the matching direction's difference Gram.
    """

    T: np.ndarray
    n_fixed: int
    precisions: np.ndarray
    component_names: tuple
    eigenvalues: tuple
    penalty: PenaltySpec = field(repr=False)

    @property
    def Tn(self) -> np.ndarray:
        return self.T[:, :self.n_fixed]

    @property
    def Ts(self) -> np.ndarray:
        return self.T[:, self.n_fixed:]

    @property
    def n_random(self) -> int:
        return self.T.shape[1] - self.n_fixed

    def random_precision(self, tau2) -> np.ndarray:
        tau2 = np.asarray(tau2, dtype=float)
        return (1.0 / tau2) @ self.precisions if len(tau2) else np.zeros(0)

    def g_inverse(self, tau2) -> np.ndarray:
        """``T' P T`` at ``lambda = 1 / tau2``: zeros on the fixed block."""
        d = np.concatenate([np.zeros(self.n_fixed), self.random_precision(tau2)])
        return np.diag(d)


def _split_eigen(gram: np.ndarray, null_dim: int):
    vals, vecs = np.linalg.eigh(gram)
    top = vals.max()
    if top <= 0 or vals[null_dim] / top < 1e-8 or np.any(np.abs(vals[:null_dim]) > 1e-8 * top):
        raise NumericalRankError(
            f"cannot separate {null_dim} null eigenvalues from the rest: {vals[:null_dim + 1]}")
    return vecs[:, :null_dim], vecs[:, null_dim:], vals[null_dim:]


def reparameterize(penalty: PenaltySpec) -> Reparameterization:
    """SVD-based mixed-model reparameterization of a difference penalty."""
    n = penalty.n_params
    fixed_cols = [np.eye(n, 1)]
    random_cols = []
    comp_prec: list[list[np.ndarray]] = []  # per component, per covariate random block
    names, eigs = [], []
    offset = 1
    block_random_sizes = []
    per_block = []
    for j, b in enumerate(penalty.blocks):
        size = b.size
        grams = b.direction_grams()
        if len(b.shape) == 1:
            un, us, sig = _split_eigen(grams[0], b.order)
            tn, ts = un, us
            precs = [sig]
            names.append(f"cov{j}")
            eigs.append(sig)
        else:
            u1n, u1s, s1 = _split_eigen(grams[0], b.order)
            u2n, u2s, s2 = _split_eigen(grams[1], b.order)
            k = b.order
            tn = np.kron(u2n, u1n)
            ts = np.hstack([np.kron(u2s, u1n), np.kron(u2n, u1s), np.kron(u2s, u1s)])
            # precision diagonals of the t1 and t2 directions on the three random groups
            p_t1 = np.concatenate([np.zeros(s2.size * k), np.kron(np.ones(k), s1),
                                   np.kron(np.ones(s2.size), s1)])
            p_t2 = np.concatenate([np.kron(s2, np.ones(k)), np.zeros(k * s1.size),
                                   np.kron(s2, np.ones(s1.size))])
            precs = [p_t1, p_t2]
            names.extend([f"cov{j}_t1", f"cov{j}_t2"])
            eigs.extend([s1, s2])
        pad_n = np.zeros((n, tn.shape[1]))
        pad_n[offset:offset + size] = tn
        pad_s = np.zeros((n, ts.shape[1]))
        pad_s[offset:offset + size] = ts
        fixed_cols.append(pad_n)
        random_cols.append(pad_s)
        block_random_sizes.append(ts.shape[1])
        per_block.append(precs)
        offset += size

    n_random = sum(block_random_sizes)
    rows = []
    start = 0
    for precs, size in zip(per_block, block_random_sizes):
        for p in precs:
            row = np.zeros(n_random)
            row[start:start + size] = p
            rows.append(row)
        start += size
    T = np.hstack(fixed_cols + random_cols)
    n_fixed = sum(c.shape[1] for c in fixed_cols)
    return Reparameterization(T, n_fixed, np.array(rows).reshape(len(rows), n_random),
                              tuple(names), tuple(eigs), penalty)


class _Gaussian:
    name = "gaussian"

    @staticmethod
    def inverse_link(eta):
        return eta

    @staticmethod
    def link(mu):
        return mu

    @staticmethod
    def working(y, eta):
        return y.astype(float), np.ones_like(eta)

    @staticmethod
    def deviance(y, mu):
        return float(np.sum((y - mu) ** 2))


class _Binomial:
    name = "binomial"

    @staticmethod
    def inverse_link(eta):
        return expit(np.clip(eta, -_ETA_CLIP, _ETA_CLIP))

    @staticmethod
    def link(mu):
        return logit(mu)

    @classmethod
    def working(cls, y, eta):
        mu = cls.inverse_link(eta)
        w = mu * (1.0 - mu)
        return eta + (y - mu) / w, w

    @staticmethod
    def deviance(y, mu):
        return float(2.0 * np.sum(xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu))))


FAMILIES = {"gaussian": _Gaussian, "binomial": _Binomial}


def get_family(name: str):
    try:
        return FAMILIES[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}") from None


@dataclass(frozen=True, eq=False)
class MixedModelFit:
    nu: np.ndarray
    delta: np.ndarray
    tau2: np.ndarray
    theta: np.ndarray
    family: str
    dispersion: float
    eta: np.ndarray
    mu: np.ndarray
    iterations: int
    converged: bool
    ed: np.ndarray
    frozen: np.ndarray
    deviance: float
    component_names: tuple = ()
    history: tuple = ()

    @property
    def alpha(self) -> float:
        return float(self.theta[0])

    @property
    def lambdas(self) -> np.ndarray:
        return 1.0 / self.tau2


def _solve(lhs, rhs):
    try:
        cho = cho_factor(lhs, lower=True, check_finite=False)
    except LinAlgError:
        raise RankDeficiencyError("penalized normal matrix is not positive definite") from None
    return cho, cho_solve(cho, rhs, check_finite=False)


def _aitken(recent, frozen, tau2, max_step=5.0):
    """Aitken extrapolation of three consecutive log-variance iterates.

    Applied only to components moving monotonically at a contracting rate;
    the fixed point is unchanged, only the slow linear approach is shortened.
    """
    x0, x1, x2 = recent
    d1, d2 = x1 - x0, x2 - x1
    out = x2.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        r = d2 / d1
    ok = (~frozen) & (d1 * d2 > 0) & (np.abs(r) < 0.999)
    step = np.clip(d2[ok] * r[ok] / (1.0 - r[ok]), -max_step, max_step)
    out[ok] += step
    return np.maximum(np.exp(out), TAU2_FLOOR) if ok.any() else tau2


def fit_pirls_sop(B, y, family: str, reparam: Reparameterization, *,
                  tau2=None, lambdas=None, update: bool = True,
                  tol: float = 1e-6, max_iter: int = 200) -> MixedModelFit:
    """Penalized IRLS with Schall-type variance component updates.

    Each iteration forms the working response, solves the mixed-model
    equations at the current ``tau2`` and, when ``update`` is set, moves every
    variance component to ``delta' Lambda_k delta / (phi * ED_k)``.

    Parameters
    ----------
    B : array, shape (N, p)
        Design ``[1 | A Psi]``.
    y : array, shape (N,)
    family : {'gaussian', 'binomial'}
    reparam : Reparameterization
    tau2, lambdas : array, optional
        Starting (or fixed) variance components; ``lambdas`` fixes them at
        ``1 / lambdas`` and disables updates.
    update : bool, default=True
    tol : float, default=1e-6
        Relative change in deviance and variance components at convergence.
    max_iter : int, default=200

    Raises
    ------
    RankDeficiencyError
        If the unpenalized columns of the rotated design are collinear.
    NonConvergenceError
        If ``max_iter`` iterations do not reach ``tol``; the last iterate is attached.
    """
    fam = get_family(family)
    B = np.asarray(B, dtype=float)
    y = np.asarray(y, dtype=float)
    n_obs = B.shape[0]
    if B.ndim != 2 or B.shape[1] != reparam.T.shape[0] or y.shape != (n_obs,):
        raise InvalidArgumentError(f"design {B.shape} and response {y.shape} do not match the penalty")
    if fam is _Binomial and np.any((y < 0) | (y > 1)):
        raise InvalidArgumentError("binomial responses must lie in [0, 1]")

    n_comp = reparam.precisions.shape[0]
    if lambdas is not None:
        lam = np.asarray(lambdas, dtype=float).ravel()
        if lam.shape != (n_comp,) or np.any(lam <= 0):
            raise InvalidArgumentError(f"need {n_comp} positive lambdas")
        tau2 = 1.0 / lam
        update = False
    tau2 = np.ones(n_comp) if tau2 is None else np.array(tau2, dtype=float).ravel()
    if tau2.shape != (n_comp,) or np.any(tau2 <= 0):
        raise InvalidArgumentError(f"need {n_comp} positive variance components")
    if n_comp == 0:
        update = False

    XZ = B @ reparam.T
    nf = reparam.n_fixed
    # unpenalized columns that vanish identically (covariates that are zero for
    # every subject) carry no information; their coefficients are pinned at 0
    idle = np.flatnonzero(~np.any(XZ[:, :nf] != 0.0, axis=0))
    n_active = nf - idle.size
    if np.linalg.matrix_rank(np.delete(XZ[:, :nf], idle, axis=1)) < n_active:
        raise RankDeficiencyError("unpenalized design columns are collinear (intercept and null-space terms)")
    Lam = reparam.precisions
    # variance ceiling: keeps the mixed-model matrix positive definite when the
    # random-effect columns are collinear and the data ask for no smoothing
    energy = float(np.max(np.sum(XZ ** 2, axis=0)))
    lam_min = np.array([row[row > 0].min() if np.any(row > 0) else 1.0 for row in Lam])
    tau2_ceiling = lam_min / (PRECISION_FLOOR * max(energy, 1e-300))

    ybar = float(np.mean(y))
    if fam is _Binomial:
        ybar = min(max(ybar, 1e-6), 1 - 1e-6)
    omega = np.zeros(XZ.shape[1])
    omega[0] = fam.link(ybar)
    eta = XZ @ omega
    dev = fam.deviance(y, fam.inverse_link(eta))
    frozen = np.zeros(n_comp, dtype=bool)
    ed = np.zeros(n_comp)
    phi = 1.0
    history = []
    converged = False
    it = 0
    recent: list[np.ndarray] = []  # log tau2 after consecutive plain updates

    def penalized(om, pdiag):
        return fam.deviance(y, fam.inverse_link(XZ @ om)) + float(om[nf:] @ (pdiag * om[nf:]))

    for it in range(1, max_iter + 1):
        z, w = fam.working(y, eta)
        pdiag = reparam.random_precision(tau2)
        lhs = XZ.T @ (w[:, None] * XZ)
        lhs[nf:, nf:] += np.diag(pdiag)
        lhs[idle, idle] = 1.0
        cho, omega_new = _solve(lhs, XZ.T @ (w * z))

        if fam is _Binomial:
            # step halving keeps the penalized deviance from increasing at fixed tau2
            old = penalized(omega, pdiag)
            new = penalized(omega_new, pdiag)
            halvings = 0
            while new > old + 1e-10 * (1.0 + abs(old)) and halvings < 30:
                omega_new = 0.5 * (omega + omega_new)
                new = penalized(omega_new, pdiag)
                halvings += 1
            history.append(new)
        else:
            history.append(penalized(omega_new, pdiag))

        omega = omega_new
        eta = XZ @ omega
        dev_new = fam.deviance(y, fam.inverse_link(eta))

        tau2_new = tau2.copy()
        if update:
            cinv_diag = np.diag(cho_solve(cho, np.eye(lhs.shape[0]), check_finite=False))[nf:]
            g = 1.0 / pdiag
            ed = (Lam * (g - cinv_diag)) @ np.ones(Lam.shape[1]) / tau2
            ed = np.maximum(ed, 0.0)
            if fam is _Gaussian:
                resid = float(np.sum(w * (z - eta) ** 2))
                phi = resid / max(n_obs - n_active - ed.sum(), 1.0)
            delta = omega[nf:]
            for k in range(n_comp):
                if frozen[k]:
                    continue
                quad = float(delta @ (Lam[k] * delta))
                if ed[k] < ED_FLOOR or quad <= 0:
                    tau2_new[k] = TAU2_FLOOR
                    frozen[k] = True
                    logger.debug("component %s frozen (ED=%.3g)", reparam.component_names[k], ed[k])
                else:
                    tau2_new[k] = min(max(quad / (ed[k] * phi), TAU2_FLOOR), tau2_ceiling[k])
        elif fam is _Gaussian and n_comp:
            pdiag = reparam.random_precision(tau2)
            cinv_diag = np.diag(cho_solve(cho, np.eye(lhs.shape[0]), check_finite=False))[nf:]
            ed = (Lam * (1.0 / pdiag - cinv_diag)) @ np.ones(Lam.shape[1]) / tau2

        if fam is _Gaussian:
            phi = float(np.sum((y - eta) ** 2)) / max(n_obs - n_active - ed.sum(), 1.0)

        dev_change = abs(dev_new - dev) / (abs(dev_new) + 0.1)
        tau_change = float(np.max(np.abs(tau2_new - tau2) / tau2)) if n_comp else 0.0
        dev, tau2 = dev_new, tau2_new
        if update and tau_change >= tol:
            recent.append(np.log(tau2))
            if len(recent) == 3:
                tau2 = np.minimum(_aitken(recent, frozen, tau2), tau2_ceiling)
                recent.clear()
        if not update and fam is _Gaussian:
            converged = True
            break
        if dev_change < tol and tau_change < tol:
            converged = True
            break
        if fam is _Gaussian and dev <= _EXACT_FIT * float(y @ y):
            # residuals at rounding level: variance updates only chase noise
            logger.info("response reproduced to rounding error after %d iterations", it)
            converged = True
            break

    mu = fam.inverse_link(eta)
    if fam is _Binomial:
        extreme = np.mean(np.abs(eta) > 15.0)
        if extreme > 0.1:
            warnings.warn(f"{extreme:.0%} of subjects have |eta| > 15; the classes may be separated",
                          SeparationWarning, stacklevel=2)
    fit = MixedModelFit(
        nu=omega[:nf].copy(), delta=omega[nf:].copy(), tau2=tau2, theta=reparam.T @ omega,
        family=fam.name, dispersion=phi if fam is _Gaussian else 1.0, eta=eta, mu=mu,
        iterations=it, converged=converged, ed=ed, frozen=frozen, deviance=dev,
        component_names=reparam.component_names, history=tuple(history),
    )
    if not converged:
        raise NonConvergenceError(f"no convergence after {max_iter} iterations", fit=fit)
    return fit
