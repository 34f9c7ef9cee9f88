"""Inner products of covariate and coefficient bases over observed subdomains.

The observed subdomain of a sample is the union of grid cells whose corners
are all observed (consecutive observed points in 1D). Integrals over one
cell are computed by composite Simpson quadrature on every knot-free piece
of the cell, so a block for any mask is a masked sum of per-cell Gram
matrices. In 2D the per-cell integrand factorizes, which turns a block into
a sum of Kronecker products of 1D cell Grams.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .basis import BasisSystem1D, BasisSystem2D, eval_design
from .errors import DimensionMismatchError, DomainError, EmptyMaskError

DEFAULT_REFINE = 32


@dataclass(frozen=True, eq=False)
class PsiBlock:
    matrix: np.ndarray
    subject_id: int | None = None
    covariate_id: int | None = None


@dataclass(frozen=True, eq=False)
class DesignAssembly:
    """Per-subject coefficient rows, inner-product blocks and the design ``B``.

    ``A[j]`` is an ``N x delta_j`` array of covariate coefficients and
    ``Psi[j]`` the list of per-subject blocks for covariate ``j``; ``B`` is
    ``N x (1 + sum_j s_j)`` with the intercept column first.
    """

    A: list
    Psi: list
    B: np.ndarray

    @property
    def block_slices(self) -> list[slice]:
        out, start = [], 1
        for blocks in self.Psi:
            s = blocks[0].shape[1]
            out.append(slice(start, start + s))
            start += s
        return out


def simpson_nodes(a: float, b: float, breaks: np.ndarray, refine: int = DEFAULT_REFINE):
    """Nodes and weights of composite Simpson on ``[a, b]`` split at ``breaks``.

    Each knot-free piece gets ``refine`` Simpson panels.
    """
    inner = breaks[(breaks > a) & (breaks < b)]
    edges = np.concatenate([[a], inner, [b]])
    m = 2 * refine
    nodes, weights = [], []
    base = np.array([1.0] + [4.0, 2.0] * (refine - 1) + [4.0, 1.0])
    for lo, hi in zip(edges[:-1], edges[1:]):
        h = (hi - lo) / m
        nodes.append(lo + h * np.arange(m + 1))
        weights.append(base * h / 3.0)
    return np.concatenate(nodes), np.concatenate(weights)


def _cell_grams(grid: np.ndarray, cov_basis: BasisSystem1D, coef_basis: BasisSystem1D,
                refine: int) -> np.ndarray:
    """Array ``(n_cells, p, q)`` of integrals of ``phi_l * gamma_v`` over each grid cell."""
    if cov_basis.domain != coef_basis.domain:
        raise DimensionMismatchError("covariate and coefficient bases must share a domain")
    lo, hi = cov_basis.domain
    slack = 1e-12 * (hi - lo)
    if grid[0] < lo - slack or grid[-1] > hi + slack:
        raise DomainError(f"grid [{grid[0]}, {grid[-1]}] exceeds basis domain [{lo}, {hi}]")
    breaks = np.union1d(cov_basis.knots.breakpoints, coef_basis.knots.breakpoints)
    grams = np.empty((grid.size - 1, cov_basis.n_basis, coef_basis.n_basis))
    for c in range(grid.size - 1):
        x, w = simpson_nodes(grid[c], grid[c + 1], breaks, refine)
        phi = eval_design(cov_basis, x)
        gam = eval_design(coef_basis, x)
        grams[c] = phi.T @ (w[:, None] * gam)
    return grams


@lru_cache(maxsize=32)
def _cell_grams_cached(grid_key: bytes, cov_basis, coef_basis, refine):
    grams = _cell_grams(np.frombuffer(grid_key, dtype=float), cov_basis, coef_basis, refine)
    grams.setflags(write=False)
    return grams


def cell_grams(grid, cov_basis: BasisSystem1D, coef_basis: BasisSystem1D,
               refine: int = DEFAULT_REFINE) -> np.ndarray:
    grid = np.ascontiguousarray(grid, dtype=float)
    return _cell_grams_cached(grid.tobytes(), cov_basis, coef_basis, int(refine))


def observed_cells_1d(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask[:-1] & mask[1:]


def observed_cells_2d(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]


def psi_block_1d(grid, mask, cov_basis: BasisSystem1D, coef_basis: BasisSystem1D,
                 refine: int = DEFAULT_REFINE) -> PsiBlock:
    """Inner products of two 1D bases over the observed part of ``grid``.

    Entry ``(l, v)`` approximates the integral of ``phi_l * gamma_v`` over the
    maximal observed runs of the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("mask has no observed points")
    grams = cell_grams(grid, cov_basis, coef_basis, refine)
    if mask.shape != (grams.shape[0] + 1,):
        raise DimensionMismatchError("mask does not match grid")
    cells = observed_cells_1d(mask).astype(float)
    return PsiBlock(np.tensordot(cells, grams, axes=1))


def psi_block_2d(grids, mask, cov_basis: BasisSystem2D, coef_basis: BasisSystem2D,
                 refine: int = DEFAULT_REFINE) -> PsiBlock:
    """Inner products of two tensor bases over the fully observed cells of a surface.

    Row index ``a + p1 * b`` (covariate basis), column index ``x + r1 * d``
    (coefficient basis), matching column-major coefficient vectors.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("mask has no observed points")
    g1 = cell_grams(grids[0], cov_basis.basis_t1, coef_basis.basis_t1, refine)
    g2 = cell_grams(grids[1], cov_basis.basis_t2, coef_basis.basis_t2, refine)
    if mask.shape != (g1.shape[0] + 1, g2.shape[0] + 1):
        raise DimensionMismatchError("mask does not match grid")
    cells = observed_cells_2d(mask).astype(float)
    # cells[r, c] * g1[r, a, x] * g2[c, b, d] summed over (r, c) -> [b, a, d, x]
    partial = np.einsum("rc,rax->cax", cells, g1, optimize=True)
    psi4 = np.einsum("cax,cbd->badx", partial, g2, optimize=True)
    p1, r1 = g1.shape[1], g1.shape[2]
    p2, r2 = g2.shape[1], g2.shape[2]
    return PsiBlock(psi4.reshape(p2 * p1, r2 * r1))


class PsiCache:
    """Thread-safe cache of inner-product blocks keyed by mask.

    Most subjects share the full-domain mask, so a fit typically computes only
    a handful of distinct blocks.
    """

    def __init__(self, grids: Sequence, cov_basis, coef_basis, refine: int = DEFAULT_REFINE):
        self.grids = tuple(np.asarray(g, dtype=float) for g in grids)
        self.cov_basis = cov_basis
        self.coef_basis = coef_basis
        self.refine = refine
        self._blocks: dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        key = mask.tobytes() + bytes(str(mask.shape), "ascii")
        with self._lock:
            block = self._blocks.get(key)
            if block is not None:
                self.hits += 1
                return block
        if isinstance(self.cov_basis, BasisSystem2D):
            block = psi_block_2d(self.grids, mask, self.cov_basis, self.coef_basis, self.refine).matrix
        else:
            block = psi_block_1d(self.grids[0], mask, self.cov_basis, self.coef_basis, self.refine).matrix
        block.setflags(write=False)
        with self._lock:
            self.misses += 1
            return self._blocks.setdefault(key, block)

    @property
    def stats(self) -> dict:
        return {"distinct_masks": len(self._blocks), "hits": self.hits, "misses": self.misses}


def assemble_design(coeff_sets: Sequence[Sequence[np.ndarray]],
                    psi_blocks: Sequence[Sequence[np.ndarray]]) -> DesignAssembly:
    """Build ``B`` with rows ``[1, a_i1' Psi_i1, a_i2' Psi_i2, ...]``.

    Parameters
    ----------
    coeff_sets : sequence over subjects of sequences over covariates
        Basis coefficients (arrays or ``SmoothedCoefficients``).
    psi_blocks : same nesting
        Inner-product blocks (arrays or ``PsiBlock``).
    """
    n = len(coeff_sets)
    if n == 0 or len(psi_blocks) != n:
        raise DimensionMismatchError("coefficient sets and blocks must cover the same nonzero subjects")
    k = len(coeff_sets[0])
    A = [[] for _ in range(k)]
    Psi = [[] for _ in range(k)]
    rows = []
    shapes = None
    for i in range(n):
        if len(coeff_sets[i]) != k or len(psi_blocks[i]) != k:
            raise DimensionMismatchError(f"subject {i}: expected {k} covariates")
        row = [np.ones(1)]
        these = []
        for j in range(k):
            a = np.asarray(getattr(coeff_sets[i][j], "coeffs", coeff_sets[i][j]), dtype=float)
            psi = np.asarray(getattr(psi_blocks[i][j], "matrix", psi_blocks[i][j]), dtype=float)
            if a.ndim != 1 or psi.ndim != 2 or psi.shape[0] != a.size:
                raise DimensionMismatchError(
                    f"subject {i}, covariate {j}: coefficients {a.shape} incompatible with block {psi.shape}")
            these.append(psi.shape)
            A[j].append(a)
            Psi[j].append(psi)
            row.append(a @ psi)
        if shapes is None:
            shapes = these
        elif these != shapes:
            bad = next(j for j in range(k) if these[j] != shapes[j])
            raise DimensionMismatchError(
                f"subject {i}, covariate {bad}: block shape {these[bad]} differs from {shapes[bad]}")
        rows.append(np.concatenate(row))
    return DesignAssembly([np.vstack(a) for a in A], Psi, np.vstack(rows))
