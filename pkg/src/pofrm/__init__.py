"""Generalized additive scalar-on-function regression for partially observed curves and surfaces."""

from .basis import (BasisSystem1D, BasisSystem2D, KnotVector, diff_matrix, eval_design,
                    eval_design_2d, make_basis, make_basis_2d)
from .innerprod import DesignAssembly, PsiBlock, assemble_design, psi_block_1d, psi_block_2d
from .mixedmodel import (MixedModelFit, PenaltySpec, Reparameterization, build_penalty,
                         fit_pirls_sop, reparameterize)
from .model import CovariateSpec, Dataset, PofrFit, PofrSpec, eval_beta, fit, predict
from .smoothing import FunctionalSample, SmoothedCoefficients, select_lambda_gcv, smooth_sample

__version__ = "0.1.0"
