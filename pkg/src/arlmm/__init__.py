"""Ridge-regularized linear mixed models with SRHT-sketched kernels.

The main entry points are :func:`fit` (``"avc"``, ``"em"`` or ``"exact"``),
the estimators in :mod:`arlmm.estimators`, the variance-component fits in
:mod:`arlmm.avc` and :mod:`arlmm.em`, and the bound checks in
:mod:`arlmm.verify`.
"""

from .avc import avc_general, avc_parameterized, build_s_matrix
from .datagen import SimConfig, SimTruth, simulate
from .em import EMConfig, EMState, FitResult, em_fit, em_posteriors, em_step
from .errors import (ArlmmError, DataError, DegenerateParameterizationError, FactorizationError,
                     NumericalError, UsageError)
from .estimators import FixedEffectsEstimate, dual_beta, estimate_intercept, fast_beta
from .fit import fit, fit_avc, fit_exact
from .model import (MarginalVariance, MixedModelData, PriorPhi, VarianceComponents,
                    build_marginal_variance, centering_projector_apply)
from .sketch import KernelApprox, Sketch, build_sketch, fwht_in_place, sample_size, transform_covariates

__version__ = "0.1.0"

__all__ = [
    "ArlmmError", "DataError", "DegenerateParameterizationError", "EMConfig", "EMState",
    "FactorizationError", "FitResult", "FixedEffectsEstimate", "KernelApprox", "MarginalVariance",
    "MixedModelData", "NumericalError", "PriorPhi", "SimConfig", "SimTruth", "Sketch", "UsageError",
    "VarianceComponents", "avc_general", "avc_parameterized", "build_marginal_variance",
    "build_s_matrix", "build_sketch", "centering_projector_apply", "dual_beta", "em_fit",
    "em_posteriors", "em_step", "estimate_intercept", "fast_beta", "fit", "fit_avc", "fit_exact",
    "fwht_in_place", "sample_size", "simulate", "transform_covariates",
]
