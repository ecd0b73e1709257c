"""Unbiased and bias-adjusted estimation after a two-stage group sequential trial."""

__version__ = "0.1.0"

from .design import (BinaryTrialData, NormalEndpointSpec, TwoStageDesign,  # noqa: E402
                     canonical_params, obf_constant)
from .estimators import (EstimateSet, ObservedOutcome, estimate_all,  # noqa: E402
                         estimate_outcome)

__all__ = [
    "BinaryTrialData",
    "EstimateSet",
    "NormalEndpointSpec",
    "ObservedOutcome",
    "TwoStageDesign",
    "canonical_params",
    "estimate_all",
    "estimate_outcome",
    "obf_constant",
]
