"""Multi-resolution optimal subsampling for large-scale linear classification."""

from .baselines import BaselineEstimate, Method, osmac_fit, unif_fit
from .data import CaseSpec, DatasetStream, from_arrays, gen_case, read_csv, reference_theta, sample_mvt
from .estimator import (MrossEstimate, ProjectionBasis, SingularProjection, centroid_score, combined_jacobian, combined_score,
                        confidence_intervals, eta_threshold, fit_mross, g_features, plugin_variance,
                        rate_threshold, rb_region_score, solve_mross)
from .losses import LabeledPoint, LossKind, LossSpec, eval_ddloss, eval_dloss, eval_loss, point_hessian, point_score
from .sampler import (InclusionRule, RegionTag, RuleKind, ScanSummary, classify_region, inclusion_probability,
                      sampling_weight, scan)
from .solver import NonConvergence, PilotFit, SingularSystem, SolveReport, WeightedSample, fit_pilot, fit_weighted, solve_score

__all__ = [
    "BaselineEstimate", "CaseSpec", "DatasetStream", "InclusionRule", "LabeledPoint", "LossKind", "LossSpec",
    "Method", "MrossEstimate", "NonConvergence", "PilotFit", "ProjectionBasis", "RegionTag", "RuleKind",
    "ScanSummary", "SingularProjection", "SingularSystem", "SolveReport", "WeightedSample", "centroid_score",
    "classify_region", "combined_jacobian", "combined_score", "confidence_intervals", "eta_threshold",
    "eval_ddloss", "eval_dloss", "eval_loss", "fit_mross", "fit_pilot", "fit_weighted", "from_arrays",
    "g_features", "gen_case", "inclusion_probability", "osmac_fit", "plugin_variance", "point_hessian",
    "point_score", "rate_threshold", "rb_region_score", "read_csv", "reference_theta", "sample_mvt",
    "sampling_weight", "scan", "solve_mross", "solve_score", "unif_fit",
]
