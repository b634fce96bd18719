"""Determinant estimation on the unit sphere: naive Monte Carlo and flow-based importance sampling."""
from .estimators import EstimateReport, kl_bound_estimate, mc_estimate, vde_estimate
from .flows import FlowSpec, SphericalFlow, build_flow, cover_spec, dense_spec
from .operators import ConvOperator, DenseOperator, exact_logabsdet, load_fixture
from .train import TrainConfig, profile_config

__all__ = [
    "EstimateReport", "kl_bound_estimate", "mc_estimate", "vde_estimate",
    "FlowSpec", "SphericalFlow", "build_flow", "cover_spec", "dense_spec",
    "ConvOperator", "DenseOperator", "exact_logabsdet", "load_fixture",
    "TrainConfig", "profile_config",
]
__version__ = "0.1.0"
