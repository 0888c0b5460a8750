"""Monte Carlo fluence simulation in homogeneous tissue and the inverse
estimation of its optical coefficients."""

__version__ = "0.1.0"

from .optics import OpticalParams, SourceSpec
from .grid import VoxelGrid, FluenceField
from .rays import Ray, sample_ray, walk_points, rotate_walk, ray_log_density
from .estimators import (
    Scenario,
    estimate_mc,
    estimate_mc_some,
    direct_term_oracle,
    fluence_scale,
)
from .mh import MhParams, run_chain, length_law_diagnostic
from .inverse import (
    Measurements,
    DescentOptions,
    score_J,
    estimate_with_derivs,
    grad_and_hess_J,
    hybrid_descent,
    sensitivity_scan,
)
from .rng import stream

__all__ = [
    "OpticalParams",
    "SourceSpec",
    "VoxelGrid",
    "FluenceField",
    "Ray",
    "sample_ray",
    "walk_points",
    "rotate_walk",
    "ray_log_density",
    "Scenario",
    "estimate_mc",
    "estimate_mc_some",
    "direct_term_oracle",
    "fluence_scale",
    "MhParams",
    "run_chain",
    "length_law_diagnostic",
    "Measurements",
    "DescentOptions",
    "score_J",
    "estimate_with_derivs",
    "grad_and_hess_J",
    "hybrid_descent",
    "sensitivity_scan",
    "stream",
]
