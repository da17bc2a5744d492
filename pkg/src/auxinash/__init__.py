"""Preference-weighted Nash bargaining over task gradients for auxiliary learning."""

from auxinash.bargaining import (
    BargainingWeights,
    PreferenceVector,
    SolverConfig,
    TaskGradientSet,
    build_gradient_set,
    fixed_point_residual,
    solve_alpha,
    update_direction,
)
from auxinash.errors import (
    AuxiNashError,
    ConfigError,
    IhvpDivergedError,
    NotConvergedError,
    NumericalError,
    ParetoStationaryError,
    SolverDivergedError,
)
from auxinash.hypergrad import IhvpConfig, dalpha_dp, hypergradient, ihvp, mixed_partial_vjp, softmax_chain
from auxinash.trainer import TrainConfig, Trajectory, delta_percent, min_norm_element, train

__all__ = [
    "AuxiNashError",
    "BargainingWeights",
    "ConfigError",
    "IhvpConfig",
    "IhvpDivergedError",
    "NotConvergedError",
    "NumericalError",
    "ParetoStationaryError",
    "PreferenceVector",
    "SolverConfig",
    "SolverDivergedError",
    "TaskGradientSet",
    "TrainConfig",
    "Trajectory",
    "build_gradient_set",
    "dalpha_dp",
    "delta_percent",
    "fixed_point_residual",
    "hypergradient",
    "ihvp",
    "min_norm_element",
    "mixed_partial_vjp",
    "softmax_chain",
    "solve_alpha",
    "train",
    "update_direction",
]
