"""Planning and primal-dual learning for finite cooperative multi-agent
constrained POMDPs: exact and compressed coordinator dynamic programming,
Lagrangian duality with numeric strong-duality checks, certification of
approximate-information-state compressors with optimality-gap bounds, and a
three-timescale trainer on a self-contained neural layer."""

from .model import (
    BehavioralPolicy,
    Distribution,
    JointHistory,
    ModelSpec,
    RawTrajectory,
    enumerate_histories,
    exact_evaluate,
    sample_trajectory,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "BehavioralPolicy",
    "Distribution",
    "JointHistory",
    "ModelSpec",
    "RawTrajectory",
    "enumerate_histories",
    "exact_evaluate",
    "sample_trajectory",
    "validate",
]
