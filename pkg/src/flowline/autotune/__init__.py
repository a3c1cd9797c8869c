"""Analytical latency model and the background tuner."""

from flowline.autotune.estimators import ConsumerRateEstimator, Estimators, ProcessingTimeEstimator
from flowline.autotune.model import (
    ModelNode,
    ModelParam,
    consumer_rates,
    estimate_output_latency,
    p_empty,
    resource_usage,
    root_latency,
)
from flowline.autotune.optimize import Assignment, Budget, TunerConfig, model_gradient, optimize_parameters

__all__ = [
    "Assignment",
    "Budget",
    "ConsumerRateEstimator",
    "Estimators",
    "ModelNode",
    "ModelParam",
    "ProcessingTimeEstimator",
    "TunerConfig",
    "consumer_rates",
    "estimate_output_latency",
    "model_gradient",
    "optimize_parameters",
    "p_empty",
    "resource_usage",
    "root_latency",
]
