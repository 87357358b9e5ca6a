"""Block updates, step-size rules and the training drivers."""

from .updates import (ClientPool, CriterionRecord, SmoothnessEstimates, StepSizeError, StepSizes,
                      alternating_step_bound, c_update, criterion, data_term, estimate_smoothness,
                      exp_grad_step, floor_simplex, membership_gradients, objective, output_weights,
                      rbcd_step_bound, sample_batch, sample_output_index, surrogate_value,
                      theta_aggregate, theta_local_steps)
from .drivers import alternating_run, rbcd_run  # noqa: E402  (drivers import fedsim)

__all__ = [
    "ClientPool", "CriterionRecord", "SmoothnessEstimates", "StepSizeError", "StepSizes",
    "alternating_step_bound", "c_update", "criterion", "data_term", "estimate_smoothness",
    "exp_grad_step", "floor_simplex", "membership_gradients", "objective", "output_weights",
    "rbcd_step_bound", "sample_batch", "sample_output_index", "surrogate_value",
    "theta_aggregate", "theta_local_steps", "alternating_run", "rbcd_run",
]
