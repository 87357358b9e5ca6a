"""Population personalized federated learning over generalized linear models."""

from .core import (ClientShard, ConfigError, LabeledDataset, RngStream, RunConfig, make_shards,
                   rng_derive, split_train_test)
from .graph import AffinityGraph
from .metrics import RunTrajectory
from .optim import StepSizeError, alternating_run, rbcd_run

__version__ = "0.1.0"

__all__ = ["ClientShard", "ConfigError", "LabeledDataset", "RngStream", "RunConfig", "make_shards",
           "rng_derive", "split_train_test", "AffinityGraph", "RunTrajectory", "StepSizeError",
           "alternating_run", "rbcd_run"]
