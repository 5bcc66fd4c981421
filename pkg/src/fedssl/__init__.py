"""Deterministic desk-scale simulator for federated self-supervised learning.

The package splits along the protocol's natural seams:

- :mod:`fedssl.params` - named flat parameter vectors and their algebra
  (weighted averaging, EMA blending, divergence, the decay-rate rule).
- :mod:`fedssl.nn` - minimal MLPs with hand-rolled gradients and
  cosine-annealed SGD.
- :mod:`fedssl.methods` - the Siamese method family (predictor,
  stop-gradient, momentum target, weight sharing) and its losses.
- :mod:`fedssl.data` - synthetic blobs, label-skew partitioning, two-view
  augmentation.
- :mod:`fedssl.federation` - client selection, update strategies including
  the divergence-aware EMA with autoscaler, rounds and experiments.
- :mod:`fedssl.evaluation` - kNN monitor, linear evaluation, collapse
  statistic.
- :mod:`fedssl.wire` - the protocol as framed messages over channels.
- :mod:`fedssl.config` / :mod:`fedssl.cli` - experiment configs and the
  command-line runner.
"""

from .config import ExperimentConfig, parse_config
from .data import AugSpec, Dataset, PartitionSpec, make_blobs, partition_non_iid
from .evaluation import EvalReport, collapse_stat, knn_eval, linear_eval
from .federation import (ConstantMu, FedEma, Replace, UpdateBoth,
                         run_experiment)
from .methods import MethodConfig, preset
from .nn import MlpSpec, Network, OptimizerState, sgd_step
from .params import (NamedParams, autoscale_lambda, compute_mu, divergence,
                     ema_blend, weighted_average)

__version__ = "0.1.0"

__all__ = [
    "AugSpec", "ConstantMu", "Dataset", "EvalReport", "ExperimentConfig",
    "FedEma", "MethodConfig", "MlpSpec", "NamedParams", "Network",
    "OptimizerState", "PartitionSpec", "Replace", "UpdateBoth",
    "autoscale_lambda", "collapse_stat", "compute_mu", "divergence",
    "ema_blend", "knn_eval", "linear_eval", "make_blobs", "parse_config",
    "partition_non_iid", "preset", "run_experiment", "sgd_step",
    "weighted_average",
]
