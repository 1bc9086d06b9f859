"""Non-crossing quantile networks in plain numpy.

Submodules: ``nn`` (dense ReLU networks and Adam), ``heads`` (ordered and
baseline quantile heads), ``losses`` (check and quantile-Huber risk),
``simdata`` (simulation models with known conditional quantiles),
``trainer`` (fitting, evaluation, replication), ``drl`` (fitted NQ
iteration with a dynamic-programming oracle), ``plotting`` and ``cli``.
"""
from nqnet.heads import HEAD_KINDS, head_forward
from nqnet.losses import LossSpec, empirical_risk
from nqnet.trainer import TrainConfig, evaluate, replicate, train

__all__ = ["HEAD_KINDS", "LossSpec", "TrainConfig", "empirical_risk", "evaluate", "head_forward",
           "replicate", "train"]
__version__ = "0.1.0"
