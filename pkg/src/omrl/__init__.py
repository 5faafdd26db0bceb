"""Desk-scale offline meta-RL on a synthetic point-robot suite.

Task representations are learned by a tanh-bounded context encoder trained
with a distance-metric loss and an adversarial entropy regularizer; the agent
is a behavior-regularized actor-critic conditioned on the representation.
"""

__version__ = "0.1.0"

from .envs import TaskSpec, EnvState, Transition, GaussianPolicyHead  # noqa: F401
from .data import TaskDataset, ContextBatch, DatasetManifest  # noqa: F401
from .encoder import ContextEncoder, EncoderLossConfig  # noqa: F401
from .training import TrainConfig, TrainState  # noqa: F401
