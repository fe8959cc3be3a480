"""Age-of-information-optimal transmission for HARQ-CC NOMA downlinks.

Simulator, finite-blocklength error model, Double-Dueling-DQN learner,
baseline/oracle policies and an experiment driver.
"""

from .channel import ChannelMode, ChannelParams
from .env import EnvConfig, EnvState, NomaEnv, enumerate_power_vectors
from .fbl import CodeParams
from .dqn import DuelingQNet, TrainConfig, evaluate_policy, train

__version__ = "0.1.0"

__all__ = [
    "ChannelMode", "ChannelParams", "CodeParams", "DuelingQNet", "EnvConfig", "EnvState",
    "NomaEnv", "TrainConfig", "enumerate_power_vectors", "evaluate_policy", "train",
]
