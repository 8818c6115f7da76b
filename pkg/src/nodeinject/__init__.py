"""Black-box node-injection attacks on graph neural networks, trained with advantage actor-critic."""
from .graph import Budgets, Graph, GraphDelta, SplitSpec
from .victim import VictimConfig, VictimOracle, train_victim
from .attacker import AttackerPolicies, PolicyConfig, run_episode
from .a2c import TrainConfig, train_attacker

__version__ = "0.1.0"
