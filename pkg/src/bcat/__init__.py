"""Block-causal transformer next-frame prediction for 2-D spatiotemporal fields."""

from .model import Model, ModelConfig, build_mask, count_params, init_params
from .training import TrainConfig, train
from .evaluation import EvalConfig, evaluate, relative_l2
from .rollout import rollout_next_frame, rollout_next_token

__all__ = [
    "Model", "ModelConfig", "build_mask", "count_params", "init_params",
    "TrainConfig", "train", "EvalConfig", "evaluate", "relative_l2",
    "rollout_next_frame", "rollout_next_token",
]
