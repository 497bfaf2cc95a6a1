"""Adaptive-step meta-learning for few-shot graph classification."""

from .backbone import BackboneConfig
from .config import ExperimentConfig, load_config
from .controller import RewardConfig, StepBounds, StepController
from .graphs import Dataset, Episode, GraphData, SplitSpec, load_tu_dataset, sample_episode, split_by_class
from .meta import MetaConfig, adapt, meta_update, test_episode

__all__ = [
    "BackboneConfig", "Dataset", "Episode", "ExperimentConfig", "GraphData", "MetaConfig",
    "RewardConfig", "SplitSpec", "StepBounds", "StepController", "adapt", "load_config",
    "load_tu_dataset", "meta_update", "sample_episode", "split_by_class", "test_episode",
]
