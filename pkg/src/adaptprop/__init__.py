"""Deep Q-learning agent that proposes temporal action windows in untrimmed videos."""

from .config import ABLATIONS, RunConfig
from .environment import Episode, EpisodeConfig, RewardConfig, test_search
from .evaluation import (
    OraclePolicy,
    Proposal,
    QPolicy,
    RandomPolicy,
    ablation_study,
    average_precision,
    detect_video,
    map_at_k,
    recall_at,
    recall_vs_iou,
    recall_vs_num_proposals,
)
from .features import (
    FeatureMode,
    SyntheticSpec,
    VideoRecord,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    window_feature,
)
from .geometry import AgentAction, JumpMode, TemporalWindow, TransformConfig, apply_transform, iou
from .qnet import Network, NetworkConfig, load_checkpoint, save_checkpoint
from .regressor import refine_proposals
from .trainer import ClassModel, TrainConfig, new_class_model, train_class_model

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "AgentAction", "ClassModel", "Episode", "EpisodeConfig", "FeatureMode", "JumpMode",
    "Network", "NetworkConfig", "OraclePolicy", "Proposal", "QPolicy", "RandomPolicy", "RewardConfig",
    "RunConfig", "SyntheticSpec", "TemporalWindow", "TrainConfig", "TransformConfig", "VideoRecord",
    "ablation_study", "apply_transform", "average_precision", "detect_video", "generate_synthetic_dataset",
    "iou", "load_checkpoint", "load_dataset", "map_at_k", "new_class_model", "recall_at", "recall_vs_iou",
    "recall_vs_num_proposals", "refine_proposals", "save_checkpoint", "save_dataset", "test_search",
    "train_class_model", "window_feature",
]
