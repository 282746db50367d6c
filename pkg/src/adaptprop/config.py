"""Flat run configuration gathering every tunable of the pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .environment import EpisodeConfig, RewardConfig
from .evaluation import ABLATION_SWITCHES
from .features import FeatureMode, atomic_write_bytes
from .geometry import TransformConfig
from .trainer import TrainConfig

ABLATIONS = tuple(ABLATION_SWITCHES)


@dataclass(frozen=True)
class RunConfig:
    # geometry
    alpha: float = 0.2
    min_span: int = 8
    # rewards
    eta: float = 3.0
    tau: float = 0.5
    punish_stall: bool = False
    # episodes
    max_steps: int = 15
    train_steps: int = 40
    init_span_min: int = 32
    init_span_max: int = 128
    test_init_span: int = 64
    forced_jump_training: bool = True
    feature_mode: str = FeatureMode.AVERAGE_POOL.value
    feature_scale: Optional[float] = None
    # learning
    epochs: int = 30
    episodes_per_video: int = 3
    batch_size: int = 200
    replay_capacity: int = 2000
    gamma: float = 0.5
    eps_start: float = 1.0
    eps_end: float = 0.1
    target_sync_interval: int = 100
    use_target_net: bool = True
    terminal_triggers: bool = True
    hidden_dims: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.2
    q_lr: float = 1e-3
    q_decay: float = 5e-5
    reg_lr: float = 1e-4
    reg_decay: float = 9e-5
    seed: int = 0
    # detection and evaluation
    use_regression: bool = True
    trigger_bonus: float = 1e6
    classifier_theta: float = 0.5
    num_proposals: int = 50

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode).value)
        if self.num_proposals < 0:
            raise ValueError("num_proposals must be >= 0")
        if not -1.0 <= self.classifier_theta <= 1.0:
            raise ValueError("classifier_theta must lie in [-1, 1]")
        # building the module configs runs their own validation
        self.episode_config()
        self.train_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def with_ablation(self, ablation: str) -> "RunConfig":
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
        mode, regress = ABLATION_SWITCHES[ablation]
        return RunConfig.from_dict({**self.to_dict(), "feature_mode": mode.value, "use_regression": regress})

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            max_steps=self.max_steps,
            feature_mode=FeatureMode(self.feature_mode),
            transform=TransformConfig(self.alpha, self.min_span),
            reward=RewardConfig(self.eta, self.tau, self.punish_stall),
            forced_jump_training=self.forced_jump_training,
            train_steps=self.train_steps,
            init_span_min=self.init_span_min,
            init_span_max=self.init_span_max,
            test_init_span=self.test_init_span,
            feature_scale=self.feature_scale,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


def write_json(path, obj) -> None:
    atomic_write_bytes(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
