"""The search MDP over one video: states, rewards, episodes and the test-time sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .features import FeatureMode, VideoRecord, window_feature
from .geometry import (
    NUM_ACTIONS,
    AgentAction,
    JumpMode,
    TemporalWindow,
    TransformConfig,
    apply_transform,
    best_iou,
    clamp,
    iou_fraction,
    jump,
)

HISTORY_LEN = 10


def empty_history() -> np.ndarray:
    return np.zeros((HISTORY_LEN, NUM_ACTIONS), dtype=np.float32)


def push_history(history: np.ndarray, action: AgentAction) -> np.ndarray:
    """Row 0 holds the newest action; the oldest row falls off the end."""
    out = np.empty_like(history)
    out[1:] = history[:-1]
    out[0] = 0.0
    out[0, int(action)] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class AgentState:
    feature: np.ndarray
    history: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.feature, self.history.ravel()]).astype(np.float32)

    @property
    def dim(self) -> int:
        return self.feature.shape[0] + self.history.size


def make_state(v: VideoRecord, w: TemporalWindow, history: np.ndarray, mode: FeatureMode,
               scale: float = 1.0) -> AgentState:
    return AgentState(window_feature(v, w, mode) * scale, np.array(history, dtype=np.float32, copy=True))


@dataclass(frozen=True)
class RewardConfig:
    eta: float = 3.0
    tau: float = 0.5
    punish_stall: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 15
    feature_mode: FeatureMode = FeatureMode.AVERAGE_POOL
    transform: TransformConfig = field(default_factory=TransformConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    forced_jump_training: bool = True
    train_steps: int = 40
    init_span_min: int = 32
    init_span_max: int = 128
    test_init_span: int = 64
    # None scales window features by sqrt(D): unit-norm inputs become unit RMS per coordinate
    feature_scale: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        if self.feature_scale is not None and self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")
        if self.max_steps < 1 or self.train_steps < 1:
            raise ValueError("step budgets must be >= 1")
        if not 1 <= self.init_span_min <= self.init_span_max:
            raise ValueError("need 1 <= init_span_min <= init_span_max")


def feature_scale_for(cfg: EpisodeConfig, dim: int) -> float:
    return math.sqrt(dim) if cfg.feature_scale is None else float(cfg.feature_scale)


def _sign(x: int) -> int:
    return (x > 0) - (x < 0)


def step_reward(v: VideoRecord, w: TemporalWindow, w_next: TemporalWindow,
                punish_stall: bool = False) -> float:
    """Max over ground truths of the sign of the IoU change.

    IoUs are compared as exact fractions. An unchanged IoU scores 0 unless
    ``punish_stall`` maps it to -1.
    """
    if not v.ground_truths:
        raise ValueError(f"video {v.id} has no ground truths; step reward undefined")
    best = -1
    for g in v.gt_windows:
        i0, u0 = iou_fraction(w, g)
        i1, u1 = iou_fraction(w_next, g)
        best = max(best, _sign(i1 * u0 - i0 * u1))
        if best == 1:
            break
    if best == 0 and punish_stall:
        best = -1
    return float(best)


def trigger_reward(v: VideoRecord, w: TemporalWindow, cfg: RewardConfig) -> float:
    return cfg.eta if best_iou(w, v.gt_windows) >= cfg.tau else -cfg.eta


@dataclass(frozen=True, eq=False)
class StepOutcome:
    next_state: AgentState
    reward: float
    terminated: bool
    window: TemporalWindow
    action: AgentAction
    requested_action: AgentAction
    trigger_correct: Optional[bool] = None
    attended: Optional[TemporalWindow] = None
    iou_best: float = 0.0

    @property
    def forced(self) -> bool:
        return self.action != self.requested_action


class Episode:
    """One search over a video.

    In ``train`` mode a correct trigger relocates the window with a random
    jump and the search continues; the episode ends after ``train_steps``.
    In ``test`` mode a trigger ends the episode, as does reaching
    ``max_steps``, and jumps leap forward deterministically.
    """

    def __init__(self, video: VideoRecord, cfg: EpisodeConfig, window: TemporalWindow,
                 mode: str = "train", rng=None):
        if mode not in ("train", "test"):
            raise ValueError(f"unknown episode mode {mode!r}")
        if mode == "train" and not video.ground_truths:
            raise ValueError(f"training video {video.id} has no ground truths")
        self.video = video
        self.cfg = cfg
        self.mode = mode
        self.rng = rng
        jump_mode = JumpMode.RANDOM_SIDE if mode == "train" else JumpMode.FORWARD_LEAP
        self.transform = replace(cfg.transform, jump_mode=jump_mode)
        self.window = window
        self.history = empty_history()
        self.steps = 0
        self.terminated = False
        self.scale = feature_scale_for(cfg, video.dim)
        self.state = make_state(video, window, self.history, cfg.feature_mode, self.scale)

    @property
    def budget(self) -> int:
        return self.cfg.train_steps if self.mode == "train" else self.cfg.max_steps

    def current_iou(self) -> float:
        return best_iou(self.window, self.video.gt_windows)

    def _move(self, action: AgentAction) -> TemporalWindow:
        return apply_transform(self.window, action, self.transform, self.video.frame_count, self.rng)

    def step(self, action) -> StepOutcome:
        if self.terminated:
            raise RuntimeError("episode already terminated")
        requested = AgentAction(action)
        action = requested
        w = self.window
        iou_now = self.current_iou()
        trigger_correct = None
        self.steps += 1

        if action == AgentAction.TRIGGER:
            reward = trigger_reward(self.video, w, self.cfg.reward)
            trigger_correct = reward > 0
            if self.mode == "test":
                self.history = push_history(self.history, action)
                self.terminated = True
            elif trigger_correct:
                # keep searching from a fresh spot with a fresh history
                w_next = jump(w, self.transform, self.video.frame_count, self.rng)
                self.window = w_next
                self.history = empty_history()
            else:
                self.history = push_history(self.history, action)
        else:
            if self.mode == "train" and self.cfg.forced_jump_training and iou_now == 0.0:
                action = AgentAction.JUMP
            w_next = self._move(action)
            if self.video.ground_truths:
                reward = step_reward(self.video, w, w_next, self.cfg.reward.punish_stall)
            else:
                reward = 0.0
            self.window = w_next
            self.history = push_history(self.history, action)

        if self.steps >= self.budget:
            self.terminated = True
        self.state = make_state(self.video, self.window, self.history, self.cfg.feature_mode, self.scale)
        return StepOutcome(self.state, reward, self.terminated, self.window, action, requested,
                           trigger_correct, w, iou_now)


def random_initial_window(v: VideoRecord, cfg: EpisodeConfig, rng) -> TemporalWindow:
    span = int(rng.integers(cfg.init_span_min, cfg.init_span_max + 1))
    span = min(span, v.frame_count)
    left = int(rng.integers(0, v.frame_count - span + 1))
    return clamp(left, left + span, v.frame_count, cfg.transform.min_span)


# A policy maps (video, window, state) to an action plus optional Q-values.
Policy = Callable[[VideoRecord, TemporalWindow, AgentState], tuple]


@dataclass(frozen=True)
class VisitedWindow:
    step: int
    search: int
    window: TemporalWindow
    action: AgentAction
    reward: float
    iou_best: float
    q_values: Optional[np.ndarray] = None

    @property
    def is_trigger(self) -> bool:
        return self.action == AgentAction.TRIGGER


@dataclass
class SearchTrace:
    index: int
    origin: int
    visited: list[VisitedWindow] = field(default_factory=list)

    @property
    def triggered(self) -> bool:
        return bool(self.visited) and self.visited[-1].is_trigger


def _decide(policy: Policy, video, window, state):
    out = policy(video, window, state)
    if isinstance(out, tuple):
        action, q = out
    else:
        action, q = out, None
    return AgentAction(action), (None if q is None else np.asarray(q, dtype=np.float64))


def test_search(v: VideoRecord, policy: Policy, cfg: EpisodeConfig) -> list[SearchTrace]:
    """Sweep the video left to right with successive searches.

    Each search starts from a ``test_init_span`` window at the current origin
    and runs until a trigger or ``max_steps``; the next origin is the right
    bound of the last window, forced at least ``min_span`` frames forward.
    """
    L = v.frame_count
    min_span = cfg.transform.min_span
    traces: list[SearchTrace] = []
    origin, step = 0, 0
    while True:
        window = TemporalWindow(origin, min(L, origin + cfg.test_init_span))
        episode = Episode(v, cfg, window, mode="test")
        trace = SearchTrace(len(traces), origin)
        while not episode.terminated:
            action, q = _decide(policy, v, episode.window, episode.state)
            out = episode.step(action)
            trace.visited.append(VisitedWindow(step, trace.index, out.attended, out.action,
                                               out.reward, out.iou_best, q))
            step += 1
        traces.append(trace)
        origin = max(episode.window.right, origin + min_span)
        if origin >= L - min_span:
            break
    return traces


test_search.__test__ = False  # not a pytest test

TRACE_FIELDS = ("step", "search", "action", "left", "right", "reward", "iou_best", "triggered")


def trace_rows(traces: list[SearchTrace]) -> list[tuple]:
    rows = []
    for trace in traces:
        for vw in trace.visited:
            rows.append((vw.step, vw.search, vw.action.name, vw.window.left, vw.window.right,
                         repr(vw.reward), repr(vw.iou_best), int(vw.is_trigger)))
    return rows


def trace_csv(traces: list[SearchTrace]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    writer.writerows(trace_rows(traces))
    return buf.getvalue()
