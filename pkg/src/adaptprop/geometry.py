"""Temporal window arithmetic: IoU, the agent's action set, and clamped transforms.

A window ``[left, right)`` covers frames ``left .. right - 1``; its span is
``right - left``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class AgentAction(enum.IntEnum):
    MOVE_LEFT = 0
    MOVE_RIGHT = 1
    EXPAND_LEFT = 2
    EXPAND_RIGHT = 3
    SHRINK = 4
    JUMP = 5
    TRIGGER = 6


NUM_ACTIONS = len(AgentAction)
REGULAR_ACTIONS = (
    AgentAction.MOVE_LEFT,
    AgentAction.MOVE_RIGHT,
    AgentAction.EXPAND_LEFT,
    AgentAction.EXPAND_RIGHT,
    AgentAction.SHRINK,
)


class JumpMode(str, enum.Enum):
    RANDOM_SIDE = "random_side"
    FORWARD_LEAP = "forward_leap"


@dataclass(frozen=True, order=True)
class TemporalWindow:
    left: int
    right: int

    def __post_init__(self):
        if self.left < 0 or self.right <= self.left:
            raise ValueError(f"invalid window [{self.left}, {self.right})")

    @property
    def span(self) -> int:
        return self.right - self.left

    @property
    def center(self) -> float:
        return 0.5 * (self.left + self.right)

    def as_tuple(self) -> tuple[int, int]:
        return (self.left, self.right)


@dataclass(frozen=True)
class TransformConfig:
    alpha: float = 0.2
    min_span: int = 8
    jump_mode: JumpMode = JumpMode.RANDOM_SIDE

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.min_span < 2:
            raise ValueError("min_span must be >= 2")
        object.__setattr__(self, "jump_mode", JumpMode(self.jump_mode))


def intersection(w: TemporalWindow, g: TemporalWindow) -> int:
    return max(0, min(w.right, g.right) - max(w.left, g.left))


def iou(w: TemporalWindow, g: TemporalWindow) -> float:
    inter = intersection(w, g)
    if inter == 0:
        return 0.0
    return inter / (w.span + g.span - inter)


def iou_fraction(w: TemporalWindow, g: TemporalWindow) -> tuple[int, int]:
    """IoU as an exact ``(intersection, union)`` integer pair."""
    inter = intersection(w, g)
    return inter, w.span + g.span - inter


def step_size(w: TemporalWindow, alpha: float) -> int:
    # round half up, never below one frame
    return max(1, int(math.floor(alpha * w.span + 0.5)))


def clamp(left: int, right: int, video_len: int, min_span: int) -> TemporalWindow:
    """Fit ``[left, right)`` inside ``[0, video_len]``.

    The span is first raised to ``min_span`` around the midpoint, then the
    window is shifted (not truncated) back inside the video. Only a window
    longer than the video is truncated.
    """
    left, right = int(left), int(right)
    if right - left < min_span:
        mid = (left + right) // 2
        left = mid - min_span // 2
        right = left + min_span
    span = right - left
    if span >= video_len:
        return TemporalWindow(0, video_len)
    if left < 0:
        left, right = 0, span
    elif right > video_len:
        left, right = video_len - span, video_len
    return TemporalWindow(left, right)


def unclamped_transform(w: TemporalWindow, action: AgentAction, alpha: float) -> tuple[int, int]:
    """Raw boundaries after a regular action, before any clamping."""
    d = step_size(w, alpha)
    l, r = w.left, w.right
    if action == AgentAction.MOVE_LEFT:
        return l - d, r - d
    if action == AgentAction.MOVE_RIGHT:
        return l + d, r + d
    if action == AgentAction.EXPAND_LEFT:
        return l - d, r
    if action == AgentAction.EXPAND_RIGHT:
        return l, r + d
    if action == AgentAction.SHRINK:
        # total shrink is d; the odd frame comes off the right side
        return l + d // 2, r - (d - d // 2)
    raise ValueError(f"{action!r} is not a regular transform")


def jump(w: TemporalWindow, cfg: TransformConfig, video_len: int, rng=None) -> TemporalWindow:
    """Relocate the window.

    ``random_side`` keeps the span and leaves a one-span gap on a side drawn
    uniformly from ``rng``; ``forward_leap`` translates right by twice the
    regular step.
    """
    if cfg.jump_mode == JumpMode.FORWARD_LEAP:
        d = step_size(w, cfg.alpha)
        left = w.left + 2 * d
    else:
        if rng is None:
            raise ValueError("random_side jump needs a random source")
        go_left = rng.random() < 0.5
        left = w.left - 2 * w.span if go_left else w.right + w.span
    return clamp(left, left + w.span, video_len, cfg.min_span)


def apply_transform(
    w: TemporalWindow,
    action: AgentAction,
    cfg: TransformConfig,
    video_len: int,
    rng=None,
) -> TemporalWindow:
    action = AgentAction(action)
    if action == AgentAction.TRIGGER:
        raise ValueError("trigger is not a geometric transform")
    if action == AgentAction.JUMP:
        return jump(w, cfg, video_len, rng)
    left, right = unclamped_transform(w, action, cfg.alpha)
    return clamp(left, right, video_len, cfg.min_span)


def best_iou(w: TemporalWindow, windows) -> float:
    return max((iou(w, g) for g in windows), default=0.0)
