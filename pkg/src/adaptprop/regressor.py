"""Boundary offsets relative to the predicted span, and proposal refinement."""

from __future__ import annotations

import math
from dataclasses import replace
from typing import NamedTuple

import numpy as np

from .features import FeatureMode, VideoRecord, window_feature
from .geometry import TemporalWindow, clamp


class OffsetPair(NamedTuple):
    o_s: float
    o_e: float


def encode_offsets(pred: TemporalWindow, gt: TemporalWindow) -> OffsetPair:
    span = pred.span
    return OffsetPair((pred.left - gt.left) / span, (pred.right - gt.right) / span)


def decode_real(pred: TemporalWindow, o) -> tuple[float, float]:
    span = pred.span
    return pred.left - o[0] * span, pred.right - o[1] * span


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def decode_offsets(pred: TemporalWindow, o, video_len: int, min_span: int = 8) -> TemporalWindow:
    """Apply offsets to ``pred``, round to frames, and clamp into the video.

    Inverted or collapsed boundaries are replaced by a ``min_span`` window
    around their midpoint.
    """
    left, right = decode_real(pred, o)
    if not (math.isfinite(left) and math.isfinite(right)):
        return pred
    left, right = _round_half_up(left), _round_half_up(right)
    if right - left < min_span:
        mid = (left + right) // 2
        left, right = mid - min_span // 2, mid - min_span // 2 + min_span
    return clamp(left, right, video_len, min_span)


def refine_proposals(proposals, net, videos, mode: FeatureMode, min_span: int = 8, scale: float = 1.0):
    """Attach a regressed window to every trigger proposal.

    ``videos`` maps video id to :class:`VideoRecord`. Non-trigger proposals
    are returned unchanged. ``scale`` must match the feature scale used in
    training.
    """
    out = []
    pending = [(i, p) for i, p in enumerate(proposals) if p.is_trigger]
    regressed = {}
    if pending:
        feats = np.stack([window_feature(videos[p.video_id], p.window, mode) for _, p in pending]) * scale
        offsets = np.atleast_2d(net.predict(feats))
        for (i, p), o in zip(pending, offsets):
            v: VideoRecord = videos[p.video_id]
            regressed[i] = decode_offsets(p.window, (float(o[0]), float(o[1])), v.frame_count, min_span)
    for i, p in enumerate(proposals):
        out.append(replace(p, regressed_window=regressed[i]) if i in regressed else p)
    return out
