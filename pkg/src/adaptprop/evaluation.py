"""Proposal scoring, recall curves, detection AP, and the baseline policies.

Recall uses coverage matching: a ground truth is recalled if any of the top-k
proposals of its video overlaps it enough, however many other ground truths
that proposal also covers. AP uses one-to-one greedy matching, so a second
detection of an already-matched instance is a false positive.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .environment import AgentState, EpisodeConfig, SearchTrace, feature_scale_for, test_search
from .features import BACKGROUND, FeatureMode, VideoRecord, window_feature
from .geometry import (
    NUM_ACTIONS,
    REGULAR_ACTIONS,
    AgentAction,
    TemporalWindow,
    TransformConfig,
    apply_transform,
    best_iou,
    iou,
)
from .qnet import Network
from .regressor import refine_proposals

TRIGGER_BONUS = 1e6
PROPOSAL_FIELDS = ("video_id", "left", "right", "score", "is_trigger", "class_id")


@dataclass(frozen=True)
class Proposal:
    video_id: str
    window: TemporalWindow
    score: float
    is_trigger: bool = False
    class_id: int = BACKGROUND
    regressed_window: Optional[TemporalWindow] = None

    @property
    def final_window(self) -> TemporalWindow:
        return self.regressed_window if self.regressed_window is not None else self.window


def rank(proposals: Iterable[Proposal]) -> list[Proposal]:
    """Stable sort by descending score."""
    return sorted(proposals, key=lambda p: -p.score)


def score_proposals(video_id: str, traces: list[SearchTrace], bonus: float = TRIGGER_BONUS,
                    class_id: int = BACKGROUND) -> list[Proposal]:
    """Turn every visited window into a proposal scored by its max Q-value.

    Trigger windows get ``bonus`` added. Windows visited without Q-values
    score 0.
    """
    out = []
    for trace in traces:
        for vw in trace.visited:
            q = 0.0 if vw.q_values is None else float(np.max(vw.q_values))
            score = q + (bonus if vw.is_trigger else 0.0)
            out.append(Proposal(video_id, vw.window, score, vw.is_trigger, class_id))
    return rank(out)


def group_by_video(proposals: Iterable[Proposal]) -> dict[str, list[Proposal]]:
    grouped: dict[str, list[Proposal]] = defaultdict(list)
    for p in proposals:
        grouped[p.video_id].append(p)
    return {vid: rank(ps) for vid, ps in grouped.items()}


def gts_by_video(videos: Iterable[VideoRecord]) -> dict[str, list[TemporalWindow]]:
    return {v.id: v.gt_windows for v in videos}


def recall_at(proposals: dict[str, list[Proposal]], gts: dict[str, list[TemporalWindow]],
              iou_thresh: float, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    total = hit = 0
    for vid, windows in gts.items():
        top = [p.final_window for p in proposals.get(vid, [])[:k]]
        for g in windows:
            total += 1
            if any(iou(w, g) >= iou_thresh for w in top):
                hit += 1
    return hit / total if total else 0.0


def average_proposal_count(proposals: dict[str, list[Proposal]], video_ids, k: int) -> float:
    video_ids = list(video_ids)
    if not video_ids:
        return 0.0
    return float(np.mean([min(k, len(proposals.get(v, []))) for v in video_ids]))


def recall_vs_num_proposals(proposals, gts, iou_thresh: float = 0.5, ks=None) -> list[tuple[float, float]]:
    if ks is None:
        ks = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]
    return [(average_proposal_count(proposals, gts, k), recall_at(proposals, gts, iou_thresh, k))
            for k in ks]


def iou_grid() -> np.ndarray:
    return np.round(np.arange(1, 21) * 0.05, 2)


def recall_vs_iou(proposals, gts, k: int = 100, thresholds=None) -> list[tuple[float, float]]:
    thresholds = iou_grid() if thresholds is None else thresholds
    return [(float(t), recall_at(proposals, gts, float(t), k)) for t in thresholds]


def match_detections(detections: list[Proposal], gts: dict[str, list[TemporalWindow]],
                     iou_thresh: float = 0.5) -> np.ndarray:
    """Mark each detection (in descending score order) as true or false positive."""
    used = {vid: np.zeros(len(ws), dtype=bool) for vid, ws in gts.items()}
    tp = np.zeros(len(detections), dtype=bool)
    for i, det in enumerate(rank(detections)):
        windows = gts.get(det.video_id, [])
        if not windows:
            continue
        ious = np.array([iou(det.final_window, g) for g in windows])
        for j in np.argsort(-ious, kind="stable"):
            if ious[j] < iou_thresh:
                break
            if not used[det.video_id][j]:
                used[det.video_id][j] = True
                tp[i] = True
                break
    return tp


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    prec = np.concatenate([[0.0], precision, [0.0]])
    rec = np.concatenate([[0.0], recall, [recall[-1]]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def average_precision(detections: list[Proposal], gts: dict[str, list[TemporalWindow]],
                      iou_thresh: float = 0.5) -> float:
    n_gt = sum(len(ws) for ws in gts.values())
    return ap_from_tp(match_detections(detections, gts, iou_thresh), n_gt)


def per_class_ap(detections: list[Proposal], videos: list[VideoRecord], class_count: int,
                 iou_thresh: float = 0.5) -> dict[int, float]:
    """AP for each class that has at least one ground truth."""
    out = {}
    for c in range(class_count):
        gts = {v.id: v.windows_of_class(c) for v in videos}
        if not any(gts.values()):
            continue
        out[c] = average_precision([d for d in detections if d.class_id == c], gts, iou_thresh)
    return out


def map_at_05(detections: list[Proposal], videos: list[VideoRecord], class_count: int) -> float:
    aps = per_class_ap(detections, videos, class_count, 0.5)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def temporal_nms(proposals: list[Proposal], thresh: float = 0.5) -> list[Proposal]:
    """Greedy per-video suppression of lower-scored overlapping proposals."""
    kept = []
    for vid, ps in group_by_video(proposals).items():
        chosen: list[Proposal] = []
        for p in ps:
            if all(iou(p.final_window, q.final_window) <= thresh for q in chosen):
                chosen.append(p)
        kept.extend(chosen)
    return kept


def oracle_policy(v: VideoRecord, w: TemporalWindow, tau: float = 0.5,
                  transform: TransformConfig | None = None) -> AgentAction:
    """Ground-truth-aware greedy baseline.

    Triggers once the best IoU reaches ``tau``; otherwise takes the regular
    transform with the highest resulting IoU (lowest ordinal on ties), or
    jumps when every transform leaves the window disjoint from all instances.
    """
    transform = transform or TransformConfig()
    gts = v.gt_windows
    if best_iou(w, gts) >= tau:
        return AgentAction.TRIGGER
    best_action, best_val = AgentAction.JUMP, 0.0
    for a in REGULAR_ACTIONS:
        val = best_iou(apply_transform(w, a, transform, v.frame_count), gts)
        if val > best_val:
            best_action, best_val = a, val
    return best_action


class OraclePolicy:
    def __init__(self, tau: float = 0.5, transform: TransformConfig | None = None):
        self.tau = tau
        self.transform = transform or TransformConfig()

    def __call__(self, video: VideoRecord, window: TemporalWindow, state: AgentState):
        return oracle_policy(video, window, self.tau, self.transform), None


class RandomPolicy:
    """Uniform actions with uniform random scores, the no-learning baseline."""

    def __init__(self, rng):
        self.rng = rng

    def __call__(self, video, window, state):
        action = AgentAction(int(self.rng.integers(NUM_ACTIONS)))
        return action, self.rng.random(NUM_ACTIONS)


class QPolicy:
    """Greedy policy of a trained Q-network."""

    def __init__(self, net: Network):
        self.net = net

    def __call__(self, video, window, state: AgentState):
        q = self.net.predict(state.vector()).astype(np.float64)
        return AgentAction(int(np.argmax(q))), q


def class_centroids(videos: Iterable[VideoRecord], class_count: int, mode) -> np.ndarray:
    """Mean window feature of every ground-truth instance, per class."""
    sums, counts = None, np.zeros(class_count)
    for v in videos:
        for g, c in v.ground_truths:
            f = window_feature(v, g, mode)
            if sums is None:
                sums = np.zeros((class_count, f.shape[0]))
            sums[c] += f
            counts[c] += 1
    if sums is None or np.any(counts == 0):
        raise ValueError("every class needs at least one training instance")
    return sums / counts[:, None]


def classify_stub(feature: np.ndarray | None, mode: str, *, video: VideoRecord | None = None,
                  window: TemporalWindow | None = None, centroids: np.ndarray | None = None,
                  theta: float = 0.5) -> int:
    """Stand-in for a trained action classifier.

    ``oracle`` returns the class of the best-overlapping instance (background
    when nothing overlaps). ``centroid`` picks the class centroid with the
    highest cosine similarity, or background if that similarity is below
    ``theta``.
    """
    if mode == "oracle":
        if video is None or window is None:
            raise ValueError("oracle classification needs the video and window")
        best_c, best_v = BACKGROUND, 0.0
        for g, c in video.ground_truths:
            val = iou(window, g)
            if val > best_v:
                best_c, best_v = c, val
        return best_c
    if mode == "centroid":
        if centroids is None or feature is None:
            raise ValueError("centroid classification needs a feature and centroids")
        f = np.asarray(feature, dtype=np.float64)
        norms = np.linalg.norm(centroids, axis=1) * np.linalg.norm(f)
        sims = centroids @ f / np.where(norms > 0, norms, 1.0)
        c = int(np.argmax(sims))
        return c if sims[c] >= theta else BACKGROUND
    raise ValueError(f"unknown classifier mode {mode!r}")


def proposals_csv(proposals: Iterable[Proposal]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROPOSAL_FIELDS)
    for p in proposals:
        fw = p.final_window
        w.writerow([p.video_id, fw.left, fw.right, repr(float(p.score)), int(p.is_trigger), p.class_id])
    return buf.getvalue()


class ProposalFormatError(ValueError):
    pass


def parse_proposals_csv(text: str) -> list[Proposal]:
    """Parse a proposal file; malformed rows raise with their line number."""
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        return []
    if tuple(rows[0]) != PROPOSAL_FIELDS:
        raise ProposalFormatError(f"line 1: expected header {','.join(PROPOSAL_FIELDS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(PROPOSAL_FIELDS):
            raise ProposalFormatError(f"line {lineno}: expected {len(PROPOSAL_FIELDS)} fields, got {len(row)}")
        try:
            vid, left, right, score, trig, cls = row
            score_f = float(score)
            if not np.isfinite(score_f):
                raise ValueError("score is not finite")
            if trig not in ("0", "1"):
                raise ValueError("is_trigger must be 0 or 1")
            out.append(Proposal(vid, TemporalWindow(int(left), int(right)), score_f, trig == "1", int(cls)))
        except ValueError as exc:
            raise ProposalFormatError(f"line {lineno}: {exc}") from None
    return out


def curve_csv(points, x_name: str = "x", y_name: str = "y") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([x_name, y_name])
    for x, y in points:
        w.writerow([repr(float(x)), repr(float(y))])
    return buf.getvalue()


# Feature mode and whether boundary regression runs, per ablation variant.
ABLATION_SWITCHES = {
    "full": (FeatureMode.AVERAGE_POOL, True),
    "no-pool": (FeatureMode.UNIFORM_SAMPLE_16, True),
    "no-pool-no-rgn": (FeatureMode.UNIFORM_SAMPLE_16, False),
}


def detect_video(video: VideoRecord, q_nets: list[Network], env_cfg: EpisodeConfig,
                 regressors: list[Network] | None = None, bonus: float = TRIGGER_BONUS):
    """Sweep one video with each class model.

    Returns the pooled, ranked proposals (tagged with the class of the model
    that produced them) and the search traces of each model.
    """
    props, traces = [], []
    scale = feature_scale_for(env_cfg, video.dim)
    for c, net in enumerate(q_nets):
        run = test_search(video.restricted_to(c), QPolicy(net), env_cfg)
        found = score_proposals(video.id, run, bonus, class_id=c)
        if regressors is not None:
            found = refine_proposals(found, regressors[c], {video.id: video}, env_cfg.feature_mode,
                                     env_cfg.transform.min_span, scale)
        props.extend(found)
        traces.append(run)
    return rank(props), traces


def top_k(proposals: Iterable[Proposal], k: int) -> list[Proposal]:
    """The ``k`` best proposals of every video."""
    return [p for ps in group_by_video(proposals).values() for p in ps[:k]]


def relabel(proposals: Iterable[Proposal], videos: dict[str, VideoRecord], classifier: str = "oracle",
            centroids: np.ndarray | None = None, theta: float = 0.5) -> list[Proposal]:
    """Assign each proposal the class chosen by the classifier stub."""
    out = []
    for p in proposals:
        v, w = videos[p.video_id], p.final_window
        feat = window_feature(v, w, FeatureMode.AVERAGE_POOL) if classifier == "centroid" else None
        c = classify_stub(feat, classifier, video=v, window=w, centroids=centroids, theta=theta)
        out.append(replace(p, class_id=c))
    return out


def map_at_k(proposals: list[Proposal], videos: list[VideoRecord], class_count: int, k: int,
             classifier: str = "oracle", centroids: np.ndarray | None = None, theta: float = 0.5) -> float:
    """mAP@0.5 with a fixed budget of ``k`` proposals per video."""
    kept = top_k(proposals, k)
    labelled = relabel(kept, {v.id: v for v in videos}, classifier, centroids, theta)
    return map_at_05(labelled, videos, class_count)


def ablation_study(train: list[VideoRecord], test: list[VideoRecord], class_count: int,
                   train_cfg, env_cfg: EpisodeConfig, k: int = 20) -> dict[str, float]:
    """mAP@0.5 of the three ablation variants with the oracle classifier.

    Two sets of class models are trained, one per feature mode; the two
    uniform-sampling variants share theirs and differ only in refinement.
    """
    from .trainer import train_class_model

    models = {}
    for mode in (FeatureMode.AVERAGE_POOL, FeatureMode.UNIFORM_SAMPLE_16):
        cfg = replace(env_cfg, feature_mode=mode)
        models[mode] = [train_class_model(train, c, train_cfg, cfg) for c in range(class_count)]
    out = {}
    for name, (mode, regress) in ABLATION_SWITCHES.items():
        cfg = replace(env_cfg, feature_mode=mode)
        ms = models[mode]
        props = []
        for v in test:
            found, _ = detect_video(v, [m.q_net for m in ms], cfg, [m.regressor for m in ms] if regress else None)
            props.extend(found)
        out[name] = map_at_k(props, test, class_count, k)
    return out
