import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptprop.environment import EpisodeConfig, SearchTrace, VisitedWindow
from adaptprop.evaluation import (
    OraclePolicy,
    Proposal,
    ProposalFormatError,
    average_precision,
    classify_stub,
    group_by_video,
    map_at_05,
    oracle_policy,
    parse_proposals_csv,
    proposals_csv,
    recall_at,
    recall_vs_iou,
    recall_vs_num_proposals,
    score_proposals,
    temporal_nms,
)
from adaptprop.features import BACKGROUND, FeatureMode, class_embeddings, window_feature
from adaptprop.geometry import REGULAR_ACTIONS, AgentAction, TemporalWindow, TransformConfig, apply_transform, iou
from conftest import make_video

W = TemporalWindow


def visited(window, action, q):
    return VisitedWindow(0, 0, window, action, 0.0, 0.0, None if q is None else np.array(q, dtype=float))


def trace(*items):
    t = SearchTrace(0, 0)
    t.visited.extend(items)
    return [t]


def test_scores_follow_q_without_triggers():
    tr = trace(visited(W(0, 10), AgentAction.MOVE_LEFT, [1, 2]),
               visited(W(5, 15), AgentAction.SHRINK, [5, 0]),
               visited(W(9, 19), AgentAction.JUMP, [3, 3]))
    props = score_proposals("v", tr)
    assert [p.score for p in props] == [5.0, 3.0, 2.0]


def test_trigger_bonus_dominates():
    tr = trace(visited(W(0, 10), AgentAction.MOVE_LEFT, [100.0]),
               visited(W(5, 15), AgentAction.TRIGGER, [-50.0]))
    assert score_proposals("v", tr)[0].window == W(5, 15)
    no_bonus = score_proposals("v", tr, bonus=0.0)
    assert no_bonus[0].window == W(0, 10)


def props_for(windows, vid="v", trig=False):
    n = len(windows)
    return [Proposal(vid, w, float(n - i), trig) for i, w in enumerate(windows)]


def test_recall_examples():
    gts = {"v": [W(0, 10), W(50, 60)]}
    assert recall_at({"v": props_for(gts["v"])}, gts, 1.0, 2) == 1.0
    assert recall_at({}, gts, 0.5, 10) == 0.0
    # one top proposal overlapping the first GT with IoU 0.6
    p = W(0, 6)
    assert iou(p, W(0, 10)) == pytest.approx(0.6)
    assert recall_at({"v": props_for([p, W(50, 60)])}, gts, 0.5, 1) == 0.5


def test_recall_counts_coverage_not_assignment():
    gts = {"v": [W(0, 10), W(0, 11)]}
    assert recall_at({"v": props_for([W(0, 10)])}, gts, 0.5, 1) == 1.0


@st.composite
def proposal_sets(draw):
    n_videos = draw(st.integers(1, 3))
    props, gts = {}, {}
    for v in range(n_videos):
        def win():
            l = draw(st.integers(0, 90))
            return W(l, draw(st.integers(l + 1, 100)))

        gts[f"v{v}"] = [win() for _ in range(draw(st.integers(1, 3)))]
        props[f"v{v}"] = props_for([win() for _ in range(draw(st.integers(0, 8)))], f"v{v}")
    return props, gts


@given(proposal_sets(), st.integers(1, 8), st.integers(1, 8), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_recall_monotone(data, k1, k2, t1, t2):
    props, gts = data
    k_lo, k_hi = sorted((k1, k2))
    t_lo, t_hi = sorted((t1, t2))
    assert recall_at(props, gts, t_lo, k_lo) <= recall_at(props, gts, t_lo, k_hi)
    assert recall_at(props, gts, t_hi, k_lo) <= recall_at(props, gts, t_lo, k_lo)


def test_curves():
    gts = {"v": [W(0, 10), W(50, 60)]}
    props = {"v": props_for([W(0, 8), W(100, 110), W(50, 57)])}
    by_k = recall_vs_num_proposals(props, gts, 0.5, [1, 2, 3])
    assert [r for _, r in by_k] == [0.5, 0.5, 1.0]
    assert [n for n, _ in by_k] == [1.0, 2.0, 3.0]
    by_iou = recall_vs_iou(props, gts, k=100)
    assert len(by_iou) == 20 and by_iou[0][0] == 0.05 and by_iou[-1][0] == 1.0
    assert by_iou[0][1] >= by_iou[-1][1]


def brute_ap(tp_flags, n_gt):
    """All-points AP straight from the precision-recall points."""
    points = []
    hits = 0
    for i, tp in enumerate(tp_flags, start=1):
        hits += tp
        points.append((hits / n_gt, hits / i))
    ap, prev = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        if r == prev:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


def test_perfect_detections_ap_one():
    gts = {"a": [W(0, 10)], "b": [W(20, 40), W(60, 90)]}
    dets = [Proposal(v, w, 1.0) for v, ws in gts.items() for w in ws]
    assert average_precision(dets, gts) == 1.0


def test_duplicate_detection_is_false_positive():
    gts = {"a": [W(0, 10), W(50, 60)]}
    dets = [Proposal("a", W(0, 10), 3.0), Proposal("a", W(0, 9), 2.0), Proposal("a", W(50, 60), 1.0)]
    ap = average_precision(dets, gts)
    assert ap < 1.0
    assert ap == pytest.approx(brute_ap([1, 0, 1], 2))


def test_toy_case_against_enumeration():
    # three detections, two instances: TP, FP, TP by IoU with a hand check
    gts = {"a": [W(0, 100)], "b": [W(0, 100)]}
    dets = [Proposal("a", W(0, 90), 0.9), Proposal("b", W(60, 100), 0.8), Proposal("b", W(10, 100), 0.7)]
    assert [iou(d.window, gts[d.video_id][0]) >= 0.5 for d in dets] == [True, False, True]
    # precision/recall points: (0.5, 1), (0.5, 0.5), (1, 2/3) -> 0.5 * 1 + 0.5 * 2/3
    assert average_precision(dets, gts) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert brute_ap([1, 0, 1], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)


@settings(max_examples=50)
@given(st.lists(st.booleans(), min_size=1, max_size=8), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_ap_matches_brute_force(hits, extra_gt, seed):
    # a TP detection is an exact copy of its own instance; an FP sits far away
    n_gt = sum(hits) + extra_gt
    if n_gt == 0:
        return
    gts = {"v": [W(1000 * i, 1000 * i + 10) for i in range(n_gt)]}
    dets, j = [], 0
    for i, hit in enumerate(hits):
        w = gts["v"][j] if hit else W(500 + 1000 * i, 510 + 1000 * i)
        j += hit
        dets.append(Proposal("v", w, float(len(hits) - i)))
    assert average_precision(dets, gts) == pytest.approx(brute_ap([int(h) for h in hits], n_gt))


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=3, unique=True))
def test_ap_depends_only_on_rank_order(scores):
    gts = {"a": [W(0, 100)], "b": [W(0, 100)]}
    wins = [("a", W(0, 90)), ("b", W(60, 100)), ("b", W(10, 100))]
    dets = [Proposal(v, w, s) for (v, w), s in zip(wins, scores)]
    order = np.argsort(scores)
    squashed = [Proposal(v, w, float(np.searchsorted(np.sort(scores), s))) for (v, w), s in zip(wins, scores)]
    assert average_precision(dets, gts) == average_precision(squashed, gts)
    assert len(order) == 3


def test_map_oracle_classifier_on_ground_truth(clean_videos):
    dets = []
    for v in clean_videos:
        for g, _ in v.ground_truths:
            c = classify_stub(None, "oracle", video=v, window=g)
            dets.append(Proposal(v.id, g, 1.0, True, c))
    assert map_at_05(dets, clean_videos, 2) == 1.0


def test_nms_drops_overlaps():
    props = [Proposal("v", W(0, 100), 3.0), Proposal("v", W(5, 100), 2.0), Proposal("v", W(200, 300), 1.0)]
    kept = temporal_nms(props, 0.5)
    assert [p.window for p in kept] == [W(0, 100), W(200, 300)]


def test_oracle_triggers_on_ground_truth():
    v = make_video(gts=((100, 200, 0),))
    assert oracle_policy(v, W(100, 200)) == AgentAction.TRIGGER


def test_oracle_jumps_when_out_of_reach():
    v = make_video(gts=((100, 200, 0),))
    assert oracle_policy(v, W(600, 664)) == AgentAction.JUMP


def test_oracle_improves_right_half_overlap():
    v = make_video(gts=((100, 200, 0),))
    w = W(170, 260)
    before = iou(w, W(100, 200))
    cfg = TransformConfig()
    gains = {a: iou(apply_transform(w, a, cfg, 1000), W(100, 200)) for a in REGULAR_ACTIONS}
    assert max(gains.values()) > before
    chosen = oracle_policy(v, w)
    assert gains[chosen] == max(gains.values())


def test_oracle_policy_callable_interface():
    v = make_video(gts=((100, 200, 0),))
    action, q = OraclePolicy()(v, W(100, 200), None)
    assert action == AgentAction.TRIGGER and q is None


def test_classifier_stub(clean_spec, clean_videos):
    emb = class_embeddings(clean_spec.seed, clean_spec.class_count, clean_spec.dim)
    v = next(v for v in clean_videos if v.ground_truths)
    g, c = v.ground_truths[0]
    inner = W(g.left + clean_spec.ramp, g.right - clean_spec.ramp)
    assert classify_stub(None, "oracle", video=v, window=inner) == c
    f = window_feature(v, inner, FeatureMode.AVERAGE_POOL)
    assert classify_stub(f, "centroid", centroids=emb[:-1], theta=0.5) == c
    bg = emb[-1]
    cos = emb[:-1] @ bg
    assert np.all(cos < 0.5)
    assert classify_stub(bg, "centroid", centroids=emb[:-1], theta=0.5) == BACKGROUND
    far = W(v.frame_count - 1, v.frame_count)
    if all(iou(far, gw) == 0 for gw in v.gt_windows):
        assert classify_stub(None, "oracle", video=v, window=far) == BACKGROUND


def test_proposal_csv_roundtrip():
    props = [Proposal("vid_1", W(3, 40), 1000001.25, True, 1), Proposal("vid_2", W(0, 9), -0.5, False, -1)]
    back = parse_proposals_csv(proposals_csv(props))
    assert back == props


def test_proposal_csv_errors_name_line():
    text = proposals_csv([Proposal("v", W(0, 10), 1.0)]) + "v,5,2,1.0,0,0\n"
    with pytest.raises(ProposalFormatError, match="line 3"):
        parse_proposals_csv(text)
    with pytest.raises(ProposalFormatError, match="line 2"):
        parse_proposals_csv("video_id,left,right,score,is_trigger,class_id\nv,1,2\n")
    assert parse_proposals_csv("") == []


def test_group_by_video_ranks():
    props = [Proposal("a", W(0, 1), 1.0), Proposal("a", W(0, 2), 5.0), Proposal("b", W(0, 3), 2.0)]
    g = group_by_video(props)
    assert [p.score for p in g["a"]] == [5.0, 1.0]
