"""Scoring fusion, greedy matching, and miss-rate-curve oracles."""

import math

import numpy as np
import pytest

from exemdet.contrastive import (ContrastiveParams, TrainSchedule,
                                 classification_logit,
                                 compute_dictionary_embeddings, init_params)
from exemdet.errors import DataContractError
from exemdet.evaluate import (FPPI_ANCHORS, Detection, MatchResult,
                              MissRateCurve, ScoreWeights, curve_csv,
                              detection_ranking, evaluate_scenes,
                              format_curve_report, fuse_confidence,
                              match_detections, mr2_curve, scene_ground_truth,
                              score_proposal, score_scene)
from exemdet.exemplars import build_dictionary
from exemdet.geometry import Box, iou
from exemdet.hnsw import HnswParams, build_index, sigmoid
from exemdet.levels import LEVELS, route_level
from exemdet.synth import (LABEL_POSITIVE, SceneSpec, collect_crops,
                           generate_dataset)


def det(box: Box, conf: float) -> Detection:
    return Detection(box=box, p_cls=min(max(conf, 0.0), 1.0),
                     d_c=float("nan"), d_a=float("nan"), confidence=conf)


def shifted_box(gt: Box, target_iou: float) -> Box:
    """Box at the requested overlap with ``gt`` via a pure x shift."""
    d = gt.w * (1.0 - target_iou) / (1.0 + target_iou)
    return Box(gt.x + d, gt.y, gt.w, gt.h)


@pytest.fixture(scope="module")
def scored_world():
    spec = SceneSpec(seed=31, num_scenes=6, pedestrians_per_scene=(2, 3))
    train, holdout = generate_dataset(spec)
    store = init_params(5)
    dictionary = build_dictionary(collect_crops(train), n_clusters=4, seed=1)
    compute_dictionary_embeddings(dictionary, store)
    indices = {lv: build_index(dictionary, lv, HnswParams(seed=2))
               for lv in LEVELS}
    return holdout, store, dictionary, indices


# -- confidence fusion -------------------------------------------------------

def test_fusion_hand_values():
    verbatim = ScoreWeights(mu=0.2, lam=0.1, mode="verbatim")
    similarity = ScoreWeights(mu=0.2, lam=0.1, mode="similarity")
    assert math.isclose(fuse_confidence(0.8, 0.3, 0.5, verbatim), 0.67,
                        rel_tol=1e-12)
    assert math.isclose(fuse_confidence(0.8, 0.3, 0.5, similarity), 0.75,
                        rel_tol=1e-12)


def test_fusion_degenerate_weights_return_classifier_score():
    for mode in ("verbatim", "similarity"):
        weights = ScoreWeights(mu=0.0, lam=0.0, mode=mode)
        assert fuse_confidence(0.8125, 0.3, 0.5, weights) == 0.8125


def test_fusion_is_linear_in_components():
    rng = np.random.default_rng(1)
    weights = ScoreWeights(mu=0.25, lam=0.35, mode="verbatim")
    for _ in range(20):
        p, d_c, d_a = rng.random(3)
        expected = 0.4 * p + 0.25 * d_c + 0.35 * d_a
        assert math.isclose(fuse_confidence(p, d_c, d_a, weights), expected,
                            rel_tol=1e-12)


def test_score_weight_validation():
    ScoreWeights()  # defaults valid
    with pytest.raises(DataContractError, match="mu"):
        ScoreWeights(mu=-0.1)
    with pytest.raises(DataContractError, match="lam"):
        ScoreWeights(lam=1.5)
    with pytest.raises(DataContractError, match="<= 1"):
        ScoreWeights(mu=0.7, lam=0.4)
    with pytest.raises(DataContractError, match="mode"):
        ScoreWeights(mode="additive")


# -- proposal scoring --------------------------------------------------------

def test_score_without_indices_is_the_classifier_probability(scored_world):
    scenes, store, _, _ = scored_world
    prop = scenes[0].proposals[0]
    detection = score_proposal(prop, store, None, ScoreWeights(mu=0.0, lam=0.0))
    level = route_level(prop.box)
    expected = sigmoid(float(classification_logit(prop.features, level, store).data))
    assert detection.confidence == expected
    assert detection.p_cls == expected
    assert math.isnan(detection.d_c) and math.isnan(detection.d_a)


def test_score_with_indices_records_all_components(scored_world):
    scenes, store, _, indices = scored_world
    weights = ScoreWeights(mu=0.2, lam=0.1, mode="similarity")
    prop = scenes[0].proposals[0]
    detection = score_proposal(prop, store, indices, weights)
    assert 0.0 < detection.d_c < 1.0
    assert 0.0 < detection.d_a < 1.0
    assert detection.confidence == fuse_confidence(
        detection.p_cls, detection.d_c, detection.d_a, weights)


def test_zero_weights_with_indices_matches_no_index_scoring_bitwise(scored_world):
    scenes, store, _, indices = scored_world
    zero = ScoreWeights(mu=0.0, lam=0.0)
    for scene in scenes[:3]:
        with_index = score_scene(scene, store, indices, zero)
        without = score_scene(scene, store, None, zero)
        assert [d.confidence for d in with_index] == \
            [d.confidence for d in without]
        assert detection_ranking(with_index) == detection_ranking(without)


def test_score_validation(scored_world):
    scenes, store, _, indices = scored_world
    prop = scenes[0].proposals[0]
    with pytest.raises(DataContractError, match="indices are required"):
        score_proposal(prop, store, None, ScoreWeights(mu=0.2, lam=0.0))
    heads_only = init_params(5, include_transform=False)
    with pytest.raises(DataContractError, match="trunk"):
        score_proposal(prop, heads_only, indices, ScoreWeights())


# -- greedy matching ---------------------------------------------------------

def test_perfect_detections_match_every_ground_truth():
    gts = [Box(0, 0, 10, 20), Box(50, 0, 10, 20)]
    dets = [det(gts[0], 0.9), det(gts[1], 0.8)]
    result = match_detections(dets, gts)
    assert sorted(result.pairs) == [(0, 0), (1, 1)]
    assert result.false_positives == [] and result.missed == []


def test_no_detections_means_every_ground_truth_missed():
    gts = [Box(0, 0, 10, 20), Box(50, 0, 10, 20)]
    result = match_detections([], gts)
    assert result.pairs == [] and result.false_positives == []
    assert result.missed == [0, 1]


def test_second_detection_on_a_taken_ground_truth_is_a_false_positive():
    gt = Box(0, 0, 10, 10)
    first = shifted_box(gt, 0.9)
    second = shifted_box(gt, 0.8)
    assert math.isclose(iou(first, gt), 0.9, rel_tol=1e-12)
    assert math.isclose(iou(second, gt), 0.8, rel_tol=1e-12)
    result = match_detections([det(first, 0.9), det(second, 0.8)], [gt])
    assert result.pairs == [(0, 0)]
    assert result.false_positives == [1]
    assert result.missed == []


def test_each_detection_takes_the_highest_overlap_ground_truth():
    gt_far = Box(0, 0, 10, 10)
    gt_near = Box(30, 0, 10, 10)
    detection = det(shifted_box(gt_near, 0.9), 0.9)
    weaker = Box(32.5, 0, 10, 10)
    assert iou(detection.box, weaker) < iou(detection.box, gt_near)
    result = match_detections([detection], [weaker, gt_far, gt_near])
    assert result.pairs == [(0, 2)]


def test_confidence_order_beats_overlap_order():
    gt = Box(0, 0, 10, 10)
    weak_overlap_strong_conf = det(shifted_box(gt, 0.6), 0.9)
    strong_overlap_weak_conf = det(shifted_box(gt, 0.9), 0.8)
    result = match_detections([weak_overlap_strong_conf,
                               strong_overlap_weak_conf], [gt])
    assert result.pairs == [(0, 0)]
    assert result.false_positives == [1]


def test_equal_confidence_ties_break_on_box_position():
    gt = Box(0, 0, 10, 10)
    left = det(shifted_box(gt, 0.8), 0.7)
    right = det(Box(left.box.x + 0.5, 0, 10, 10), 0.7)
    for ordering in ([left, right], [right, left]):
        result = match_detections(ordering, [gt])
        matched_box = ordering[result.pairs[0][0]].box
        assert matched_box == left.box


def test_below_threshold_overlap_does_not_match():
    gt = Box(0, 0, 10, 10)
    result = match_detections([det(shifted_box(gt, 0.4), 0.9)], [gt],
                              iou_threshold=0.5)
    assert result.pairs == []
    assert result.false_positives == [0] and result.missed == [0]


# -- miss-rate curve ---------------------------------------------------------

def test_curve_anchors_are_the_nine_log_spaced_points():
    np.testing.assert_allclose(FPPI_ANCHORS, np.logspace(-2, 0, 9), rtol=0)
    assert FPPI_ANCHORS[0] == 0.01 and FPPI_ANCHORS[-1] == 1.0


def test_two_scene_hand_case():
    # Scene 0: one gt, detected at confidence 0.9. Scene 1: one gt missed,
    # plus a false positive at confidence 0.8. Thresholds: above 0.9 nothing;
    # at 0.9 one hit (miss 0.5, fppi 0); at 0.8 one extra false positive
    # (miss 0.5, fppi 0.5). Every anchor therefore samples miss rate 0.5.
    gt0, gt1 = Box(0, 0, 10, 20), Box(100, 0, 10, 20)
    dets0 = [det(gt0, 0.9)]
    dets1 = [det(Box(200, 0, 10, 20), 0.8)]
    curve = mr2_curve([dets0, dets1], [[gt0], [gt1]])
    assert curve.operating_points == [(0.0, 1.0), (0.0, 0.5), (0.5, 0.5)]
    assert np.all(curve.miss_rates == 0.5)
    assert math.isclose(curve.mr2, 0.5, rel_tol=1e-12)


def test_perfect_detector_scores_zero():
    gts = [[Box(0, 0, 10, 20)], [Box(5, 5, 8, 16)]]
    dets = [[det(gts[0][0], 0.9)], [det(gts[1][0], 0.95)]]
    curve = mr2_curve(dets, gts)
    assert np.all(curve.miss_rates == 0.0)
    assert curve.mr2 == 0.0


def test_null_detector_scores_one():
    curve = mr2_curve([[], []], [[Box(0, 0, 10, 20)], [Box(5, 5, 8, 16)]])
    assert np.all(curve.miss_rates == 1.0)
    assert curve.mr2 == 1.0


def test_adding_a_top_confidence_false_positive_never_helps():
    gt0, gt1 = Box(0, 0, 10, 20), Box(100, 0, 10, 20)
    base = [[det(gt0, 0.9)], [det(Box(200, 0, 10, 20), 0.8)]]
    worse = [base[0] + [det(Box(300, 0, 10, 20), 1.0)], base[1]]
    gts = [[gt0], [gt1]]
    assert mr2_curve(worse, gts).mr2 >= mr2_curve(base, gts).mr2


def test_detecting_a_previously_missed_ground_truth_never_hurts():
    gt0, gt1 = Box(0, 0, 10, 20), Box(100, 0, 10, 20)
    base = [[det(gt0, 0.9)], []]
    better = [[det(gt0, 0.9)], [det(gt1, 1.0)]]
    gts = [[gt0], [gt1]]
    assert mr2_curve(better, gts).mr2 <= mr2_curve(base, gts).mr2


def test_random_curves_satisfy_the_shape_invariants():
    rng = np.random.default_rng(9)
    for _ in range(25):
        gts, dets = [], []
        for _ in range(4):
            scene_gts = [Box(float(rng.uniform(0, 200)), 0, 10, 20)
                         for _ in range(rng.integers(0, 4))]
            scene_dets = []
            for gt in scene_gts:
                if rng.random() < 0.7:
                    scene_dets.append(det(shifted_box(gt, float(rng.uniform(0.55, 0.95))),
                                          float(rng.random())))
            for _ in range(rng.integers(0, 3)):
                scene_dets.append(det(Box(float(rng.uniform(300, 500)), 0, 10, 20),
                                      float(rng.random())))
            gts.append(scene_gts)
            dets.append(scene_dets)
        if sum(map(len, gts)) == 0:
            continue
        curve = mr2_curve(dets, gts)  # __post_init__ checks shape invariants
        assert 0.0 <= curve.mr2 <= 1.0


def test_ignored_ground_truth_absorbs_detections_silently():
    # The detection on the ignored gt is neither a hit nor a false alarm;
    # the other detection is a plain false positive and the real gt a miss.
    real, ignored = Box(0, 0, 10, 20), Box(100, 0, 10, 20)
    dets = [[det(ignored, 0.9), det(Box(300, 0, 10, 20), 0.8)]]
    curve = mr2_curve(dets, [[real, ignored]], [[False, True]])
    assert curve.operating_points == [(0.0, 1.0), (1.0, 1.0)]
    assert curve.mr2 == 1.0


def test_curve_validation():
    with pytest.raises(DataContractError, match="ground truth"):
        mr2_curve([[]], [[]])
    with pytest.raises(DataContractError, match="align"):
        mr2_curve([[], []], [[Box(0, 0, 1, 2)]])
    with pytest.raises(DataContractError, match="nine"):
        MissRateCurve(anchors=np.ones(8), miss_rates=np.ones(8), mr2=1.0,
                      operating_points=[])
    with pytest.raises(DataContractError, match="increase"):
        MissRateCurve(anchors=FPPI_ANCHORS.copy(),
                      miss_rates=np.linspace(0.1, 0.9, 9), mr2=0.5,
                      operating_points=[])


# -- subset evaluation -------------------------------------------------------

def test_evaluate_scenes_runs_all_subsets(scored_world):
    scenes, store, _, indices = scored_world
    weights = ScoreWeights(mu=0.2, lam=0.1)
    has_occluded = any(p.occluded for s in scenes for p in s.pedestrians)
    assert has_occluded  # the default appearance modes include occluded ones
    curves = {subset: evaluate_scenes(scenes, store, weights, indices,
                                      subset=subset)
              for subset in ("reasonable", "occluded", "all")}
    for curve in curves.values():
        assert 0.0 <= curve.mr2 <= 1.0
    with pytest.raises(DataContractError, match="subset"):
        evaluate_scenes(scenes, store, weights, indices, subset="hard")


def test_evaluation_is_read_only_and_deterministic(scored_world):
    scenes, store, _, indices = scored_world
    weights = ScoreWeights(mu=0.2, lam=0.1)
    a = evaluate_scenes(scenes, store, weights, indices, subset="all")
    b = evaluate_scenes(scenes, store, weights, indices, subset="all")
    assert a.mr2 == b.mr2
    np.testing.assert_array_equal(a.miss_rates, b.miss_rates)
    assert a.operating_points == b.operating_points


def test_zero_weight_evaluation_is_bit_identical_to_no_index_run(scored_world):
    scenes, store, _, indices = scored_world
    zero = ScoreWeights(mu=0.0, lam=0.0)
    with_index = evaluate_scenes(scenes, store, zero, indices, subset="all")
    without = evaluate_scenes(scenes, store, zero, None, subset="all")
    assert with_index.mr2 == without.mr2
    np.testing.assert_array_equal(with_index.miss_rates, without.miss_rates)
    assert with_index.operating_points == without.operating_points


def test_scene_ground_truth_extraction(scored_world):
    scenes, _, _, _ = scored_world
    gts = scene_ground_truth(scenes[0])
    assert len(gts) == len(scenes[0].pedestrians)
    for (box, occluded), ped in zip(gts, scenes[0].pedestrians):
        assert box == ped.box and occluded == ped.occluded


# -- reporting ---------------------------------------------------------------

def test_curve_csv_lists_every_operating_point():
    gt = Box(0, 0, 10, 20)
    curve = mr2_curve([[det(gt, 0.9)]], [[gt]])
    text = curve_csv(curve)
    lines = text.strip().split("\n")
    assert lines[0] == "fppi,miss_rate"
    assert len(lines) == 1 + len(curve.operating_points)
    assert lines[1] == "0,1"


def test_report_contains_all_anchors_and_subsets():
    gt = Box(0, 0, 10, 20)
    curve = mr2_curve([[det(gt, 0.9)]], [[gt]])
    report = format_curve_report("holdout", {"all": curve, "reasonable": curve},
                                 timing_seconds_per_scene=0.01)
    assert "[all]" in report and "[reasonable]" in report
    assert report.count("->") == 2 * 9 + 2  # nine anchors per subset + headers
    assert "10.00 ms" in report
