"""The scene generator: determinism, label/overlap consistency, occlusion
structure, and feature-store round-trips."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from exemdet.errors import DataContractError
from exemdet.geometry import Box, iou
from exemdet.levels import LEVEL_CHANNELS, LEVELS, SPATIAL
from exemdet.synth import (LABEL_NEGATIVE, LABEL_POSITIVE, TAU_NEG, TAU_POS,
                           PyramidFeatures, SceneSpec, collect_background_features,
                           collect_crops, crop_exemplar_features, generate_dataset,
                           read_feature_store, read_ground_truth, substream,
                           write_feature_store, write_ground_truth)


def small_spec(**overrides):
    defaults = dict(seed=123, num_scenes=6)
    defaults.update(overrides)
    return SceneSpec(**defaults)


class TestIouOracle:
    def test_identical_boxes(self):
        b = Box(3.0, 4.0, 10.0, 20.0)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 1, 1)) == 0.0

    def test_hand_case_third(self):
        # 2x2 squares offset by 1: intersection 2, union 6.
        assert_allclose(iou(Box(0, 0, 2, 2), Box(1, 0, 2, 2)), 1.0 / 3.0, rtol=1e-15)

    def test_touching_edges_count_as_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(1, 0, 1, 1)) == 0.0

    def test_box_rejects_nonpositive_extent(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0.0, 1.0)


class TestDeterminism:
    def test_same_seed_is_bit_identical(self):
        spec = small_spec()
        train_a, eval_a = generate_dataset(spec)
        train_b, eval_b = generate_dataset(spec)
        for sa, sb in zip(train_a + eval_a, train_b + eval_b):
            assert [p.box for p in sa.pedestrians] == [p.box for p in sb.pedestrians]
            assert [p.label for p in sa.proposals] == [p.label for p in sb.proposals]
            for pa, pb in zip(sa.proposals, sb.proposals):
                assert pa.features.allclose(pb.features)

    def test_substream_is_reproducible_and_cell_distinct(self):
        a = substream(9, 2, 0).standard_normal(8)
        b = substream(9, 2, 0).standard_normal(8)
        c = substream(9, 2, 1).standard_normal(8)
        d = substream(9, 3, 0).standard_normal(8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_train_and_eval_splits_differ(self):
        train, evaluation = generate_dataset(small_spec())
        assert not train[0].proposals[0].features.allclose(evaluation[0].proposals[0].features)

    def test_different_seeds_differ_in_bytes_but_not_in_volume(self):
        train_a, _ = generate_dataset(small_spec(seed=1, num_scenes=30))
        train_b, _ = generate_dataset(small_spec(seed=2, num_scenes=30))
        count_a = sum(len(s.proposals) for s in train_a)
        count_b = sum(len(s.proposals) for s in train_b)
        assert abs(count_a - count_b) / max(count_a, count_b) < 0.10
        assert not train_a[0].proposals[0].features.allclose(train_b[0].proposals[0].features)


class TestLabelContracts:
    def test_overlaps_match_labels_and_thresholds(self):
        train, evaluation = generate_dataset(small_spec())
        for scene in train + evaluation:
            for prop in scene.proposals:
                if prop.label == LABEL_POSITIVE:
                    assert prop.iou_with_gt > TAU_POS
                else:
                    assert prop.iou_with_gt < TAU_NEG
                if prop.iou_with_gt > 0.0:
                    assert prop.gt_box is not None
                    best = max(iou(prop.box, g) for g in scene.gt_boxes)
                    assert_allclose(prop.iou_with_gt, best, rtol=1e-12)
                    assert_allclose(iou(prop.box, prop.gt_box), best, rtol=1e-12)

    def test_recorded_iou_equals_geometric_iou(self):
        train, _ = generate_dataset(small_spec())
        checked = 0
        for scene in train:
            for prop in scene.proposals:
                if prop.gt_box is not None:
                    assert_allclose(iou(prop.box, prop.gt_box), prop.iou_with_gt, rtol=1e-12)
                    checked += 1
        assert checked > 10

    def test_requested_bands_are_respected(self):
        spec = small_spec(num_scenes=12, proposal_iou_mix=(((0.7, 0.9), 1.0), ((0.05, 0.2), 1.0)))
        train, _ = generate_dataset(spec)
        positives = [p.iou_with_gt for s in train for p in s.proposals
                     if p.label == LABEL_POSITIVE]
        negatives = [p.iou_with_gt for s in train for p in s.proposals
                     if p.label == LABEL_NEGATIVE and p.mode_id is None]
        assert positives and negatives
        assert all(0.7 < v <= 0.9 for v in positives)
        # A negative may accidentally graze another pedestrian, so allow a
        # slightly wider envelope than the requested band.
        near_ped = [v for v in negatives if v > 0.0]
        assert all(v < TAU_NEG for v in negatives)
        assert np.mean([0.05 <= v <= 0.2 for v in near_ped]) > 0.8

    def test_straddling_band_is_rejected(self):
        with pytest.raises(DataContractError, match="unlabeled zone"):
            generate_dataset(small_spec(proposal_iou_mix=(((0.3, 0.7), 1.0),)))

    def test_threshold_pinned_degenerate_bands_rejected(self):
        with pytest.raises(DataContractError):
            generate_dataset(small_spec(proposal_iou_mix=(((0.6, 0.6), 1.0),)))
        with pytest.raises(DataContractError):
            generate_dataset(small_spec(proposal_iou_mix=(((0.4, 0.4), 1.0),)))

    def test_positive_modes_are_uniform_within_three_sigma(self):
        # One positive per pedestrian makes the mode draws i.i.d. uniform.
        spec = SceneSpec(seed=77, num_scenes=125, pedestrians_per_scene=(4, 4),
                         proposal_iou_mix=(((0.65, 1.0), 1.0),),
                         proposals_per_pedestrian=1,
                         background_negatives_per_scene=0)
        train, _ = generate_dataset(spec)
        modes = [p.mode_id for s in train for p in s.proposals if p.label == LABEL_POSITIVE]
        assert len(modes) == 500
        counts = np.bincount(modes, minlength=8)
        expected = len(modes) / 8.0
        sigma = np.sqrt(len(modes) * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - expected) <= 3.0 * sigma)


class TestSceneStructure:
    def test_pedestrians_stay_on_canvas_and_apart(self):
        train, _ = generate_dataset(small_spec(num_scenes=10))
        for scene in train:
            boxes = scene.gt_boxes
            for b in boxes:
                assert 0.0 <= b.x and b.x + b.w <= 640.0 + 1.0
                assert 0.0 <= b.y and b.y + b.h <= 480.0 + 1.0
            for i, a in enumerate(boxes):
                for b in boxes[i + 1:]:
                    assert iou(a, b) <= 0.3 + 1e-12

    def test_pedestrian_count_range(self):
        spec = small_spec(num_scenes=20, pedestrians_per_scene=(2, 4))
        train, _ = generate_dataset(spec)
        counts = {len(s.pedestrians) for s in train}
        assert counts <= {2, 3, 4}
        assert len(counts) > 1

    def test_occluded_flag_follows_mode(self):
        train, _ = generate_dataset(small_spec(num_scenes=10))
        for scene in train:
            for ped in scene.pedestrians:
                assert ped.occluded == (ped.mode_id in (6, 7))

    def test_occlusion_rewrites_bottom_rows_of_fine_levels(self):
        # Distance from the crop to its prototype, restricted to the occluded
        # region, is near the noise floor for visible pedestrians and far
        # above it for occluded ones.
        spec = small_spec(num_scenes=30)
        from exemdet.synth import _build_palette  # structural white-box check
        palette = _build_palette(spec)
        train, _ = generate_dataset(spec)
        occluded_gaps, visible_gaps = [], []
        for scene in train:
            for ped in scene.pedestrians:
                proto = palette.prototypes[ped.mode_id]
                gap = np.linalg.norm(ped.features.maps[2][:, 4:, :] - proto.maps[2][:, 4:, :])
                (occluded_gaps if ped.occluded else visible_gaps).append(gap)
        assert occluded_gaps and visible_gaps
        assert np.mean(occluded_gaps) > 3.0 * np.mean(visible_gaps)

    def test_positive_features_align_with_own_crop(self):
        train, _ = generate_dataset(small_spec(num_scenes=10))
        same, cross = [], []
        for scene in train:
            crops = {id(p): p.features.maps[5].ravel() for p in scene.pedestrians}
            by_box = {p.box: p for p in scene.pedestrians}
            for prop in scene.proposals:
                v = prop.features.maps[5].ravel()
                if prop.label == LABEL_POSITIVE:
                    ped = by_box[prop.gt_box]
                    c = crops[id(ped)]
                    same.append(v @ c / (np.linalg.norm(v) * np.linalg.norm(c)))
                elif prop.mode_id is None:
                    for c in crops.values():
                        cross.append(v @ c / (np.linalg.norm(v) * np.linalg.norm(c)))
        assert np.mean(same) > 0.8
        assert abs(np.mean(cross)) < 0.3

    def test_crop_lookup_by_gt_box(self):
        train, _ = generate_dataset(small_spec())
        scene = train[0]
        ped = scene.pedestrians[0]
        assert crop_exemplar_features(scene, ped.box) is ped.features

    def test_crop_lookup_unknown_box_raises(self):
        train, _ = generate_dataset(small_spec())
        with pytest.raises(DataContractError, match="no ground-truth box"):
            crop_exemplar_features(train[0], Box(1.0, 2.0, 3.0, 4.0))

    def test_collectors_cover_everything(self):
        train, _ = generate_dataset(small_spec())
        crops = collect_crops(train)
        assert len(crops) == sum(len(s.pedestrians) for s in train)
        negatives = collect_background_features(train)
        assert len(negatives) == sum(1 for s in train for p in s.proposals
                                     if p.label == LABEL_NEGATIVE)


class TestSpecValidation:
    @pytest.mark.parametrize("overrides", [
        {"num_scenes": 0},
        {"pedestrians_per_scene": (0, 2)},
        {"pedestrians_per_scene": (3, 2)},
        {"appearance_modes": 0},
        {"occluded_mode_ids": (9,)},
        {"background_clutter": 1.5},
        {"noise_sigma": -0.1},
        {"proposal_iou_mix": ()},
        {"proposal_iou_mix": (((0.8, 0.7), 1.0),)},
        {"proposal_iou_mix": (((0.0, 0.3), 0.0),)},
    ])
    def test_bad_spec_rejected(self, overrides):
        with pytest.raises(DataContractError):
            small_spec(**overrides)


class TestPyramidValidation:
    def test_missing_level_rejected(self):
        maps = {lv: np.zeros((LEVEL_CHANNELS[lv], SPATIAL, SPATIAL)) for lv in LEVELS}
        del maps[3]
        with pytest.raises(DataContractError, match="levels"):
            PyramidFeatures(maps)

    def test_wrong_channel_count_rejected(self):
        maps = {lv: np.zeros((LEVEL_CHANNELS[lv], SPATIAL, SPATIAL)) for lv in LEVELS}
        maps[2] = np.zeros((5, SPATIAL, SPATIAL))
        with pytest.raises(DataContractError, match="level 2"):
            PyramidFeatures(maps)


class TestFeatureStoreFormat:
    def test_round_trip_preserves_everything(self, tmp_path):
        train, _ = generate_dataset(small_spec())
        path = tmp_path / "train.egfs"
        write_feature_store(path, train)
        loaded = read_feature_store(path)
        assert len(loaded) == len(train)
        for orig, back in zip(train, loaded):
            assert back.index == orig.index
            assert len(back.pedestrians) == len(orig.pedestrians)
            for go, gb in zip(orig.pedestrians, back.pedestrians):
                assert gb.box == go.box
                assert gb.mode_id == go.mode_id
                assert gb.occluded == go.occluded
                assert gb.features.allclose(go.features)
            assert len(back.proposals) == len(orig.proposals)
            for po, pb in zip(orig.proposals, back.proposals):
                assert pb.box == po.box
                assert pb.gt_box == po.gt_box
                assert pb.iou_with_gt == po.iou_with_gt
                assert pb.label == po.label
                assert pb.mode_id == po.mode_id
                assert pb.features.allclose(po.features)

    def test_rewrite_is_byte_identical(self, tmp_path):
        train, _ = generate_dataset(small_spec())
        first, second = tmp_path / "a.egfs", tmp_path / "b.egfs"
        write_feature_store(first, train)
        write_feature_store(second, read_feature_store(first))
        assert first.read_bytes() == second.read_bytes()

    def test_magic_bytes(self, tmp_path):
        train, _ = generate_dataset(small_spec(num_scenes=1))
        path = tmp_path / "x.egfs"
        write_feature_store(path, train)
        assert path.read_bytes()[:4] == b"EGFS"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.egfs"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataContractError, match="magic"):
            read_feature_store(path)

    def test_truncation_rejected(self, tmp_path):
        train, _ = generate_dataset(small_spec(num_scenes=1))
        path = tmp_path / "x.egfs"
        write_feature_store(path, train)
        raw = path.read_bytes()
        path.write_bytes(raw[:-11])
        with pytest.raises(DataContractError, match="truncated"):
            read_feature_store(path)

    def test_scene_count_survives_even_for_empty_scenes(self, tmp_path):
        from exemdet.synth import Scene
        scenes = [Scene(0, [], []), Scene(1, [], []), Scene(2, [], [])]
        train, _ = generate_dataset(small_spec(num_scenes=1))
        scenes[1] = Scene(1, [], train[0].proposals)
        path = tmp_path / "sparse.egfs"
        write_feature_store(path, scenes)
        loaded = read_feature_store(path)
        assert [s.index for s in loaded] == [0, 1, 2]
        assert len(loaded[0].proposals) == 0
        assert len(loaded[1].proposals) == len(train[0].proposals)


class TestGroundTruthSidecar:
    def test_round_trip(self, tmp_path):
        train, _ = generate_dataset(small_spec())
        path = tmp_path / "gt.json"
        write_ground_truth(path, train)
        loaded = read_ground_truth(path)
        for scene in train:
            entries = loaded[scene.index]
            assert [b for b, _ in entries] == scene.gt_boxes
            assert [o for _, o in entries] == [p.occluded for p in scene.pedestrians]

    def test_output_is_deterministic(self, tmp_path):
        train, _ = generate_dataset(small_spec())
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_ground_truth(a, train)
        write_ground_truth(b, train)
        assert a.read_bytes() == b.read_bytes()
