"""Estimator surface, refit determinism, and the ablation ladder."""

import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from exemdet.errors import ConfigError, DataContractError
from exemdet.evaluate import SUBSETS
from exemdet.levels import LEVELS
from exemdet.model import (ABLATION_ARMS, AblationRow,
                           ExemplarContrastiveDetector, format_ablation_table,
                           run_ablation)
from exemdet.synth import SceneSpec, generate_dataset

FAST = dict(n_clusters=3, offline_steps=12, online_steps=16, random_state=7)


@pytest.fixture(scope="module")
def world():
    spec = SceneSpec(seed=11, num_scenes=6, pedestrians_per_scene=(2, 3))
    train, test = generate_dataset(spec)
    return train, test


@pytest.fixture(scope="module")
def fitted(world):
    train, _ = world
    return ExemplarContrastiveDetector(**FAST).fit(train)


# -- estimator shape ----------------------------------------------------------

def test_get_params_round_trips_through_clone():
    det = ExemplarContrastiveDetector(n_clusters=5, tau=0.3, mu=0.25,
                                      random_state=9)
    copy = clone(det)
    assert copy.get_params() == det.get_params()
    assert copy.n_clusters == 5 and copy.tau == 0.3 and copy.mu == 0.25


def test_set_params_updates_attributes():
    det = ExemplarContrastiveDetector()
    det.set_params(alpha=0.0, use_eci=False)
    assert det.alpha == 0.0 and det.use_eci is False


def test_fit_returns_self_and_exposes_fitted_state(world, fitted):
    train, _ = world
    assert isinstance(fitted, ExemplarContrastiveDetector)
    assert len(fitted.dictionary_) == FAST["n_clusters"]
    assert sorted(fitted.indices_) == list(LEVELS)
    assert len(fitted.offline_log_) == FAST["offline_steps"]
    assert len(fitted.online_log_) == FAST["online_steps"]
    assert all(ex.has_embeddings() for ex in fitted.dictionary_.exemplars)


def test_predict_before_fit_raises():
    det = ExemplarContrastiveDetector()
    with pytest.raises(NotFittedError):
        det.predict([])
    with pytest.raises(NotFittedError):
        det.evaluate([])


def test_fit_rejects_empty_scene_list():
    with pytest.raises(DataContractError, match="at least one scene"):
        ExemplarContrastiveDetector().fit([])


def test_fit_rejects_bad_random_state(world):
    train, _ = world
    with pytest.raises(ConfigError, match="random_state"):
        ExemplarContrastiveDetector(random_state=-1).fit(train)
    with pytest.raises(ConfigError, match="random_state"):
        ExemplarContrastiveDetector(random_state=None).fit(train)


# -- determinism --------------------------------------------------------------

def test_refit_with_same_seed_is_replay_exact(world, fitted):
    train, test = world
    again = ExemplarContrastiveDetector(**FAST).fit(train)
    assert again.params_.data_equal(fitted.params_)
    a = [d.confidence for d in fitted.predict(test)[0]]
    b = [d.confidence for d in again.predict(test)[0]]
    assert a == b


def test_different_seed_changes_the_parameters(world, fitted):
    train, _ = world
    other = ExemplarContrastiveDetector(**{**FAST, "random_state": 8}).fit(train)
    assert not other.params_.data_equal(fitted.params_)


def test_stage_seeds_are_distinct():
    seeds = ExemplarContrastiveDetector(random_state=0)._stage_seeds()
    assert len(set(seeds.values())) == len(seeds)


# -- ablation switches --------------------------------------------------------

def test_baseline_mode_has_no_trunk_or_indices(world):
    train, test = world
    det = ExemplarContrastiveDetector(**{**FAST, "use_transform": False,
                                         "use_offline": False,
                                         "use_eci": False}).fit(train)
    assert det.indices_ is None
    assert not any(k.startswith(("ft.", "proj.")) for k in det.params_.keys())
    detections = det.predict(test)
    assert all(math.isnan(d.d_c) for scene in detections for d in scene)
    with pytest.raises(ConfigError, match="with_eci=False"):
        det.predict(test, with_eci=True)


def test_skipping_pretraining_leaves_the_offline_log_empty(world):
    train, _ = world
    det = ExemplarContrastiveDetector(**{**FAST, "use_offline": False}).fit(train)
    assert det.offline_log_ == []
    assert len(det.online_log_) == FAST["online_steps"]


def test_with_eci_override_controls_distance_fusion(world, fitted):
    _, test = world
    with_d = fitted.predict(test, with_eci=True)
    without = fitted.predict(test, with_eci=False)
    assert all(0.0 < d.d_c < 1.0 for scene in with_d for d in scene)
    assert all(math.isnan(d.d_c) for scene in without for d in scene)


def test_zero_fusion_weights_score_identically_to_no_eci(world):
    train, test = world
    det = ExemplarContrastiveDetector(**{**FAST, "mu": 0.0, "lam": 0.0}).fit(train)
    fused = det.predict(test, with_eci=True)
    plain = det.predict(test, with_eci=False)
    for scene_f, scene_p in zip(fused, plain):
        assert [d.confidence for d in scene_f] == [d.confidence for d in scene_p]
        assert [d.box for d in scene_f] == [d.box for d in scene_p]
    curve_f = det.evaluate(test, with_eci=True)
    curve_p = det.evaluate(test, with_eci=False)
    assert curve_f.mr2 == curve_p.mr2


# -- evaluation surface -------------------------------------------------------

def test_evaluate_covers_every_subset(world, fitted):
    _, test = world
    for subset in SUBSETS:
        curve = fitted.evaluate(test, subset=subset)
        assert 0.0 <= curve.mr2 <= 1.0
        assert curve.miss_rates.shape == (9,)


def test_evaluate_rejects_unknown_subset(world, fitted):
    _, test = world
    with pytest.raises(DataContractError, match="subset"):
        fitted.evaluate(test, subset="nightly")


# -- ablation runner ----------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(world):
    train, test = world
    kwargs = dict(n_clusters=3, offline_steps=10, online_steps=12,
                  random_state=5)
    return run_ablation(train, test, detector_kwargs=kwargs), kwargs


def test_ablation_produces_one_row_per_arm(ablation):
    rows, _ = ablation
    assert [row.arm for row in rows] == list(ABLATION_ARMS)
    for row in rows:
        assert sorted(row.mr2) == sorted(SUBSETS)
        assert all(0.0 <= v <= 1.0 for v in row.mr2.values())
        assert row.seconds_per_scene > 0.0


def test_ablation_miss_rates_replay_exactly(world, ablation):
    train, test = world
    rows, kwargs = ablation
    again = run_ablation(train, test, detector_kwargs=kwargs)
    assert [row.mr2 for row in again] == [row.mr2 for row in rows]


def test_ablation_ladder_switches_override_caller_switches(world):
    train, test = world
    kwargs = dict(n_clusters=3, offline_steps=4, online_steps=6,
                  random_state=5, use_transform=False, use_eci=True)
    rows = run_ablation(train, test, subsets=("all",), detector_kwargs=kwargs)
    assert [row.arm for row in rows] == list(ABLATION_ARMS)


def test_eci_arm_shares_the_third_arms_checkpoint(world):
    # With fusion weights at zero the fourth arm must collapse onto the third:
    # same parameters scored with a degenerate fusion.
    train, test = world
    kwargs = dict(n_clusters=3, offline_steps=4, online_steps=6,
                  random_state=5, mu=0.0, lam=0.0)
    rows = run_ablation(train, test, subsets=("all",), detector_kwargs=kwargs)
    assert rows[2].mr2 == rows[3].mr2


def test_ablation_rejects_empty_eval_scenes(world):
    train, _ = world
    with pytest.raises(DataContractError, match="evaluation scene"):
        run_ablation(train, [])


def test_ablation_table_formats_all_rows(ablation):
    rows, _ = ablation
    text = format_ablation_table(rows)
    for arm in ABLATION_ARMS:
        assert arm in text
    assert "mr2[reasonable]" in text and "ms/scene" in text
    assert len(text.splitlines()) == 1 + len(rows)


def test_ablation_table_rejects_empty_input():
    with pytest.raises(DataContractError, match="no ablation rows"):
        format_ablation_table([])


def test_ablation_row_is_frozen(ablation):
    rows, _ = ablation
    with pytest.raises(AttributeError):
        rows[0].arm = "renamed"
