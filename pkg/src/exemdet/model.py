"""End-to-end detector with a scikit-learn estimator surface.

:class:`ExemplarContrastiveDetector` ties the pipeline stages together:
crop collection, exemplar clustering, offline contrastive pretraining,
joint online training, dictionary embedding, and per-level neighbor
indices. :func:`run_ablation` fits the standard configuration ladder and
scores each rung on held-out scenes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .contrastive import (ContrastiveParams, ProjectionConfig, StepRecord,
                          TrainSchedule, compute_dictionary_embeddings,
                          init_params, train_offline, train_online)
from .errors import ConfigError, DataContractError
from .evaluate import (SUBSETS, Detection, MissRateCurve, ScoreWeights,
                       scene_ground_truth, score_scene, subset_curves)
from .exemplars import build_dictionary, rebalance_occluded
from .hnsw import HnswIndex, HnswParams, build_index
from .levels import LEVELS
from .params import ParamStore
from .synth import Scene, collect_background_features, collect_crops

__all__ = [
    "ExemplarContrastiveDetector",
    "ABLATION_ARMS",
    "AblationRow",
    "run_ablation",
    "format_ablation_table",
]

# Seed-stream labels, in the order they are derived from ``random_state``.
_SEED_STAGES = ("dictionary", "init", "offline", "online", "index")


class ExemplarContrastiveDetector(BaseEstimator):
    """Pedestrian-proposal scorer built around an exemplar dictionary.

    ``fit`` clusters pedestrian crops into exemplars, optionally pretrains
    the feature transform contrastively against background, trains heads
    (and trunk, when present) jointly on the scenes, embeds the dictionary,
    and builds one approximate-neighbor index per pyramid level.
    ``predict`` scores proposals into ranked detections; ``evaluate``
    reduces them to a log-average miss-rate curve for one subset.

    The three ablation switches mirror the training ladder: with
    ``use_transform=False`` the heads score raw pyramid features and no
    contrastive machinery exists; ``use_offline=False`` skips pretraining;
    ``use_eci`` picks whether prediction fuses exemplar distances into the
    confidence (overridable per call). Every stochastic stage draws its
    seed from ``random_state``, so refitting with equal parameters is
    replay-exact.
    """

    def __init__(self,
                 n_clusters: int = 8,
                 target_occluded_ratio: float | None = None,
                 tau: float = 0.2,
                 level_weights: Sequence[float] = (1.0, 0.5, 0.5, 0.5),
                 alpha: float = 0.5,
                 hidden_dim: int = 32,
                 embed_dim: int = 16,
                 offline_steps: int = 150,
                 online_steps: int = 400,
                 lr_initial: float = 1e-3,
                 lr_final: float = 1e-4,
                 negatives_per_step: int = 8,
                 use_transform: bool = True,
                 use_offline: bool = True,
                 use_eci: bool = True,
                 mu: float = 0.2,
                 lam: float = 0.1,
                 scoring_mode: str = "similarity",
                 index_m: int = 8,
                 ef_construction: int = 32,
                 ef_search: int = 64,
                 iou_threshold: float = 0.5,
                 random_state: int = 0):
        self.n_clusters = n_clusters
        self.target_occluded_ratio = target_occluded_ratio
        self.tau = tau
        self.level_weights = level_weights
        self.alpha = alpha
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.offline_steps = offline_steps
        self.online_steps = online_steps
        self.lr_initial = lr_initial
        self.lr_final = lr_final
        self.negatives_per_step = negatives_per_step
        self.use_transform = use_transform
        self.use_offline = use_offline
        self.use_eci = use_eci
        self.mu = mu
        self.lam = lam
        self.scoring_mode = scoring_mode
        self.index_m = index_m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.iou_threshold = iou_threshold
        self.random_state = random_state

    # -- fitting --------------------------------------------------------------

    def _stage_seeds(self) -> dict[str, int]:
        if not isinstance(self.random_state, (int, np.integer)) or self.random_state < 0:
            raise ConfigError(
                f"random_state must be a non-negative integer, got {self.random_state!r}")
        words = np.random.SeedSequence(int(self.random_state)).generate_state(
            len(_SEED_STAGES))
        return {name: int(word) for name, word in zip(_SEED_STAGES, words)}

    def _schedule(self, steps: int) -> TrainSchedule:
        return TrainSchedule(steps=steps,
                             lr_initial=self.lr_initial,
                             lr_final=self.lr_final,
                             negatives_per_step=self.negatives_per_step)

    def fit(self, scenes: Sequence[Scene], y=None) -> "ExemplarContrastiveDetector":
        """Build the dictionary, train, and index; returns ``self``."""
        scenes = list(scenes)
        if not scenes:
            raise DataContractError("fit needs at least one scene")
        seeds = self._stage_seeds()

        crop_pairs = collect_crops(scenes)
        dictionary = build_dictionary(crop_pairs, self.n_clusters,
                                      seeds["dictionary"])
        if self.target_occluded_ratio is not None:
            dictionary = rebalance_occluded(dictionary, self.target_occluded_ratio)

        cfg = ContrastiveParams(tau=self.tau,
                                level_weights=tuple(float(w) for w in self.level_weights),
                                alpha=self.alpha)
        params = init_params(seeds["init"],
                             projection=ProjectionConfig(hidden_dim=self.hidden_dim,
                                                         embed_dim=self.embed_dim),
                             include_transform=self.use_transform,
                             include_heads=True)

        offline_log: list[StepRecord] = []
        online_log: list[StepRecord] = []
        if self.use_transform and self.use_offline and self.offline_steps > 0:
            train_offline([feats for feats, _ in crop_pairs],
                          collect_background_features(scenes),
                          dictionary, params, cfg,
                          self._schedule(self.offline_steps),
                          seed=seeds["offline"], on_step=offline_log.append)
        train_online(scenes, dictionary, params, cfg,
                     self._schedule(self.online_steps),
                     seed=seeds["online"], on_step=online_log.append)

        indices: dict[int, HnswIndex] | None = None
        if self.use_transform:
            compute_dictionary_embeddings(dictionary, params)
            indices = {
                level: build_index(dictionary, level,
                                   HnswParams(M=self.index_m,
                                              ef_construction=self.ef_construction,
                                              ef_search=self.ef_search,
                                              level_lambda=1.0 / math.log(self.index_m),
                                              seed=seeds["index"] + level))
                for level in LEVELS
            }

        self.dictionary_ = dictionary
        self.params_ = params
        self.indices_ = indices
        self.contrastive_config_ = cfg
        self.offline_log_ = offline_log
        self.online_log_ = online_log
        return self

    # -- inference ------------------------------------------------------------

    def _require_fitted(self) -> ParamStore:
        params = getattr(self, "params_", None)
        if params is None:
            raise NotFittedError(
                "this ExemplarContrastiveDetector is not fitted; call fit first")
        return params

    def _scoring_state(self, with_eci: bool | None):
        params = self._require_fitted()
        eci = self.use_eci if with_eci is None else bool(with_eci)
        if eci:
            if self.indices_ is None:
                raise ConfigError(
                    "exemplar-distance fusion needs the learned transform; "
                    "fit with use_transform=True or pass with_eci=False")
            weights = ScoreWeights(mu=self.mu, lam=self.lam, mode=self.scoring_mode)
            return params, self.indices_, weights
        return params, None, ScoreWeights(mu=0.0, lam=0.0, mode=self.scoring_mode)

    def predict(self, scenes: Sequence[Scene],
                with_eci: bool | None = None) -> list[list[Detection]]:
        """Score every proposal; one detection list per scene.

        ``with_eci`` overrides the fitted ``use_eci`` switch for this call.
        """
        params, indices, weights = self._scoring_state(with_eci)
        return [score_scene(scene, params, indices, weights) for scene in scenes]

    def evaluate(self, scenes: Sequence[Scene], subset: str = "all",
                 with_eci: bool | None = None,
                 ground_truth: Sequence[Sequence[tuple]] | None = None
                 ) -> MissRateCurve:
        """Miss-rate curve of this detector on ``scenes`` for one subset."""
        detections = self.predict(scenes, with_eci=with_eci)
        if ground_truth is None:
            ground_truth = [scene_ground_truth(s) for s in scenes]
        return subset_curves(detections, ground_truth, (subset,),
                             self.iou_threshold)[subset]


# -- ablation ladder ----------------------------------------------------------

ABLATION_ARMS: tuple[str, ...] = ("baseline", "+FT", "+FT+OOCL", "+FT+OOCL+ECI")

# Switch settings for the three arms that need their own training run. The
# fourth arm reuses the third arm's checkpoint and differs only at scoring.
_ARM_SWITCHES: dict[str, dict[str, bool]] = {
    "baseline": {"use_transform": False, "use_offline": False, "use_eci": False},
    "+FT": {"use_transform": True, "use_offline": False, "use_eci": False},
    "+FT+OOCL": {"use_transform": True, "use_offline": True, "use_eci": False},
}


@dataclass(frozen=True)
class AblationRow:
    """One ladder rung: per-subset log-average miss rates plus scoring time.

    ``seconds_per_scene`` is wall-clock prediction time and is the only
    nondeterministic field.
    """

    arm: str
    mr2: dict[str, float]
    seconds_per_scene: float


def _score_arm(arm: str, detector: ExemplarContrastiveDetector,
               eval_scenes: Sequence[Scene], ground_truth, subsets,
               with_eci: bool) -> AblationRow:
    start = time.perf_counter()
    detections = detector.predict(eval_scenes, with_eci=with_eci)
    seconds = (time.perf_counter() - start) / len(eval_scenes)
    curves = subset_curves(detections, ground_truth, subsets,
                           detector.iou_threshold)
    return AblationRow(arm=arm,
                       mr2={s: curves[s].mr2 for s in subsets},
                       seconds_per_scene=seconds)


def run_ablation(train_scenes: Sequence[Scene], eval_scenes: Sequence[Scene],
                 subsets: Sequence[str] = SUBSETS,
                 detector_kwargs: dict | None = None) -> list[AblationRow]:
    """Fit the configuration ladder and score each arm on held-out scenes.

    Three detectors are fitted (baseline heads, +FT, +FT+OOCL); the ECI arm
    reuses the +FT+OOCL checkpoint and only switches exemplar-distance
    fusion on at prediction time, so the last two rows share parameters
    bit-for-bit. ``detector_kwargs`` seeds every arm identically; the
    ladder's own switches override any it contains.
    """
    train_scenes = list(train_scenes)
    eval_scenes = list(eval_scenes)
    if not eval_scenes:
        raise DataContractError("ablation needs at least one evaluation scene")
    base = dict(detector_kwargs or {})
    ground_truth = [scene_ground_truth(s) for s in eval_scenes]

    rows: list[AblationRow] = []
    detector: ExemplarContrastiveDetector | None = None
    for arm in ABLATION_ARMS[:3]:
        detector = ExemplarContrastiveDetector(**{**base, **_ARM_SWITCHES[arm]})
        detector.fit(train_scenes)
        rows.append(_score_arm(arm, detector, eval_scenes, ground_truth,
                               subsets, with_eci=False))
    rows.append(_score_arm(ABLATION_ARMS[3], detector, eval_scenes,
                           ground_truth, subsets, with_eci=True))
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    """Fixed-width text table of the ablation results."""
    if not rows:
        raise DataContractError("no ablation rows to format")
    subsets = list(rows[0].mr2)
    header = ["arm"] + [f"mr2[{s}]" for s in subsets] + ["ms/scene"]
    table = [header]
    for row in rows:
        cells = [row.arm]
        cells += [f"{row.mr2[s]:.4f}" for s in subsets]
        cells.append(f"{row.seconds_per_scene * 1e3:.2f}")
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in table]
    return "\n".join(lines) + "\n"
