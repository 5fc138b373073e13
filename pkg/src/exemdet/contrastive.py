"""The contrastive embedding model and its two-phase training.

Per pyramid level the model applies a feature transformation ``F_t`` (three
3x3 stride-1 pad-1 channel-preserving convolutions, each with relu) and a
projection head ``P`` (two fully-connected layers), then L2-normalizes. The
temperature-scaled InfoNCE loss pulls a proposal embedding toward a random
dictionary exemplar and pushes it away from the batch's negatives; the
multi-level loss sums the per-level terms with fixed weights whose anchor
(level 2) is pinned to 1.

Training runs in two phases: an offline phase that fits only ``F_t``/``P`` on
pedestrian crops versus background crops, and an online phase that adds linear
detection heads (classification logit + box-offset regression) and optimizes
the joint objective ``L_det + alpha * L_contrastive`` scene by scene at batch
size 1, with a two-phase learning-rate schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataContractError, TrainingDivergedError
from .exemplars import Exemplar, ExemplarDictionary
from .geometry import Box
from .levels import LEVEL_CHANNELS, LEVELS, SPATIAL, route_level
from .params import AdamConfig, ParamStore, adam_step
from .synth import (LABEL_NEGATIVE, LABEL_POSITIVE, Proposal, PyramidFeatures,
                    Scene)

logger = logging.getLogger(__name__)


# -- configuration -----------------------------------------------------------

@dataclass
class TransformConfig:
    """Shape of the per-level transformation trunk.

    Three 3x3 convolutions with padding 1 and stride 1, each channel
    preserving and relu-activated, so the 7x7 footprint survives untouched.
    Channel counts are per level and default to the pyramid's layout.
    """

    level_channels: dict[int, int] = field(
        default_factory=lambda: dict(LEVEL_CHANNELS))
    spatial: int = SPATIAL

    NUM_CONVS = 3
    KERNEL = 3

    def __post_init__(self) -> None:
        if set(self.level_channels) != set(LEVELS):
            raise DataContractError(
                f"level_channels must cover levels {LEVELS}, got "
                f"{sorted(self.level_channels)}")
        for lv, c in self.level_channels.items():
            if c < 1:
                raise DataContractError(f"level {lv} channel count must be >= 1, got {c}")
        if self.spatial < 1:
            raise DataContractError(f"spatial must be >= 1, got {self.spatial}")


@dataclass
class ProjectionConfig:
    """Two fully-connected layers ending in a D_emb-dimensional embedding."""

    hidden_dim: int = 32
    embed_dim: int = 16

    def __post_init__(self) -> None:
        if self.hidden_dim < 1:
            raise DataContractError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.embed_dim < 2:
            raise DataContractError(
                f"embed_dim must be >= 2 for a non-degenerate embedding space, "
                f"got {self.embed_dim}")


@dataclass
class ContrastiveParams:
    """Loss hyper-parameters: temperature, level weights, joint-loss weight."""

    tau: float = 0.2
    level_weights: tuple[float, float, float, float] = (1.0, 0.5, 0.5, 0.5)
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not self.tau > 0.0:
            raise DataContractError(f"tau must be > 0, got {self.tau}")
        if len(self.level_weights) != len(LEVELS):
            raise DataContractError(
                f"need {len(LEVELS)} level weights, got {len(self.level_weights)}")
        if self.level_weights[0] != 1.0:
            raise DataContractError(
                f"the anchor level weight is fixed at 1, got {self.level_weights[0]}")
        if any(w < 0.0 for w in self.level_weights):
            raise DataContractError(f"level weights must be >= 0, got {self.level_weights}")
        if self.alpha < 0.0:
            raise DataContractError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class TrainSchedule:
    """Step budget and the two-phase learning rate (constant, then dropped)."""

    steps: int
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    negatives_per_step: int = 8

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise DataContractError(f"steps must be >= 0, got {self.steps}")
        if not (self.lr_initial > 0.0 and self.lr_final > 0.0):
            raise DataContractError("learning rates must be > 0")
        if self.negatives_per_step < 1:
            raise DataContractError(
                f"negatives_per_step must be >= 1, got {self.negatives_per_step}")

    def lr_at(self, step: int) -> float:
        """First half of the budget at the initial rate, second at the final."""
        if self.steps < 2 or step < (self.steps + 1) // 2:
            return self.lr_initial
        return self.lr_final


@dataclass
class TripletBatch:
    """One contrastive sample: an exemplar, a positive, and B >= 1 negatives."""

    exemplar: Exemplar
    positive: Proposal
    negatives: list[Proposal]

    def __post_init__(self) -> None:
        if self.positive.label != LABEL_POSITIVE:
            raise DataContractError("triplet positive must carry a positive label")
        if not self.negatives:
            raise DataContractError("triplet needs at least one negative")
        bad = [n.label for n in self.negatives if n.label != LABEL_NEGATIVE]
        if bad:
            raise DataContractError("triplet negatives must all carry negative labels")


@dataclass
class Embedding:
    """A unit vector in the level's embedding space."""

    vector: np.ndarray
    level: int

    def __post_init__(self) -> None:
        norm = float(np.linalg.norm(self.vector))
        if not math.isclose(norm, 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise DataContractError(f"embedding norm must be 1, got {norm}")
        if self.level not in LEVELS:
            raise DataContractError(f"unknown level {self.level}")


@dataclass
class StepRecord:
    """What one optimizer step saw; handed to training callbacks."""

    step: int
    phase: str
    lr: float
    loss: float
    contrastive_loss: float | None = None
    detection_loss: float | None = None
    per_level: dict[int, float] = field(default_factory=dict)


# -- parameter initialization ------------------------------------------------

def _conv_key(level: int, i: int, part: str) -> str:
    return f"ft.L{level}.conv{i}.{part}"


def _proj_key(level: int, i: int, part: str) -> str:
    return f"proj.L{level}.fc{i}.{part}"


def _head_key(kind: str, level: int, part: str) -> str:
    return f"head.{kind}.L{level}.{part}"


def init_params(seed: int,
                transform: TransformConfig | None = None,
                projection: ProjectionConfig | None = None,
                include_transform: bool = True,
                include_heads: bool = True) -> ParamStore:
    """Seeded parameter store for the trunk, projection, and detection heads.

    Convolutions get He-normal weights; fully-connected layers get uniform
    fan-in scaling; all biases start at zero. Leaving out the transform also
    leaves out the projection (the heads then read raw pyramid features, the
    no-transform baseline).
    """
    transform = transform or TransformConfig()
    projection = projection or ProjectionConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    for lv in LEVELS:
        c = transform.level_channels[lv]
        if include_transform:
            for i in range(TransformConfig.NUM_CONVS):
                fan_in = c * TransformConfig.KERNEL ** 2
                w = rng.standard_normal((c, c, TransformConfig.KERNEL,
                                         TransformConfig.KERNEL))
                store.add(_conv_key(lv, i, "w"), w * np.sqrt(2.0 / fan_in))
                store.add(_conv_key(lv, i, "b"), np.zeros(c))
            flat_dim = c * transform.spatial ** 2
            bound0 = 1.0 / np.sqrt(flat_dim)
            store.add(_proj_key(lv, 0, "w"),
                      rng.uniform(-bound0, bound0, (projection.hidden_dim, flat_dim)))
            store.add(_proj_key(lv, 0, "b"), np.zeros(projection.hidden_dim))
            bound1 = 1.0 / np.sqrt(projection.hidden_dim)
            store.add(_proj_key(lv, 1, "w"),
                      rng.uniform(-bound1, bound1,
                                  (projection.embed_dim, projection.hidden_dim)))
            store.add(_proj_key(lv, 1, "b"), np.zeros(projection.embed_dim))
        if include_heads:
            head_dim = c * transform.spatial ** 2
            bound = 1.0 / np.sqrt(head_dim)
            store.add(_head_key("cls", lv, "w"), rng.uniform(-bound, bound, head_dim))
            store.add(_head_key("cls", lv, "b"), np.zeros(()))
            store.add(_head_key("reg", lv, "w"),
                      rng.uniform(-bound, bound, (4, head_dim)))
            store.add(_head_key("reg", lv, "b"), np.zeros(4))
    return store


def has_transform(store: ParamStore) -> bool:
    return _conv_key(LEVELS[0], 0, "w") in store


def trunk_keys(store: ParamStore) -> list[str]:
    """Parameters belonging to the transform trunk and projection head."""
    return [k for k in store.keys() if k.startswith(("ft.", "proj."))]


# -- forward passes ----------------------------------------------------------

def transform_features(features, level: int, store: ParamStore) -> Tensor:
    """Apply the level's three-conv trunk; a (C, S, S) map in and out."""
    if _conv_key(level, 0, "w") not in store:
        raise KeyError(f"no transform parameters for level {level} in this store")
    x = Tensor(features.maps[level])
    for i in range(TransformConfig.NUM_CONVS):
        x = ag.relu(ag.conv2d(x, store[_conv_key(level, i, "w")],
                              store[_conv_key(level, i, "b")],
                              padding=1, stride=1))
    return x


def embed(features, level: int, store: ParamStore) -> Tensor:
    """Unit-norm embedding of one feature pyramid at one level.

    Differentiable end to end; returns the graph tensor. Use
    :func:`embed_static` for a detached :class:`Embedding`.
    """
    if level not in LEVELS:
        raise DataContractError(f"level must be one of {LEVELS}, got {level}")
    t = transform_features(features, level, store)
    flat = ag.flatten(t)
    h = ag.relu(ag.fully_connected(flat, store[_proj_key(level, 0, "w")],
                                   store[_proj_key(level, 0, "b")]))
    z = ag.fully_connected(h, store[_proj_key(level, 1, "w")],
                           store[_proj_key(level, 1, "b")])
    return ag.l2_normalize(z)


def embed_static(features, level: int, store: ParamStore) -> Embedding:
    with ag.no_grad():
        vector = embed(features, level, store).data
    return Embedding(vector=vector, level=level)


def compute_dictionary_embeddings(dictionary: ExemplarDictionary,
                                  store: ParamStore) -> None:
    """Fill every exemplar's per-level embeddings from the current parameters."""
    for ex in dictionary.exemplars:
        for lv in LEVELS:
            ex.embeddings[lv] = embed_static(ex.source_features, lv, store).vector


# -- losses ------------------------------------------------------------------

def infonce(e: Tensor, s_pos: Tensor, s_neg: Sequence[Tensor], tau: float) -> Tensor:
    """Temperature-scaled contrastive loss with dot-product similarity.

    ``-log softmax`` of the positive similarity against positive plus all
    negatives. Always >= 0; shrinks as the positive dot grows and grows as any
    negative dot grows.
    """
    if not tau > 0.0:
        raise DataContractError(f"tau must be > 0, got {tau}")
    if len(s_neg) == 0:
        raise DataContractError("infonce needs at least one negative")
    inv_tau = 1.0 / tau
    pos_logit = ag.dot(e, s_pos) * inv_tau
    logits = [pos_logit] + [ag.dot(e, n) * inv_tau for n in s_neg]
    return ag.logsumexp(ag.stack(logits)) - pos_logit


def multilevel_infonce(exemplar_features: PyramidFeatures,
                       positive_features: PyramidFeatures,
                       negative_features: Sequence[PyramidFeatures],
                       store: ParamStore,
                       cfg: ContrastiveParams) -> tuple[Tensor, dict[int, float]]:
    """Weighted per-level contrastive loss on raw feature pyramids.

    Zero-weight levels are skipped outright, so their parameters sit entirely
    outside the graph (exactly zero gradient, not just numerically zero).
    Returns the total and the unweighted per-level values.
    """
    if len(negative_features) == 0:
        raise DataContractError("need at least one negative pyramid")
    total: Tensor | None = None
    per_level: dict[int, float] = {}
    for lv, weight in zip(LEVELS, cfg.level_weights):
        if weight == 0.0:
            continue
        e = embed(exemplar_features, lv, store)
        sp = embed(positive_features, lv, store)
        sn = [embed(neg, lv, store) for neg in negative_features]
        term = infonce(e, sp, sn, cfg.tau)
        per_level[lv] = float(term.data)
        weighted = term * weight
        total = weighted if total is None else total + weighted
    if total is None:
        raise DataContractError("all level weights are zero; the loss is empty")
    return total, per_level


def multilevel_loss(batch: TripletBatch, params: ParamStore,
                    cfg: ContrastiveParams) -> Tensor:
    """The weighted multi-level loss of one triplet."""
    total, _ = multilevel_infonce(batch.exemplar.source_features,
                                  batch.positive.features,
                                  [n.features for n in batch.negatives],
                                  params, cfg)
    return total


def smooth_l1(pred_offsets: Sequence[float], target_offsets: Sequence[float]) -> float:
    """Plain-number Huber loss over a 4-vector of box offsets."""
    pred = np.asarray(pred_offsets, dtype=np.float64)
    target = np.asarray(target_offsets, dtype=np.float64)
    if pred.shape != (4,) or target.shape != (4,):
        raise DataContractError(
            f"offsets must be 4-vectors, got {pred.shape} and {target.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(target).all()):
        raise DataContractError("offsets must be finite")
    d = np.abs(pred - target)
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum())


def encode_box_offsets(proposal: Box, gt: Box) -> np.ndarray:
    """Standard center/size box encoding of ``gt`` relative to ``proposal``."""
    px, py = proposal.center
    gx, gy = gt.center
    return np.array([(gx - px) / proposal.w,
                     (gy - py) / proposal.h,
                     np.log(gt.w / proposal.w),
                     np.log(gt.h / proposal.h)])


# -- detection-head forward --------------------------------------------------

def _head_input(features: PyramidFeatures, level: int, store: ParamStore) -> Tensor:
    """Flattened head input: transformed map when a trunk exists, else raw."""
    if has_transform(store):
        return ag.flatten(transform_features(features, level, store))
    return ag.flatten(Tensor(features.maps[level]))


def classification_logit(features: PyramidFeatures, level: int,
                         store: ParamStore) -> Tensor:
    feat = _head_input(features, level, store)
    return ag.dot(store[_head_key("cls", level, "w")], feat) + \
        store[_head_key("cls", level, "b")]


def _detection_terms(scene: Scene, store: ParamStore) -> tuple[list[Tensor], list[Tensor]]:
    cls_terms: list[Tensor] = []
    reg_terms: list[Tensor] = []
    for prop in scene.proposals:
        lv = route_level(prop.box)
        feat = _head_input(prop.features, lv, store)
        logit = ag.dot(store[_head_key("cls", lv, "w")], feat) + \
            store[_head_key("cls", lv, "b")]
        target = 1.0 if prop.label == LABEL_POSITIVE else 0.0
        cls_terms.append(ag.bce_with_logit(logit, target))
        if prop.label == LABEL_POSITIVE:
            pred = ag.fully_connected(feat, store[_head_key("reg", lv, "w")],
                                      store[_head_key("reg", lv, "b")])
            reg_terms.append(ag.smooth_l1(pred, encode_box_offsets(prop.box, prop.gt_box)))
    return cls_terms, reg_terms


def _mean_of(terms: Sequence[Tensor]) -> Tensor:
    return ag.tensor_sum(ag.stack(list(terms))) * (1.0 / len(terms))


# -- training loops ----------------------------------------------------------

def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError(step)


def train_offline(crops: Sequence[PyramidFeatures],
                  backgrounds: Sequence[PyramidFeatures],
                  dictionary: ExemplarDictionary,
                  params: ParamStore,
                  cfg: ContrastiveParams,
                  schedule: TrainSchedule,
                  seed: int = 0,
                  on_step: Callable[[StepRecord], None] | None = None) -> ParamStore:
    """Contrastive pretraining on crops versus background.

    Each step draws a random exemplar, a random pedestrian crop as the
    positive, and ``negatives_per_step`` background pyramids, then steps Adam
    on the trunk and projection parameters only. Replay-exact under the seed;
    zero steps leave the parameters untouched. Adam moments reset at entry, so
    a phase started from a saved checkpoint matches one run in-process.
    """
    if not crops or not backgrounds:
        raise DataContractError("offline training needs both crops and backgrounds")
    if len(dictionary) == 0:
        raise DataContractError("offline training needs a non-empty dictionary")
    trainable = trunk_keys(params)
    if not trainable:
        raise DataContractError("parameter store has no trunk/projection parameters")
    params.reset_optimizer()
    rng = np.random.Generator(np.random.PCG64(seed))
    for step in range(schedule.steps):
        exemplar = dictionary.exemplars[int(rng.integers(len(dictionary)))]
        positive = crops[int(rng.integers(len(crops)))]
        negative_ids = rng.integers(len(backgrounds), size=schedule.negatives_per_step)
        negatives = [backgrounds[int(i)] for i in negative_ids]
        loss, per_level = multilevel_infonce(exemplar.source_features, positive,
                                             negatives, params, cfg)
        _check_finite(loss, step)
        params.zero_grad()
        loss.backward()
        lr = schedule.lr_at(step)
        adam_step(params, AdamConfig(learning_rate=lr), keys=trainable)
        if on_step is not None:
            on_step(StepRecord(step=step, phase="offline", lr=lr,
                               loss=float(loss.data),
                               contrastive_loss=float(loss.data),
                               per_level=per_level))
    return params


def _online_scene_step(scene: Scene, dictionary: ExemplarDictionary,
                       params: ParamStore, cfg: ContrastiveParams,
                       rng: np.random.Generator) -> tuple[Tensor, float, float, dict[int, float]]:
    cls_terms, reg_terms = _detection_terms(scene, params)
    if not cls_terms:
        raise DataContractError(f"scene {scene.index} has no proposals to train on")
    det = _mean_of(cls_terms)
    if reg_terms:
        det = det + _mean_of(reg_terms)
    det_value = float(det.data)

    positives = [p for p in scene.proposals if p.label == LABEL_POSITIVE]
    negatives = [p for p in scene.proposals if p.label == LABEL_NEGATIVE]
    per_level: dict[int, float] = {}
    cl_value = 0.0
    loss = det
    if cfg.alpha > 0.0 and has_transform(params) and positives:
        if not negatives:
            logger.warning("scene %d has no negative proposals; "
                           "skipping the contrastive term", scene.index)
        else:
            exemplar_ids = [int(i) for i in
                            rng.integers(len(dictionary), size=len(positives))]
            cl_total: Tensor | None = None
            for lv, weight in zip(LEVELS, cfg.level_weights):
                if weight == 0.0:
                    continue
                negative_embeddings = [embed(n.features, lv, params) for n in negatives]
                exemplar_cache: dict[int, Tensor] = {}
                terms = []
                for prop, ex_id in zip(positives, exemplar_ids):
                    if ex_id not in exemplar_cache:
                        exemplar_cache[ex_id] = embed(
                            dictionary.exemplars[ex_id].source_features, lv, params)
                    e = exemplar_cache[ex_id]
                    sp = embed(prop.features, lv, params)
                    terms.append(infonce(e, sp, negative_embeddings, cfg.tau))
                level_loss = _mean_of(terms)
                per_level[lv] = float(level_loss.data)
                weighted = level_loss * weight
                cl_total = weighted if cl_total is None else cl_total + weighted
            cl_value = float(cl_total.data)
            loss = det + cl_total * cfg.alpha
    return loss, det_value, cl_value, per_level


def train_online(scenes: Sequence[Scene], dictionary: ExemplarDictionary,
                 params: ParamStore, cfg: ContrastiveParams,
                 schedule: TrainSchedule, seed: int = 0,
                 on_step: Callable[[StepRecord], None] | None = None) -> ParamStore:
    """Joint detection + contrastive training, one scene per step.

    Scene order is a fresh seeded shuffle each epoch. The detection loss is
    mean classification cross-entropy over the scene's proposals plus mean
    box-offset regression over its positives; with ``alpha > 0`` and a trunk
    present, the scene's contrastive loss joins in. Every parameter that
    received a gradient is stepped; with ``alpha == 0`` no contrastive graph
    (and no exemplar draw) happens at all, so the trajectory matches plain
    detection training exactly. Adam moments reset at entry, so a phase
    started from a saved checkpoint matches one run in-process.
    """
    if not scenes:
        raise DataContractError("online training needs at least one scene")
    if len(dictionary) == 0:
        raise DataContractError("online training needs a non-empty dictionary")
    params.reset_optimizer()
    rng = np.random.Generator(np.random.PCG64(seed))
    step = 0
    while step < schedule.steps:
        order = rng.permutation(len(scenes))
        for scene_i in order:
            if step >= schedule.steps:
                break
            scene = scenes[int(scene_i)]
            loss, det_value, cl_value, per_level = _online_scene_step(
                scene, dictionary, params, cfg, rng)
            _check_finite(loss, step)
            params.zero_grad()
            loss.backward()
            touched = [k for k, t in params.items() if t.grad is not None]
            lr = schedule.lr_at(step)
            adam_step(params, AdamConfig(learning_rate=lr), keys=touched)
            if on_step is not None:
                on_step(StepRecord(step=step, phase="online", lr=lr,
                                   loss=float(loss.data),
                                   contrastive_loss=cl_value,
                                   detection_loss=det_value,
                                   per_level=per_level))
            step += 1
    return params


# -- evaluation statistics ---------------------------------------------------

def embedding_margin(store: ParamStore, dictionary: ExemplarDictionary,
                     positives: Sequence[PyramidFeatures],
                     negatives: Sequence[PyramidFeatures],
                     seed: int = 0) -> float:
    """mean(dot(e, s_pos)) - mean(dot(e, s_neg)) with seeded exemplar draws.

    Averaged over all four levels; a well-trained embedding pushes this
    margin up.
    """
    if not positives or not negatives:
        raise DataContractError("margin needs both positives and negatives")
    rng = np.random.Generator(np.random.PCG64(seed))
    pos_ids = [int(i) for i in rng.integers(len(dictionary), size=len(positives))]
    neg_ids = [int(i) for i in rng.integers(len(dictionary), size=len(negatives))]
    with ag.no_grad():
        margins = []
        for lv in LEVELS:
            cache: dict[int, np.ndarray] = {}

            def exemplar_vec(ex_id: int, lv=lv, cache=cache) -> np.ndarray:
                if ex_id not in cache:
                    cache[ex_id] = embed(
                        dictionary.exemplars[ex_id].source_features, lv, store).data
                return cache[ex_id]

            pos_dots = [float(exemplar_vec(i) @ embed(f, lv, store).data)
                        for i, f in zip(pos_ids, positives)]
            neg_dots = [float(exemplar_vec(i) @ embed(f, lv, store).data)
                        for i, f in zip(neg_ids, negatives)]
            margins.append(np.mean(pos_dots) - np.mean(neg_dots))
    return float(np.mean(margins))


def nearest_exemplar_accuracy(store: ParamStore, dictionary: ExemplarDictionary,
                              positives: Sequence[PyramidFeatures],
                              negatives: Sequence[PyramidFeatures]) -> float:
    """Best-threshold balanced accuracy of a nearest-exemplar rule.

    Each sample scores as its best dot product against the dictionary,
    averaged over levels; the result is the balanced accuracy of the best
    score threshold, so it hits 1.0 exactly when the classes separate.
    """
    if not positives or not negatives:
        raise DataContractError("accuracy needs both positives and negatives")
    with ag.no_grad():
        exemplar_vectors = {
            lv: np.stack([embed(ex.source_features, lv, store).data
                          for ex in dictionary.exemplars])
            for lv in LEVELS}

        def score(features: PyramidFeatures) -> float:
            per_level = []
            for lv in LEVELS:
                v = embed(features, lv, store).data
                per_level.append(float(np.max(exemplar_vectors[lv] @ v)))
            return float(np.mean(per_level))

        pos_scores = np.array([score(f) for f in positives])
        neg_scores = np.array([score(f) for f in negatives])
    best = 0.0
    for threshold in np.concatenate(([-np.inf], np.unique(np.concatenate(
            (pos_scores, neg_scores))))):
        balanced = 0.5 * (float((pos_scores > threshold).mean())
                          + float((neg_scores <= threshold).mean()))
        best = max(best, balanced)
    return best
