"""Collaborative proposal scoring and miss-rate evaluation.

Each proposal gets a classification probability from the detection head plus,
when exemplar indices are supplied, its nearest-exemplar distance ``d_c`` and
top-layer average distance ``d_a``. The fused confidence is a convex-style
combination ``(1 - mu - lam) * p + mu * X_c + lam * X_a`` where the distance
terms enter either literally (``verbatim`` mode) or as similarities ``1 - d``
(``similarity`` mode, the default).

Detection quality is summarized as the log-average miss rate over false
positives per image (FPPI): a greedy confidence-ordered matcher produces
per-threshold operating points, the miss rate is sampled at nine log-spaced
FPPI anchors in [1e-2, 1], and the result is the exponential of the mean log
sampled miss rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .contrastive import Embedding, classification_logit, embed, has_transform
from .errors import DataContractError
from .geometry import Box, iou
from .hnsw import HnswIndex, average_distance, nearest, select_index, sigmoid
from .levels import route_level
from .params import ParamStore
from .synth import Proposal, Scene

SUBSETS = ("reasonable", "occluded", "all")
FPPI_ANCHORS = np.logspace(-2.0, 0.0, 9)
MISS_RATE_FLOOR = 1e-10


@dataclass
class ScoreWeights:
    """Fusion weights for the classifier score and the two exemplar distances."""

    mu: float = 0.2
    lam: float = 0.1
    mode: str = "similarity"

    def __post_init__(self) -> None:
        if not 0.0 <= self.mu <= 1.0:
            raise DataContractError(f"mu must be in [0, 1], got {self.mu}")
        if not 0.0 <= self.lam <= 1.0:
            raise DataContractError(f"lam must be in [0, 1], got {self.lam}")
        if self.mu + self.lam > 1.0:
            raise DataContractError(
                f"mu + lam must be <= 1, got {self.mu} + {self.lam}")
        if self.mode not in ("verbatim", "similarity"):
            raise DataContractError(
                f"mode must be 'verbatim' or 'similarity', got {self.mode!r}")


@dataclass
class Detection:
    """A scored box with every confidence component kept for auditing."""

    box: Box
    p_cls: float
    d_c: float
    d_a: float
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_cls <= 1.0:
            raise DataContractError(f"p_cls must be in [0, 1], got {self.p_cls}")


@dataclass
class MatchResult:
    """Greedy matching outcome: (detection, ground-truth) index pairs."""

    pairs: list[tuple[int, int]]
    false_positives: list[int]
    missed: list[int]


@dataclass
class MissRateCurve:
    """Miss rate sampled at the nine FPPI anchors plus its log-average."""

    anchors: np.ndarray
    miss_rates: np.ndarray
    mr2: float
    operating_points: list[tuple[float, float]]

    def __post_init__(self) -> None:
        if self.anchors.shape != (9,) or self.miss_rates.shape != (9,):
            raise DataContractError("curve needs exactly nine anchor samples")
        if np.any(self.miss_rates < 0.0) or np.any(self.miss_rates > 1.0):
            raise DataContractError("miss rates must lie in [0, 1]")
        if np.any(np.diff(self.miss_rates) > 0.0):
            raise DataContractError("miss rate must not increase with FPPI")


# -- scoring -----------------------------------------------------------------

def fuse_confidence(p_cls: float, d_c: float, d_a: float,
                    weights: ScoreWeights) -> float:
    """The linear confidence fusion, in the requested mode."""
    base = (1.0 - weights.mu - weights.lam) * p_cls
    if weights.mode == "verbatim":
        return base + weights.mu * d_c + weights.lam * d_a
    return base + weights.mu * (1.0 - d_c) + weights.lam * (1.0 - d_a)


def score_proposal(proposal: Proposal, params: ParamStore,
                   indices: dict[int, HnswIndex] | None,
                   weights: ScoreWeights) -> Detection:
    """Score one proposal; exemplar terms only when indices are supplied."""
    with ag.no_grad():
        level = route_level(proposal.box)
        p_cls = sigmoid(float(classification_logit(proposal.features, level,
                                                   params).data))
        if indices is None:
            if weights.mu != 0.0 or weights.lam != 0.0:
                raise DataContractError(
                    "exemplar indices are required when mu or lam is nonzero")
            return Detection(box=proposal.box, p_cls=p_cls,
                             d_c=float("nan"), d_a=float("nan"),
                             confidence=p_cls)
        if not has_transform(params):
            raise DataContractError(
                "collaborative scoring needs the transform trunk; "
                "this parameter store has heads only")
        index = select_index(indices, proposal.box)
        query = Embedding(vector=embed(proposal.features, level, params).data,
                          level=level)
        d_c = nearest(index, query).d_c
        d_a = average_distance(index, query)
    return Detection(box=proposal.box, p_cls=p_cls, d_c=d_c, d_a=d_a,
                     confidence=fuse_confidence(p_cls, d_c, d_a, weights))


def score_scene(scene: Scene, params: ParamStore,
                indices: dict[int, HnswIndex] | None,
                weights: ScoreWeights) -> list[Detection]:
    return [score_proposal(p, params, indices, weights) for p in scene.proposals]


def _detection_order(det: Detection) -> tuple[float, float, float]:
    return (-det.confidence, det.box.x, det.box.y)


def detection_ranking(detections: Sequence[Detection]) -> list[int]:
    """Indices sorted by descending confidence with the contract tie-break."""
    return sorted(range(len(detections)),
                  key=lambda i: _detection_order(detections[i]))


# -- matching ----------------------------------------------------------------

def _greedy_flags(detections: Sequence[Detection], gt_boxes: Sequence[Box],
                  ignored: Sequence[bool], iou_threshold: float):
    """Per-detection outcome in ranked order: 'tp', 'fp', or 'ignored'.

    Greedy assignment: confidence order, each detection takes the unmatched
    ground truth of highest overlap at or above the threshold (ties to the
    lower index). Matches to ignored ground truths count as neither hits nor
    false alarms.
    """
    order = detection_ranking(detections)
    taken = [False] * len(gt_boxes)
    flags: list[tuple[int, str, int]] = []
    for di in order:
        det = detections[di]
        best_gt, best_iou = -1, 0.0
        for gi, gt in enumerate(gt_boxes):
            if taken[gi]:
                continue
            overlap = iou(det.box, gt)
            if overlap >= iou_threshold and overlap > best_iou:
                best_gt, best_iou = gi, overlap
        if best_gt < 0:
            flags.append((di, "fp", -1))
        else:
            taken[best_gt] = True
            flags.append((di, "ignored" if ignored[best_gt] else "tp", best_gt))
    return flags, taken


def match_detections(detections: Sequence[Detection], gt_boxes: Sequence[Box],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy confidence-ordered matching of one scene."""
    flags, taken = _greedy_flags(detections, gt_boxes,
                                 [False] * len(gt_boxes), iou_threshold)
    pairs = [(di, gi) for di, flag, gi in flags if flag == "tp"]
    false_positives = [di for di, flag, _ in flags if flag == "fp"]
    missed = [gi for gi, got in enumerate(taken) if not got]
    return MatchResult(pairs=pairs, false_positives=false_positives,
                       missed=missed)


# -- miss-rate curve ---------------------------------------------------------

def mr2_curve(detections_per_scene: Sequence[Sequence[Detection]],
              ground_truth_per_scene: Sequence[Sequence[Box]],
              ignored_per_scene: Sequence[Sequence[bool]] | None = None,
              iou_threshold: float = 0.5) -> MissRateCurve:
    """Log-average miss rate over the confidence-threshold sweep.

    Every scene counts toward the FPPI denominator. The miss rate at each
    anchor is the lowest achieved at any operating point with FPPI at or
    below the anchor; a uniformly perfect detector yields exactly 0 and a
    detector with no output yields exactly 1.
    """
    if len(detections_per_scene) != len(ground_truth_per_scene):
        raise DataContractError("detections and ground truth must align by scene")
    n_scenes = len(detections_per_scene)
    if n_scenes == 0:
        raise DataContractError("need at least one scene")
    if ignored_per_scene is None:
        ignored_per_scene = [[False] * len(g) for g in ground_truth_per_scene]

    total_gt = 0
    entries: list[tuple[float, int, float, float, bool]] = []
    for si, (dets, gts, ign) in enumerate(zip(detections_per_scene,
                                              ground_truth_per_scene,
                                              ignored_per_scene)):
        if len(gts) != len(ign):
            raise DataContractError("ignore flags must align with ground truth")
        total_gt += sum(1 for flag in ign if not flag)
        flags, _ = _greedy_flags(dets, gts, ign, iou_threshold)
        for di, flag, _ in flags:
            if flag == "ignored":
                continue
            det = dets[di]
            entries.append((-det.confidence, si, det.box.x, det.box.y,
                            flag == "tp"))
    if total_gt == 0:
        raise DataContractError("no ground truth in the evaluation subset")

    entries.sort()
    operating_points = [(0.0, 1.0)]
    cum_tp = cum_fp = 0
    for i, (neg_conf, _, _, _, is_tp) in enumerate(entries):
        cum_tp += is_tp
        cum_fp += not is_tp
        last_of_threshold = (i + 1 == len(entries)
                            or entries[i + 1][0] != neg_conf)
        if last_of_threshold:
            operating_points.append((cum_fp / n_scenes,
                                     1.0 - cum_tp / total_gt))

    sampled = []
    min_fppi_point = min(operating_points)
    for anchor in FPPI_ANCHORS:
        reachable = [mr for fppi, mr in operating_points if fppi <= anchor]
        sampled.append(min(reachable) if reachable else min_fppi_point[1])
    miss_rates = np.array(sampled)
    if np.all(miss_rates == 0.0):
        mr2 = 0.0
    else:
        mr2 = float(np.exp(np.mean(np.log(np.maximum(miss_rates,
                                                     MISS_RATE_FLOOR)))))
    return MissRateCurve(anchors=FPPI_ANCHORS.copy(), miss_rates=miss_rates,
                         mr2=mr2, operating_points=operating_points)


# -- subset evaluation -------------------------------------------------------

def scene_ground_truth(scene: Scene) -> list[tuple[Box, bool]]:
    """(box, occluded) pairs of a scene's pedestrians."""
    return [(p.box, p.occluded) for p in scene.pedestrians]


def _subset_ignored(occluded: bool, subset: str) -> bool:
    if subset == "reasonable":
        return occluded
    if subset == "occluded":
        return not occluded
    return False


def subset_curves(detections_per_scene: Sequence[Sequence[Detection]],
                  ground_truth: Sequence[Sequence[tuple[Box, bool]]],
                  subsets: Sequence[str] = SUBSETS,
                  iou_threshold: float = 0.5) -> dict[str, MissRateCurve]:
    """Miss-rate curves of already-scored scenes, one per requested subset.

    Ground truths outside a subset become ignore regions: detections claimed
    by them are dropped from both the hit and false-positive counts.
    """
    bad = [s for s in subsets if s not in SUBSETS]
    if bad:
        raise DataContractError(f"subset must be one of {SUBSETS}, got {bad[0]!r}")
    boxes = [[box for box, _ in gts] for gts in ground_truth]
    curves = {}
    for subset in subsets:
        ignored = [[_subset_ignored(occ, subset) for _, occ in gts]
                   for gts in ground_truth]
        curves[subset] = mr2_curve(detections_per_scene, boxes, ignored,
                                   iou_threshold)
    return curves


def evaluate_scenes(scenes: Sequence[Scene], params: ParamStore,
                    weights: ScoreWeights,
                    indices: dict[int, HnswIndex] | None = None,
                    subset: str = "all", iou_threshold: float = 0.5,
                    ground_truth: Sequence[Sequence[tuple[Box, bool]]] | None = None,
                    ) -> MissRateCurve:
    """Score every proposal and reduce to a miss-rate curve for one subset."""
    if subset not in SUBSETS:
        raise DataContractError(f"subset must be one of {SUBSETS}, got {subset!r}")
    if ground_truth is None:
        ground_truth = [scene_ground_truth(s) for s in scenes]
    if len(ground_truth) != len(scenes):
        raise DataContractError("ground truth must align with scenes")
    detections = [score_scene(s, params, indices, weights) for s in scenes]
    return subset_curves(detections, ground_truth, (subset,), iou_threshold)[subset]


# -- reporting ---------------------------------------------------------------

def curve_csv(curve: MissRateCurve) -> str:
    """The full operating curve as comma-separated (fppi, miss_rate) rows."""
    lines = ["fppi,miss_rate"]
    lines += [f"{fppi:.10g},{mr:.10g}" for fppi, mr in curve.operating_points]
    return "\n".join(lines) + "\n"


def format_curve_report(title: str, curves: dict[str, MissRateCurve],
                        timing_seconds_per_scene: float | None = None) -> str:
    """Human-readable evaluation summary across subsets."""
    lines = [title, "=" * len(title)]
    for subset, curve in curves.items():
        lines.append(f"\n[{subset}] log-average miss rate: {curve.mr2:.6f}")
        lines.append("  fppi anchor -> miss rate")
        for anchor, mr in zip(curve.anchors, curve.miss_rates):
            lines.append(f"  {anchor:10.6f} -> {mr:.6f}")
    if timing_seconds_per_scene is not None:
        lines.append(f"\nscoring time per scene: {timing_seconds_per_scene * 1e3:.2f} ms")
    return "\n".join(lines) + "\n"
