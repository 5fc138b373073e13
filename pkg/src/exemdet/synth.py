"""Seeded synthetic detection scenes with pyramid features per proposal.

A scene is a set of pedestrian ground-truth boxes plus proposal boxes around
them and background boxes away from them. No images exist: each box carries a
four-level feature pyramid drawn from a generative model
    - per appearance mode ``m``, a fixed prototype pyramid ``P_m``;
    - per background component ``j``, a low-magnitude pyramid ``B_j``;
    - a positive proposal with overlap ``v`` reads ``(1-rho) P_m + rho B_j``
      plus isotropic noise, where ``rho = 0.5 (1 - v)`` — the further the box
      drifts off the pedestrian, the more background leaks in;
    - negatives read a background component, or (at the clutter rate) a hard
      mixture ``0.6 P_m + 0.4 B_j`` that imitates a pedestrian;
    - occluded modes have the bottom rows of their shallow levels replaced by
      background statistics, the way a lower-body occluder would.

All randomness flows through counter-based streams keyed by ``(seed, domain,
index)``, so any scene can be regenerated bit-for-bit in isolation and the
train/eval splits never share draws.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _binio
from .errors import DataContractError
from .geometry import Box, iou
from .levels import LEVEL_CHANNELS, LEVELS, SPATIAL

# Proposals with max ground-truth overlap above TAU_POS are positives, below
# TAU_NEG negatives; the band between is unlabelable and never emitted.
TAU_POS: float = 0.6
TAU_NEG: float = 0.4

NUM_BACKGROUND_COMPONENTS: int = 4
BACKGROUND_SCALE: float = 0.3
HARD_NEGATIVE_PROTO_WEIGHT: float = 0.6
# Lower-body occlusion: bottom rows of the fine levels read as background.
OCCLUSION_ROWS = slice(4, SPATIAL)
OCCLUDED_LEVELS: tuple[int, ...] = (2, 3)

_PED_ASPECT: float = 0.41
_HEIGHT_RANGE: tuple[float, float] = (24.0, 240.0)
_MAX_GT_OVERLAP: float = 0.3
_PLACEMENT_TRIES: int = 64
_BAND_TRIES: int = 16

_DOMAIN_PROTOTYPE = 0
_DOMAIN_BACKGROUND = 1
_DOMAIN_TRAIN = 2
_DOMAIN_EVAL = 3

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"


def substream(seed: int, domain: int, index: int) -> np.random.Generator:
    """Counter-based generator for one (seed, domain, index) cell.

    Streams for different cells are statistically independent, and each is a
    pure function of its key, so any part of a dataset can be regenerated
    without replaying the rest.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF,
                    ((domain << 32) ^ index) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class PyramidFeatures:
    """Per-level feature maps: level -> (channels, 7, 7) float64 array."""

    maps: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        if set(self.maps) != set(LEVELS):
            raise DataContractError(
                f"feature pyramid must carry levels {LEVELS}, got {sorted(self.maps)}")
        for level, arr in self.maps.items():
            expected = (LEVEL_CHANNELS[level], SPATIAL, SPATIAL)
            if arr.shape != expected:
                raise DataContractError(
                    f"level {level} map has shape {arr.shape}, expected {expected}")

    def level(self, level: int) -> np.ndarray:
        return self.maps[level]

    def copy(self) -> "PyramidFeatures":
        return PyramidFeatures({lv: arr.copy() for lv, arr in self.maps.items()})

    def allclose(self, other: "PyramidFeatures") -> bool:
        return all(np.array_equal(self.maps[lv], other.maps[lv]) for lv in LEVELS)


@dataclass
class Pedestrian:
    """A ground-truth instance and its exact-crop feature pyramid."""

    box: Box
    mode_id: int
    occluded: bool
    features: PyramidFeatures


@dataclass
class Proposal:
    """A candidate box with its overlap, label, and feature pyramid."""

    box: Box
    iou_with_gt: float
    label: str
    gt_box: Box | None
    features: PyramidFeatures
    mode_id: int | None

    def __post_init__(self) -> None:
        if self.label not in (LABEL_POSITIVE, LABEL_NEGATIVE):
            raise DataContractError(f"unknown proposal label {self.label!r}")
        if not 0.0 <= self.iou_with_gt <= 1.0:
            raise DataContractError(f"iou_with_gt out of [0,1]: {self.iou_with_gt}")
        if self.iou_with_gt > 0.0 and self.gt_box is None:
            raise DataContractError("overlapping proposal must reference its ground truth")


@dataclass
class Scene:
    """One synthetic frame: ground truth plus labeled proposals."""

    index: int
    pedestrians: list[Pedestrian]
    proposals: list[Proposal]

    @property
    def gt_boxes(self) -> list[Box]:
        return [p.box for p in self.pedestrians]


@dataclass
class SceneSpec:
    """Configuration of the generative model; fully determines both splits."""

    seed: int
    num_scenes: int = 16
    pedestrians_per_scene: tuple[int, int] = (2, 4)
    appearance_modes: int = 8
    occluded_mode_ids: tuple[int, ...] = (6, 7)
    background_clutter: float = 0.3
    noise_sigma: float = 0.15
    proposal_iou_mix: tuple[tuple[tuple[float, float], float], ...] = (
        ((0.65, 1.0), 0.5),
        ((0.0, 0.35), 0.5),
    )
    proposals_per_pedestrian: int = 6
    background_negatives_per_scene: int = 8
    canvas: tuple[float, float] = (640.0, 480.0)

    def __post_init__(self) -> None:
        if self.num_scenes < 1:
            raise DataContractError(f"num_scenes must be >= 1, got {self.num_scenes}")
        lo, hi = self.pedestrians_per_scene
        if not (1 <= lo <= hi):
            raise DataContractError(
                f"pedestrians_per_scene must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.appearance_modes < 1:
            raise DataContractError("appearance_modes must be >= 1")
        bad = [m for m in self.occluded_mode_ids if not 0 <= m < self.appearance_modes]
        if bad:
            raise DataContractError(
                f"occluded_mode_ids {bad} outside [0, {self.appearance_modes})")
        if not 0.0 <= self.background_clutter <= 1.0:
            raise DataContractError(
                f"background_clutter must lie in [0,1], got {self.background_clutter}")
        if self.noise_sigma < 0.0:
            raise DataContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.proposals_per_pedestrian < 0 or self.background_negatives_per_scene < 0:
            raise DataContractError("proposal counts must be >= 0")
        if not self.proposal_iou_mix:
            raise DataContractError("proposal_iou_mix must list at least one band")
        for (lo_b, hi_b), weight in self.proposal_iou_mix:
            if not (0.0 <= lo_b <= hi_b <= 1.0):
                raise DataContractError(f"IoU band ({lo_b}, {hi_b}) is not ordered in [0,1]")
            if weight <= 0.0:
                raise DataContractError(f"IoU band weight must be > 0, got {weight}")


def _validate_bands(spec: SceneSpec) -> list[tuple[float, float, bool]]:
    """Classify each requested IoU band as positive or negative territory.

    A band must sit entirely on one side of the unlabeled zone
    (TAU_NEG, TAU_POS); a band that straddles it (or collapses onto one of the
    thresholds) could only emit proposals no label applies to.
    """
    bands: list[tuple[float, float, bool]] = []
    for (lo, hi), _weight in spec.proposal_iou_mix:
        if lo >= TAU_POS and not (lo == hi == TAU_POS):
            bands.append((lo, hi, True))
        elif hi <= TAU_NEG and not (lo == hi == TAU_NEG):
            bands.append((lo, hi, False))
        else:
            raise DataContractError(
                f"IoU band ({lo}, {hi}) overlaps the unlabeled zone "
                f"({TAU_NEG}, {TAU_POS}); every band must be fully positive "
                f"(lo >= {TAU_POS}) or fully negative (hi <= {TAU_NEG})")
    return bands


@dataclass
class _Palette:
    """The frozen prototypes and background components for one seed."""

    prototypes: list[PyramidFeatures]
    backgrounds: list[PyramidFeatures]


def _draw_pyramid(rng: np.random.Generator, scale: float = 1.0) -> PyramidFeatures:
    return PyramidFeatures({
        lv: scale * rng.standard_normal((LEVEL_CHANNELS[lv], SPATIAL, SPATIAL))
        for lv in LEVELS})


def _build_palette(spec: SceneSpec) -> _Palette:
    prototypes = [_draw_pyramid(substream(spec.seed, _DOMAIN_PROTOTYPE, m))
                  for m in range(spec.appearance_modes)]
    backgrounds = [_draw_pyramid(substream(spec.seed, _DOMAIN_BACKGROUND, j),
                                 scale=BACKGROUND_SCALE)
                   for j in range(NUM_BACKGROUND_COMPONENTS)]
    return _Palette(prototypes, backgrounds)


def _noisy(base: PyramidFeatures, sigma: float, rng: np.random.Generator) -> dict[int, np.ndarray]:
    return {lv: base.maps[lv] + sigma * rng.standard_normal(base.maps[lv].shape)
            for lv in LEVELS}


def _apply_occlusion(maps: dict[int, np.ndarray], background: PyramidFeatures,
                     sigma: float, rng: np.random.Generator) -> None:
    for lv in OCCLUDED_LEVELS:
        region = background.maps[lv][:, OCCLUSION_ROWS, :]
        maps[lv][:, OCCLUSION_ROWS, :] = region + sigma * rng.standard_normal(region.shape)


def _background_maps(palette: _Palette, spec: SceneSpec,
                     rng: np.random.Generator) -> dict[int, np.ndarray]:
    """A negative's features: plain background or a pedestrian-like mixture."""
    hard = rng.random() < spec.background_clutter
    j = int(rng.integers(NUM_BACKGROUND_COMPONENTS))
    if hard:
        m = int(rng.integers(spec.appearance_modes))
        base = PyramidFeatures({
            lv: HARD_NEGATIVE_PROTO_WEIGHT * palette.prototypes[m].maps[lv]
            + (1.0 - HARD_NEGATIVE_PROTO_WEIGHT) * palette.backgrounds[j].maps[lv]
            for lv in LEVELS})
    else:
        base = palette.backgrounds[j]
    return _noisy(base, spec.noise_sigma, rng)


def _shifted_box(gt: Box, target_iou: float, axis: int, sign: float) -> Box:
    """Slide a copy of ``gt`` along one axis so overlap equals ``target_iou``.

    For a pure translation by ``d`` along the width, IoU is
    ``(w - |d|) / (w + |d|)``; solving gives ``|d| = w (1-v) / (1+v)``.
    The box may leave the canvas; scenes have no walls, only the gt placement
    is confined.
    """
    if axis == 0:
        d = sign * gt.w * (1.0 - target_iou) / (1.0 + target_iou)
        return Box(gt.x + d, gt.y, gt.w, gt.h)
    d = sign * gt.h * (1.0 - target_iou) / (1.0 + target_iou)
    return Box(gt.x, gt.y + d, gt.w, gt.h)


def _match_against_gts(box: Box, gt_boxes: Sequence[Box]) -> tuple[float, Box | None]:
    best, best_gt = 0.0, None
    for gt in gt_boxes:
        v = iou(box, gt)
        if v > best:
            best, best_gt = v, gt
    return best, best_gt


def _generate_scene(index: int, spec: SceneSpec, palette: _Palette,
                    bands: list[tuple[float, float, bool]],
                    rng: np.random.Generator) -> Scene:
    canvas_w, canvas_h = spec.canvas
    lo, hi = spec.pedestrians_per_scene
    n_ped = int(rng.integers(lo, hi + 1))

    pedestrians: list[Pedestrian] = []
    bg_of: list[int] = []
    for _ in range(n_ped):
        for _attempt in range(_PLACEMENT_TRIES):
            h = math.exp(rng.uniform(math.log(_HEIGHT_RANGE[0]), math.log(_HEIGHT_RANGE[1])))
            w = h * _PED_ASPECT * math.exp(0.08 * rng.standard_normal())
            x = rng.uniform(0.0, max(canvas_w - w, 1.0))
            y = rng.uniform(0.0, max(canvas_h - h, 1.0))
            box = Box(x, y, w, h)
            if all(iou(box, p.box) <= _MAX_GT_OVERLAP for p in pedestrians):
                break
        else:
            raise DataContractError(
                f"scene {index}: could not place {n_ped} pedestrians with pairwise "
                f"overlap <= {_MAX_GT_OVERLAP}; lower pedestrians_per_scene")
        mode = int(rng.integers(spec.appearance_modes))
        j = int(rng.integers(NUM_BACKGROUND_COMPONENTS))
        occluded = mode in spec.occluded_mode_ids
        maps = _noisy(palette.prototypes[mode], spec.noise_sigma, rng)
        if occluded:
            _apply_occlusion(maps, palette.backgrounds[j], spec.noise_sigma, rng)
        pedestrians.append(Pedestrian(box, mode, occluded, PyramidFeatures(maps)))
        bg_of.append(j)

    gt_boxes = [p.box for p in pedestrians]
    weights = np.array([w for _band, w in spec.proposal_iou_mix])
    cumulative = np.cumsum(weights / weights.sum())

    proposals: list[Proposal] = []
    for ped, j in zip(pedestrians, bg_of):
        for _ in range(spec.proposals_per_pedestrian):
            proposal = None
            for _attempt in range(_BAND_TRIES):
                band_i = int(np.searchsorted(cumulative, rng.random(), side="right"))
                band_i = min(band_i, len(bands) - 1)
                b_lo, b_hi, is_positive = bands[band_i]
                u = rng.random()
                target = b_hi - (b_hi - b_lo) * u if is_positive else b_lo + (b_hi - b_lo) * u
                axis = int(rng.integers(2))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                box = _shifted_box(ped.box, target, axis, sign)
                overlap, matched = _match_against_gts(box, gt_boxes)
                if overlap > TAU_POS:
                    rho = 0.5 * (1.0 - overlap)
                    base = PyramidFeatures({
                        lv: (1.0 - rho) * palette.prototypes[ped.mode_id].maps[lv]
                        + rho * palette.backgrounds[j].maps[lv] for lv in LEVELS})
                    maps = _noisy(base, spec.noise_sigma, rng)
                    if ped.occluded:
                        _apply_occlusion(maps, palette.backgrounds[j], spec.noise_sigma, rng)
                    proposal = Proposal(box, overlap, LABEL_POSITIVE, matched,
                                        PyramidFeatures(maps), ped.mode_id)
                    break
                if overlap < TAU_NEG:
                    maps = _background_maps(palette, spec, rng)
                    proposal = Proposal(box, overlap, LABEL_NEGATIVE,
                                        matched if overlap > 0.0 else None,
                                        PyramidFeatures(maps), None)
                    break
                # The shifted box strayed into another pedestrian's unlabeled
                # zone; redraw band and shift.
            if proposal is not None:
                proposals.append(proposal)

    for _ in range(spec.background_negatives_per_scene):
        for _attempt in range(_PLACEMENT_TRIES):
            h = math.exp(rng.uniform(math.log(_HEIGHT_RANGE[0]), math.log(_HEIGHT_RANGE[1])))
            w = h * _PED_ASPECT * math.exp(0.08 * rng.standard_normal())
            x = rng.uniform(0.0, max(canvas_w - w, 1.0))
            y = rng.uniform(0.0, max(canvas_h - h, 1.0))
            box = Box(x, y, w, h)
            overlap, matched = _match_against_gts(box, gt_boxes)
            if overlap < TAU_NEG:
                maps = _background_maps(palette, spec, rng)
                proposals.append(Proposal(box, overlap, LABEL_NEGATIVE,
                                          matched if overlap > 0.0 else None,
                                          PyramidFeatures(maps), None))
                break
        # A crowded canvas may reject a few background draws; the scene simply
        # carries fewer background negatives then.

    return Scene(index, pedestrians, proposals)


def generate_dataset(spec: SceneSpec) -> tuple[list[Scene], list[Scene]]:
    """Materialize the train and eval splits for a spec.

    Both splits have ``spec.num_scenes`` scenes. Each scene is generated from
    its own counter-based stream, so regeneration is bit-exact and the splits
    are independent by construction.
    """
    bands = _validate_bands(spec)
    palette = _build_palette(spec)
    train = [_generate_scene(i, spec, palette, bands,
                             substream(spec.seed, _DOMAIN_TRAIN, i))
             for i in range(spec.num_scenes)]
    evaluation = [_generate_scene(i, spec, palette, bands,
                                  substream(spec.seed, _DOMAIN_EVAL, i))
                  for i in range(spec.num_scenes)]
    return train, evaluation


def crop_exemplar_features(scene: Scene, gt_box: Box) -> PyramidFeatures:
    """The exact-overlap feature pyramid of one ground-truth box."""
    for ped in scene.pedestrians:
        if ped.box == gt_box:
            return ped.features
    raise DataContractError(f"scene {scene.index} has no ground-truth box {gt_box}")


def collect_crops(scenes: Iterable[Scene]) -> list[tuple[PyramidFeatures, bool]]:
    """Every ground-truth crop with its occlusion flag, in scene order."""
    return [(ped.features, ped.occluded)
            for scene in scenes for ped in scene.pedestrians]


def collect_background_features(scenes: Iterable[Scene]) -> list[PyramidFeatures]:
    """Every negative proposal's features, in scene order."""
    return [prop.features for scene in scenes for prop in scene.proposals
            if prop.label == LABEL_NEGATIVE]


# -- feature-store serialization --------------------------------------------

FEATURE_STORE_MAGIC = b"EGFS"
FEATURE_STORE_VERSION = 2


def _write_maps(fh, features: PyramidFeatures) -> None:
    for lv in LEVELS:
        _binio.write_f64_array(fh, features.maps[lv])


def _read_maps(fh) -> PyramidFeatures:
    return PyramidFeatures({lv: _binio.read_f64_array(
        fh, (LEVEL_CHANNELS[lv], SPATIAL, SPATIAL)) for lv in LEVELS})


def write_feature_store(path: str | os.PathLike, scenes: Sequence[Scene]) -> None:
    """Write the scenes' ground-truth crops and proposals to one binary file."""
    peds = [(scene.index, ped) for scene in scenes for ped in scene.pedestrians]
    props = [(scene.index, prop) for scene in scenes for prop in scene.proposals]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(FEATURE_STORE_MAGIC)
        _binio.write_u32(fh, FEATURE_STORE_VERSION)
        _binio.write_u32(fh, len(scenes))
        _binio.write_u32(fh, len(LEVELS))
        for lv in LEVELS:
            _binio.write_u32(fh, lv)
            _binio.write_u32(fh, LEVEL_CHANNELS[lv])
            _binio.write_u32(fh, SPATIAL)
        _binio.write_u64(fh, len(peds))
        for scene_id, ped in peds:
            _binio.write_u32(fh, scene_id)
            for value in (ped.box.x, ped.box.y, ped.box.w, ped.box.h):
                _binio.write_f64(fh, value)
            fh.write(struct.pack("<i", ped.mode_id))
            fh.write(b"\x01" if ped.occluded else b"\x00")
            _write_maps(fh, ped.features)
        _binio.write_u64(fh, len(props))
        for scene_id, prop in props:
            _binio.write_u32(fh, scene_id)
            for value in (prop.box.x, prop.box.y, prop.box.w, prop.box.h):
                _binio.write_f64(fh, value)
            _binio.write_f64(fh, prop.iou_with_gt)
            fh.write(b"\x01" if prop.label == LABEL_POSITIVE else b"\x00")
            has_gt = prop.gt_box is not None
            fh.write(b"\x01" if has_gt else b"\x00")
            if has_gt:
                for value in (prop.gt_box.x, prop.gt_box.y, prop.gt_box.w, prop.gt_box.h):
                    _binio.write_f64(fh, value)
            mode = prop.mode_id if prop.mode_id is not None else -1
            fh.write(struct.pack("<i", mode))
            _write_maps(fh, prop.features)
    os.replace(tmp, path)


def read_feature_store(path: str | os.PathLike) -> list[Scene]:
    """Read a feature store back as fully populated scenes."""
    with open(path, "rb") as fh:
        _binio.expect_magic(fh, FEATURE_STORE_MAGIC, "feature store")
        version = _binio.read_u32(fh)
        if version != FEATURE_STORE_VERSION:
            raise DataContractError(f"unsupported feature-store version {version}")
        num_scenes = _binio.read_u32(fh)
        num_levels = _binio.read_u32(fh)
        descriptors = []
        for _ in range(num_levels):
            descriptors.append((_binio.read_u32(fh), _binio.read_u32(fh),
                                _binio.read_u32(fh)))
        expected = [(lv, LEVEL_CHANNELS[lv], SPATIAL) for lv in LEVELS]
        if descriptors != expected:
            raise DataContractError(
                f"feature-store level layout {descriptors} does not match {expected}")
        peds_by_scene: dict[int, list[Pedestrian]] = {}
        for _ in range(_binio.read_u64(fh)):
            scene_id = _binio.read_u32(fh)
            box = Box(*(_binio.read_f64(fh) for _ in range(4)))
            mode = struct.unpack("<i", _binio.read_exact(fh, 4))[0]
            occluded = _binio.read_exact(fh, 1) == b"\x01"
            ped = Pedestrian(box, mode, occluded, _read_maps(fh))
            peds_by_scene.setdefault(scene_id, []).append(ped)
        props_by_scene: dict[int, list[Proposal]] = {}
        for _ in range(_binio.read_u64(fh)):
            scene_id = _binio.read_u32(fh)
            box = Box(*(_binio.read_f64(fh) for _ in range(4)))
            overlap = _binio.read_f64(fh)
            label = LABEL_POSITIVE if _binio.read_exact(fh, 1) == b"\x01" else LABEL_NEGATIVE
            gt_box = None
            if _binio.read_exact(fh, 1) == b"\x01":
                gt_box = Box(*(_binio.read_f64(fh) for _ in range(4)))
            mode = struct.unpack("<i", _binio.read_exact(fh, 4))[0]
            prop = Proposal(box, overlap, label, gt_box, _read_maps(fh),
                            mode if mode >= 0 else None)
            props_by_scene.setdefault(scene_id, []).append(prop)
        if fh.read(1):
            raise DataContractError("feature store has trailing bytes")
    out_of_range = [sid for sid in (set(peds_by_scene) | set(props_by_scene))
                    if not 0 <= sid < num_scenes]
    if out_of_range:
        raise DataContractError(
            f"feature store header claims {num_scenes} scenes but records "
            f"reference {sorted(out_of_range)}")
    # Scenes without records still count (an evaluation divides by the number
    # of scenes), so reconstruct the full id range.
    return [Scene(i, peds_by_scene.get(i, []), props_by_scene.get(i, []))
            for i in range(num_scenes)]


# -- ground-truth sidecar ----------------------------------------------------

def write_ground_truth(path: str | os.PathLike, scenes: Sequence[Scene]) -> None:
    """Write ground-truth boxes and occlusion flags as deterministic JSON."""
    doc = {
        "version": 1,
        "scenes": [
            {
                "id": scene.index,
                "pedestrians": [
                    {"x": ped.box.x, "y": ped.box.y, "w": ped.box.w, "h": ped.box.h,
                     "occluded": ped.occluded, "mode_id": ped.mode_id}
                    for ped in scene.pedestrians
                ],
            }
            for scene in scenes
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def read_ground_truth(path: str | os.PathLike) -> dict[int, list[tuple[Box, bool]]]:
    """Scene id -> list of (gt box, occluded flag)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise DataContractError(f"unsupported ground-truth version {doc.get('version')}")
    out: dict[int, list[tuple[Box, bool]]] = {}
    for scene in doc["scenes"]:
        out[int(scene["id"])] = [
            (Box(p["x"], p["y"], p["w"], p["h"]), bool(p["occluded"]))
            for p in scene["pedestrians"]]
    return out
