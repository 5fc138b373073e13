"""The exemplar dictionary: representative pedestrian crops chosen by
clustering, optionally rebalanced toward occluded examples.

Clustering runs on the flattened coarsest pyramid level. Each cluster
contributes the member crop closest to its center (the medoid in the
clustering space), so every exemplar is a real crop, never a synthetic mean.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _binio
from .errors import DataContractError
from .kmeans import run_kmeans
from .levels import LEVEL_CHANNELS, LEVELS, SPATIAL
from .synth import PyramidFeatures

DICTIONARY_MAGIC = b"EGDX"
DICTIONARY_VERSION = 1
DEFAULT_CLUSTERING_LEVEL = 5


@dataclass
class Exemplar:
    """One representative crop with optional per-level unit embeddings."""

    id: int
    source_features: PyramidFeatures
    occluded: bool
    embeddings: dict[int, np.ndarray] = field(default_factory=dict)

    def has_embeddings(self) -> bool:
        return set(self.embeddings) == set(LEVELS)


@dataclass
class ExemplarDictionary:
    """An ordered exemplar set plus the clustering provenance."""

    exemplars: list[Exemplar]
    n_clusters: int
    clustering_seed: int
    clustering_level: int = DEFAULT_CLUSTERING_LEVEL

    def __post_init__(self) -> None:
        ids = [e.id for e in self.exemplars]
        if len(set(ids)) != len(ids):
            raise DataContractError("exemplar ids must be unique")
        if self.clustering_level not in LEVELS:
            raise DataContractError(
                f"clustering_level must be one of {LEVELS}, got {self.clustering_level}")

    def __len__(self) -> int:
        return len(self.exemplars)

    def occluded_count(self) -> int:
        return sum(1 for e in self.exemplars if e.occluded)

    def occluded_ratio(self) -> float:
        return self.occluded_count() / len(self.exemplars)


def flatten_level(features: PyramidFeatures, level: int) -> np.ndarray:
    return features.maps[level].reshape(-1)


def build_dictionary(crops: Sequence[tuple[PyramidFeatures, bool]],
                     n_clusters: int, seed: int,
                     level: int = DEFAULT_CLUSTERING_LEVEL) -> ExemplarDictionary:
    """Cluster the crops and keep one medoid per cluster.

    ``crops`` pairs each feature pyramid with its occlusion flag. Exemplar ids
    are the cluster indices (0..n_clusters-1); ties in the medoid choice break
    toward the lowest crop index.
    """
    if not crops:
        raise DataContractError("cannot build a dictionary from zero crops")
    if n_clusters > len(crops):
        raise DataContractError(
            f"asked for {n_clusters} exemplars from only {len(crops)} crops")
    points = np.stack([flatten_level(f, level) for f, _ in crops])
    result = run_kmeans(points, n_clusters, seed)
    exemplars: list[Exemplar] = []
    for c in range(n_clusters):
        members = np.flatnonzero(result.assignments == c)
        if members.size == 0:
            raise DataContractError(f"cluster {c} ended empty; this is a bug")
        dists = np.linalg.norm(points[members] - result.centers[c], axis=1)
        best = members[int(np.argmin(dists))]   # argmin: lowest index on ties
        feats, occluded = crops[int(best)]
        exemplars.append(Exemplar(id=c, source_features=feats, occluded=occluded))
    return ExemplarDictionary(exemplars=exemplars, n_clusters=n_clusters,
                              clustering_seed=seed, clustering_level=level)


def rebalance_occluded(dictionary: ExemplarDictionary,
                       target_ratio: float) -> ExemplarDictionary:
    """Clone occluded exemplars round-robin until their share reaches the target.

    Returns a new dictionary; the input is untouched. With no occluded
    exemplars and a positive target the request is impossible.
    """
    if not 0.0 <= target_ratio < 1.0:
        raise DataContractError(f"target_ratio must lie in [0, 1), got {target_ratio}")
    occluded = [e for e in dictionary.exemplars if e.occluded]
    if not occluded and target_ratio > 0.0:
        raise DataContractError(
            "dictionary has no occluded exemplars; cannot raise their ratio")

    clones: list[Exemplar] = []
    next_id = max(e.id for e in dictionary.exemplars) + 1
    occ = len(occluded)
    total = len(dictionary.exemplars)
    i = 0
    while occ / total < target_ratio:
        source = occluded[i % len(occluded)]
        clones.append(Exemplar(id=next_id, source_features=source.source_features,
                               occluded=True,
                               embeddings={lv: v.copy() for lv, v in source.embeddings.items()}))
        next_id += 1
        occ += 1
        total += 1
        i += 1
    return ExemplarDictionary(exemplars=list(dictionary.exemplars) + clones,
                              n_clusters=dictionary.n_clusters,
                              clustering_seed=dictionary.clustering_seed,
                              clustering_level=dictionary.clustering_level)


def coverage_radius(dictionary: ExemplarDictionary,
                    crops: Sequence[PyramidFeatures]) -> float:
    """Worst-case distance from any crop to its nearest exemplar.

    Distances are Euclidean in the dictionary's clustering space (the
    flattened clustering level).
    """
    if not crops:
        raise DataContractError("coverage_radius needs at least one crop")
    level = dictionary.clustering_level
    exemplar_points = np.stack([flatten_level(e.source_features, level)
                                for e in dictionary.exemplars])
    worst = 0.0
    for features in crops:
        point = flatten_level(features, level)
        nearest = float(np.min(np.linalg.norm(exemplar_points - point, axis=1)))
        worst = max(worst, nearest)
    return worst


# -- dictionary serialization ------------------------------------------------

def save_dictionary(dictionary: ExemplarDictionary, path: str | os.PathLike) -> None:
    """Binary dictionary file: clustering provenance plus per-exemplar record.

    Embeddings are optional per exemplar; a flag byte says whether the four
    unit vectors follow the feature blocks.
    """
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(DICTIONARY_MAGIC)
        _binio.write_u32(fh, DICTIONARY_VERSION)
        _binio.write_u32(fh, dictionary.n_clusters)
        _binio.write_u32(fh, dictionary.clustering_seed)
        _binio.write_u32(fh, dictionary.clustering_level)
        _binio.write_u32(fh, len(dictionary.exemplars))
        for ex in dictionary.exemplars:
            _binio.write_u32(fh, ex.id)
            fh.write(b"\x01" if ex.occluded else b"\x00")
            for lv in LEVELS:
                _binio.write_f64_array(fh, ex.source_features.maps[lv])
            if ex.embeddings:
                if not ex.has_embeddings():
                    raise DataContractError(
                        f"exemplar {ex.id} has partial embeddings {sorted(ex.embeddings)}")
                dims = {lv: ex.embeddings[lv].shape[0] for lv in LEVELS}
                if len(set(dims.values())) != 1:
                    raise DataContractError(
                        f"exemplar {ex.id} embedding dims differ per level: {dims}")
                fh.write(b"\x01")
                _binio.write_u32(fh, dims[LEVELS[0]])
                for lv in LEVELS:
                    _binio.write_f64_array(fh, ex.embeddings[lv])
            else:
                fh.write(b"\x00")
    os.replace(tmp, path)


def load_dictionary(path: str | os.PathLike) -> ExemplarDictionary:
    with open(path, "rb") as fh:
        _binio.expect_magic(fh, DICTIONARY_MAGIC, "exemplar dictionary")
        version = _binio.read_u32(fh)
        if version != DICTIONARY_VERSION:
            raise DataContractError(f"unsupported dictionary version {version}")
        n_clusters = _binio.read_u32(fh)
        seed = _binio.read_u32(fh)
        level = _binio.read_u32(fh)
        count = _binio.read_u32(fh)
        exemplars: list[Exemplar] = []
        for _ in range(count):
            ex_id = _binio.read_u32(fh)
            occluded = _binio.read_exact(fh, 1) == b"\x01"
            maps = {lv: _binio.read_f64_array(fh, (LEVEL_CHANNELS[lv], SPATIAL, SPATIAL))
                    for lv in LEVELS}
            embeddings: dict[int, np.ndarray] = {}
            if _binio.read_exact(fh, 1) == b"\x01":
                dim = _binio.read_u32(fh)
                for lv in LEVELS:
                    embeddings[lv] = _binio.read_f64_array(fh, (dim,))
            exemplars.append(Exemplar(id=ex_id, source_features=PyramidFeatures(maps),
                                      occluded=occluded, embeddings=embeddings))
        if fh.read(1):
            raise DataContractError("dictionary file has trailing bytes")
    return ExemplarDictionary(exemplars=exemplars, n_clusters=n_clusters,
                              clustering_seed=seed, clustering_level=level)
