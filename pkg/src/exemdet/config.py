"""Run configuration: one JSON file drives the whole pipeline.

The file has one section per pipeline stage (``data``, ``dictionary``,
``training``, ``index``, ``scoring``, ``paths``) plus a top-level master
``seed``. Any per-stage seed left null derives from the master seed, so a
single integer replays the entire pipeline; explicit seeds win over derived
ones. :func:`parse_config` validates everything eagerly and returns a
:class:`ResolvedConfig` holding ready-to-use parameter objects, the
canonical section dictionaries (for hashing and the report echo), and the
artifact paths.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .contrastive import ContrastiveParams, ProjectionConfig, TrainSchedule
from .errors import ConfigError, DataContractError
from .evaluate import SUBSETS, ScoreWeights
from .hnsw import HnswParams
from .levels import LEVELS
from .synth import SceneSpec

__all__ = [
    "DictionarySection",
    "TrainingSection",
    "IndexSection",
    "ScoringSection",
    "PathsSection",
    "ResolvedConfig",
    "parse_config",
    "load_config",
    "read_config_doc",
    "canonical_json",
    "section_hashes",
    "SEED_STAGES",
]

# Stage order for deriving per-stage seeds from the master seed.
SEED_STAGES = ("data", "dictionary", "init", "offline", "online", "index")


def derive_stage_seeds(master_seed: int) -> dict[str, int]:
    """One independent seed per pipeline stage, derived from the master."""
    words = np.random.SeedSequence(master_seed).generate_state(len(SEED_STAGES))
    return {name: int(word) for name, word in zip(SEED_STAGES, words)}


# -- section schemas ----------------------------------------------------------

@dataclass
class DictionarySection:
    n_clusters: int = 8
    seed: int | None = None
    target_occluded_ratio: float | None = None
    clustering_level: int = 5

    def __post_init__(self) -> None:
        if self.n_clusters < 1:
            raise ConfigError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if self.clustering_level not in LEVELS:
            raise ConfigError(
                f"clustering_level must be one of {LEVELS}, got {self.clustering_level}")
        if self.target_occluded_ratio is not None and not (
                0.0 <= self.target_occluded_ratio < 1.0):
            raise ConfigError(
                f"target_occluded_ratio must lie in [0, 1), got {self.target_occluded_ratio}")


@dataclass
class TrainingSection:
    tau: float = 0.2
    level_weights: tuple[float, ...] = (1.0, 0.5, 0.5, 0.5)
    alpha: float = 0.5
    hidden_dim: int = 32
    embed_dim: int = 16
    offline_steps: int = 150
    online_steps: int = 400
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    negatives_per_step: int = 8
    use_transform: bool = True
    use_offline: bool = True
    init_seed: int | None = None
    offline_seed: int | None = None
    online_seed: int | None = None

    def contrastive(self) -> ContrastiveParams:
        return ContrastiveParams(tau=self.tau,
                                 level_weights=tuple(self.level_weights),
                                 alpha=self.alpha)

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(hidden_dim=self.hidden_dim,
                                embed_dim=self.embed_dim)

    def schedule(self, steps: int) -> TrainSchedule:
        return TrainSchedule(steps=steps, lr_initial=self.lr_initial,
                             lr_final=self.lr_final,
                             negatives_per_step=self.negatives_per_step)

    def __post_init__(self) -> None:
        # Building the parameter objects runs their own validation now, so a
        # bad value fails at config-load time with the offending field named.
        self.contrastive()
        self.projection()
        self.schedule(max(self.offline_steps, self.online_steps, 0))
        if self.offline_steps < 0 or self.online_steps < 0:
            raise ConfigError("step counts must be >= 0")


@dataclass
class IndexSection:
    m: int = 8
    ef_construction: int = 32
    ef_search: int = 64
    level_lambda: float | None = None
    seed: int | None = None

    def params(self, seed: int) -> HnswParams:
        lam = self.level_lambda
        if lam is None:
            lam = 1.0 / math.log(max(self.m, 2))
        return HnswParams(M=self.m, ef_construction=self.ef_construction,
                          ef_search=self.ef_search, level_lambda=lam,
                          seed=seed)

    def __post_init__(self) -> None:
        self.params(seed=0)


@dataclass
class ScoringSection:
    mu: float = 0.2
    lam: float = 0.1
    mode: str = "similarity"
    use_eci: bool = True
    iou_threshold: float = 0.5
    subsets: tuple[str, ...] = SUBSETS

    def weights(self) -> ScoreWeights:
        if not self.use_eci:
            return ScoreWeights(mu=0.0, lam=0.0, mode=self.mode)
        return ScoreWeights(mu=self.mu, lam=self.lam, mode=self.mode)

    def __post_init__(self) -> None:
        ScoreWeights(mu=self.mu, lam=self.lam, mode=self.mode)
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(
                f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if not self.subsets:
            raise ConfigError("subsets must name at least one subset")
        bad = [s for s in self.subsets if s not in SUBSETS]
        if bad:
            raise ConfigError(f"unknown subset {bad[0]!r}; choose from {SUBSETS}")


@dataclass
class PathsSection:
    """Artifact locations; file names are relative to ``workdir``."""

    workdir: str = "runs/default"
    train_store: str = "train_store.egfs"
    eval_store: str = "eval_store.egfs"
    train_ground_truth: str = "train_gt.json"
    eval_ground_truth: str = "eval_gt.json"
    dictionary: str = "dictionary.egdx"
    checkpoint_offline: str = "checkpoint_offline.egcp"
    checkpoint_online: str = "checkpoint_online.egcp"
    index_pattern: str = "index_l{level}.egnx"
    offline_log: str = "loss_offline.jsonl"
    online_log: str = "loss_online.jsonl"
    report: str = "report.txt"
    curve_pattern: str = "curve_{subset}.csv"
    rankings: str = "rankings.csv"
    ablation_json: str = "ablation.json"
    ablation_table: str = "ablation.txt"

    def __post_init__(self) -> None:
        if "{level}" not in self.index_pattern:
            raise ConfigError("index_pattern must contain '{level}'")
        if "{subset}" not in self.curve_pattern:
            raise ConfigError("curve_pattern must contain '{subset}'")

    def root(self) -> Path:
        return Path(self.workdir)

    def file(self, name: str) -> Path:
        return self.root() / name

    def index_path(self, level: int) -> Path:
        return self.file(self.index_pattern.format(level=level))

    def curve_path(self, subset: str) -> Path:
        return self.file(self.curve_pattern.format(subset=subset))

    def manifest_path(self, command: str) -> Path:
        return self.file(f"{command}.manifest.json")


# -- resolution ---------------------------------------------------------------

@dataclass
class ResolvedConfig:
    """A fully validated configuration with every seed made concrete.

    ``sections`` holds the canonical JSON-ready form of the five substance
    sections (paths and threads excluded: relocating artifacts must not
    change their hashes).
    """

    seed: int
    threads: int
    spec: SceneSpec
    dictionary: DictionarySection
    training: TrainingSection
    index: IndexSection
    scoring: ScoringSection
    paths: PathsSection
    sections: dict[str, dict] = field(repr=False)


def _tupled(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _listed(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_listed(v) for v in value]
    return value


def _check_fields(section: str, raw: Mapping[str, Any], cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(
            f"config section '{section}' has unknown field '{unknown[0]}'")


def _build_section(section: str, raw: Mapping[str, Any], cls):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config section '{section}' must be an object")
    _check_fields(section, raw, cls)
    kwargs = {k: _tupled(v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError as err:
        raise ConfigError(f"config section '{section}': {err}") from None
    except (DataContractError, ValueError, TypeError) as err:
        raise ConfigError(f"config section '{section}': {err}") from None


def _section_dict(obj) -> dict:
    return {k: _listed(v) for k, v in dataclasses.asdict(obj).items()}


def canonical_json(doc: Any) -> str:
    """Deterministic single-line JSON used for hashing and the config echo."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def section_hashes(sections: Mapping[str, dict]) -> dict[str, str]:
    return {name: hashlib.sha256(canonical_json(body).encode()).hexdigest()
            for name, body in sections.items()}


def parse_config(doc: Mapping[str, Any],
                 base_dir: str | os.PathLike | None = None) -> ResolvedConfig:
    """Validate a raw configuration mapping and resolve every seed.

    ``base_dir`` anchors a relative ``paths.workdir`` (defaults to the
    current directory; :func:`load_config` passes the config file's folder).
    """
    if not isinstance(doc, Mapping):
        raise ConfigError("configuration root must be a JSON object")
    known = {"seed", "threads", "data", "dictionary", "training", "index",
             "scoring", "paths"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level config key '{unknown[0]}'")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    threads = doc.get("threads", 1)
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        raise ConfigError(f"threads must be a positive integer, got {threads!r}")
    derived = derive_stage_seeds(seed)

    raw_data = doc.get("data", {})
    if not isinstance(raw_data, Mapping):
        raise ConfigError("config section 'data' must be an object")
    _check_fields("data", raw_data, SceneSpec)
    data_kwargs = {k: _tupled(v) for k, v in raw_data.items()}
    data_kwargs.setdefault("seed", derived["data"])
    try:
        spec = SceneSpec(**data_kwargs)
    except (DataContractError, ValueError, TypeError) as err:
        raise ConfigError(f"config section 'data': {err}") from None

    dictionary: DictionarySection = _build_section(
        "dictionary", doc.get("dictionary", {}), DictionarySection)
    training: TrainingSection = _build_section(
        "training", doc.get("training", {}), TrainingSection)
    index: IndexSection = _build_section("index", doc.get("index", {}),
                                         IndexSection)
    scoring: ScoringSection = _build_section("scoring", doc.get("scoring", {}),
                                             ScoringSection)
    paths: PathsSection = _build_section("paths", doc.get("paths", {}),
                                         PathsSection)

    if dictionary.seed is None:
        dictionary.seed = derived["dictionary"]
    if training.init_seed is None:
        training.init_seed = derived["init"]
    if training.offline_seed is None:
        training.offline_seed = derived["offline"]
    if training.online_seed is None:
        training.online_seed = derived["online"]
    if index.seed is None:
        index.seed = derived["index"]
    if index.level_lambda is None:
        index.level_lambda = 1.0 / math.log(max(index.m, 2))

    root = Path(base_dir) if base_dir is not None else Path.cwd()
    if not Path(paths.workdir).is_absolute():
        paths.workdir = str(root / paths.workdir)

    sections = {
        "data": _section_dict(spec),
        "dictionary": _section_dict(dictionary),
        "training": _section_dict(training),
        "index": _section_dict(index),
        "scoring": _section_dict(scoring),
    }
    return ResolvedConfig(seed=seed, threads=threads, spec=spec,
                          dictionary=dictionary, training=training,
                          index=index, scoring=scoring, paths=paths,
                          sections=sections)


def read_config_doc(path: str | os.PathLike) -> tuple[dict, Path]:
    """The raw JSON document plus the directory that anchors relative paths."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc, path.parent


def load_config(path: str | os.PathLike) -> ResolvedConfig:
    """Parse a JSON config file; relative workdirs anchor at the file's folder."""
    doc, base_dir = read_config_doc(path)
    return parse_config(doc, base_dir=base_dir)
