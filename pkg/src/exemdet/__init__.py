"""Exemplar-guided contrastive proposal scoring on synthetic detection scenes.

The package is organised around a scikit-learn style estimator,
:class:`ExemplarContrastiveDetector`, backed by lower-level building blocks
that can be used on their own:

- :mod:`exemdet.synth` — seeded synthetic scene generation and the binary
  feature-store format
- :mod:`exemdet.exemplars` — k-means exemplar dictionary over pedestrian crops
- :mod:`exemdet.contrastive` — multi-level InfoNCE training (offline and
  online phases) on a small reverse-mode autodiff core
- :mod:`exemdet.hnsw` — navigable small-world index over exemplar embeddings
- :mod:`exemdet.evaluate` — confidence fusion, FPPI / miss-rate curves and
  the log-average miss-rate summary
- :mod:`exemdet.cli` — the ``exemdet`` command-line pipeline
"""

from .config import load_config, parse_config
from .contrastive import (
    ContrastiveParams,
    ProjectionConfig,
    TrainSchedule,
    TransformConfig,
    compute_dictionary_embeddings,
    embedding_margin,
    infonce,
    init_params,
    multilevel_loss,
    train_offline,
    train_online,
)
from .errors import ConfigError, DataContractError, NumericalError
from .evaluate import (
    SUBSETS,
    Detection,
    MissRateCurve,
    ScoreWeights,
    evaluate_scenes,
    mr2_curve,
    score_scene,
    subset_curves,
)
from .exemplars import (
    ExemplarDictionary,
    build_dictionary,
    coverage_radius,
    load_dictionary,
    rebalance_occluded,
    save_dictionary,
)
from .hnsw import HnswIndex, HnswParams, build_index, load_index, nearest, save_index
from .model import (
    ABLATION_ARMS,
    AblationRow,
    ExemplarContrastiveDetector,
    format_ablation_table,
    run_ablation,
)
from .params import ParamStore, load_checkpoint, save_checkpoint
from .synth import (
    Scene,
    SceneSpec,
    collect_crops,
    generate_dataset,
    read_feature_store,
    write_feature_store,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ARMS",
    "AblationRow",
    "ConfigError",
    "ContrastiveParams",
    "DataContractError",
    "Detection",
    "ExemplarContrastiveDetector",
    "ExemplarDictionary",
    "HnswIndex",
    "HnswParams",
    "MissRateCurve",
    "NumericalError",
    "ParamStore",
    "ProjectionConfig",
    "SUBSETS",
    "Scene",
    "SceneSpec",
    "ScoreWeights",
    "TrainSchedule",
    "TransformConfig",
    "__version__",
    "build_dictionary",
    "build_index",
    "collect_crops",
    "compute_dictionary_embeddings",
    "coverage_radius",
    "embedding_margin",
    "evaluate_scenes",
    "format_ablation_table",
    "generate_dataset",
    "infonce",
    "init_params",
    "load_checkpoint",
    "load_config",
    "load_dictionary",
    "load_index",
    "mr2_curve",
    "multilevel_loss",
    "nearest",
    "parse_config",
    "read_feature_store",
    "rebalance_occluded",
    "run_ablation",
    "save_checkpoint",
    "save_dictionary",
    "save_index",
    "score_scene",
    "subset_curves",
    "train_offline",
    "train_online",
    "write_feature_store",
]
