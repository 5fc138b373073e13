"""Command-line pipeline: ``gen-data``, ``build-dict``, ``train``, ``index``, ``eval``.

One JSON configuration file drives all five stages; each command reads its
declared input artifacts, writes its outputs plus a run manifest, and
refuses inputs whose recorded configuration hashes disagree with the
current run (``--allow-hash-mismatch`` overrides). Exit codes: 0 success,
2 configuration error, 3 data/contract error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import (ResolvedConfig, canonical_json, parse_config,
                     read_config_doc, section_hashes)
from .contrastive import (StepRecord, compute_dictionary_embeddings,
                          has_transform, init_params, train_offline,
                          train_online)
from .errors import ConfigError, DataContractError, NumericalError
from .evaluate import curve_csv, detection_ranking, format_curve_report, \
    score_scene, subset_curves
from .exemplars import (build_dictionary, load_dictionary, rebalance_occluded,
                        save_dictionary)
from .hnsw import build_index, load_index, save_index
from .levels import LEVELS
from .manifest import (RunManifest, check_upstream, hash_files, write_manifest)
from .model import format_ablation_table, run_ablation
from .params import load_checkpoint, save_checkpoint
from .synth import (collect_background_features, collect_crops,
                    generate_dataset, read_feature_store, read_ground_truth,
                    write_feature_store, write_ground_truth)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger(__name__)


# -- shared plumbing ----------------------------------------------------------

def _resolve_args(args: argparse.Namespace) -> ResolvedConfig:
    if args.config is not None:
        doc, base_dir = read_config_doc(args.config)
    else:
        doc, base_dir = {}, Path.cwd()
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.k is not None:
        doc.setdefault("dictionary", {})["n_clusters"] = args.k
    if args.mu is not None:
        doc.setdefault("scoring", {})["mu"] = args.mu
    if args.lam is not None:
        doc.setdefault("scoring", {})["lam"] = args.lam
    if args.mode is not None:
        doc.setdefault("scoring", {})["mode"] = args.mode
    if args.alpha is not None:
        doc.setdefault("training", {})["alpha"] = args.alpha
    if args.tau is not None:
        doc.setdefault("training", {})["tau"] = args.tau
    if args.threads is not None:
        doc["threads"] = args.threads
    return parse_config(doc, base_dir=base_dir)


def _require_files(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigError("missing input file(s): " + ", ".join(missing)
                          + "; run the upstream pipeline commands first")


def _finish(resolved: ResolvedConfig, command: str, started: float,
            inputs: Sequence[Path], artifacts: Sequence[Path]) -> None:
    root = resolved.paths.root()
    manifest = RunManifest(command=command, tool_version=__version__,
                           config=section_hashes(resolved.sections),
                           inputs=hash_files(inputs, root),
                           artifacts=hash_files(artifacts, root),
                           timing_seconds=time.perf_counter() - started)
    write_manifest(resolved.paths.manifest_path(command), manifest)
    logger.info("%s finished in %.2fs; %d artifact(s) under %s", command,
                manifest.timing_seconds, len(artifacts), root)


def _write_text(path: Path, text: str) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_step_log(path: Path, records: Sequence[StepRecord]) -> None:
    lines = []
    for r in records:
        doc = {"step": r.step, "phase": r.phase, "lr": r.lr, "loss": r.loss,
               "contrastive_loss": r.contrastive_loss,
               "detection_loss": r.detection_loss,
               "per_level": {str(k): v for k, v in sorted(r.per_level.items())}}
        lines.append(json.dumps(doc, sort_keys=True))
    _write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _config_echo(resolved: ResolvedConfig) -> str:
    return canonical_json({"seed": resolved.seed, **resolved.sections})


# -- commands -----------------------------------------------------------------

def cmd_gen_data(resolved: ResolvedConfig, args: argparse.Namespace) -> None:
    started = time.perf_counter()
    paths = resolved.paths
    paths.root().mkdir(parents=True, exist_ok=True)
    train, evaluation = generate_dataset(resolved.spec)
    artifacts = [paths.file(paths.train_store), paths.file(paths.train_ground_truth),
                 paths.file(paths.eval_store), paths.file(paths.eval_ground_truth)]
    write_feature_store(artifacts[0], train)
    write_ground_truth(artifacts[1], train)
    write_feature_store(artifacts[2], evaluation)
    write_ground_truth(artifacts[3], evaluation)
    _finish(resolved, "gen-data", started, inputs=[], artifacts=artifacts)


def cmd_build_dict(resolved: ResolvedConfig, args: argparse.Namespace) -> None:
    started = time.perf_counter()
    paths = resolved.paths
    store_path = paths.file(paths.train_store)
    _require_files(store_path)
    hashes = section_hashes(resolved.sections)
    check_upstream(paths.manifest_path("gen-data"), "gen-data", hashes,
                   args.allow_hash_mismatch)
    scenes = read_feature_store(store_path)
    crops = collect_crops(scenes)
    section = resolved.dictionary
    dictionary = build_dictionary(crops, section.n_clusters, section.seed,
                                  level=section.clustering_level)
    if section.target_occluded_ratio is not None:
        dictionary = rebalance_occluded(dictionary, section.target_occluded_ratio)
    out = paths.file(paths.dictionary)
    save_dictionary(dictionary, out)
    _finish(resolved, "build-dict", started, inputs=[store_path], artifacts=[out])


def cmd_train(resolved: ResolvedConfig, args: argparse.Namespace) -> None:
    started = time.perf_counter()
    paths, training = resolved.paths, resolved.training
    phase = args.phase
    store_path = paths.file(paths.train_store)
    dict_path = paths.file(paths.dictionary)
    _require_files(store_path, dict_path)
    hashes = section_hashes(resolved.sections)
    check_upstream(paths.manifest_path("gen-data"), "gen-data", hashes,
                   args.allow_hash_mismatch)
    check_upstream(paths.manifest_path("build-dict"), "build-dict", hashes,
                   args.allow_hash_mismatch)

    run_offline = phase in ("offline", "both")
    run_online = phase in ("online", "both")
    if run_offline and not (training.use_transform and training.use_offline):
        if phase == "offline":
            raise ConfigError("the offline phase needs training.use_transform "
                              "and training.use_offline enabled")
        run_offline = False

    scenes = read_feature_store(store_path)
    dictionary = load_dictionary(dict_path)
    cfg = training.contrastive()
    offline_ckpt = paths.file(paths.checkpoint_offline)
    online_ckpt = paths.file(paths.checkpoint_online)
    artifacts: list[Path] = []

    params = None
    if run_offline:
        params = init_params(training.init_seed, projection=training.projection(),
                             include_transform=True, include_heads=True)
        log: list[StepRecord] = []
        crops = collect_crops(scenes)
        train_offline([feats for feats, _ in crops],
                      collect_background_features(scenes), dictionary, params,
                      cfg, training.schedule(training.offline_steps),
                      seed=training.offline_seed, on_step=log.append)
        save_checkpoint(params, offline_ckpt)
        _write_step_log(paths.file(paths.offline_log), log)
        artifacts += [offline_ckpt, paths.file(paths.offline_log)]

    if run_online:
        if params is None:
            if training.use_transform and training.use_offline:
                # Resuming: continue from the persisted offline checkpoint.
                _require_files(offline_ckpt)
                params = load_checkpoint(offline_ckpt)
            else:
                params = init_params(training.init_seed,
                                     projection=training.projection(),
                                     include_transform=training.use_transform,
                                     include_heads=True)
        log = []
        train_online(scenes, dictionary, params, cfg,
                     training.schedule(training.online_steps),
                     seed=training.online_seed, on_step=log.append)
        save_checkpoint(params, online_ckpt)
        _write_step_log(paths.file(paths.online_log), log)
        artifacts += [online_ckpt, paths.file(paths.online_log)]

    _finish(resolved, "train", started, inputs=[store_path, dict_path],
            artifacts=artifacts)


def cmd_index(resolved: ResolvedConfig, args: argparse.Namespace) -> None:
    started = time.perf_counter()
    paths = resolved.paths
    dict_path = paths.file(paths.dictionary)
    ckpt_path = paths.file(paths.checkpoint_online)
    _require_files(dict_path, ckpt_path)
    hashes = section_hashes(resolved.sections)
    check_upstream(paths.manifest_path("build-dict"), "build-dict", hashes,
                   args.allow_hash_mismatch)
    check_upstream(paths.manifest_path("train"), "train", hashes,
                   args.allow_hash_mismatch)
    dictionary = load_dictionary(dict_path)
    params = load_checkpoint(ckpt_path)
    if not has_transform(params):
        raise DataContractError(
            "checkpoint has no transform trunk, so exemplar embeddings are "
            "missing; train with use_transform enabled before indexing")
    compute_dictionary_embeddings(dictionary, params)
    artifacts = []
    for level in LEVELS:
        index = build_index(dictionary, level,
                            resolved.index.params(seed=resolved.index.seed + level))
        out = paths.index_path(level)
        save_index(index, out)
        artifacts.append(out)
    _finish(resolved, "index", started, inputs=[dict_path, ckpt_path],
            artifacts=artifacts)


def _rankings_csv(detections_per_scene, scene_ids) -> str:
    lines = ["scene,rank,x,y,w,h,confidence"]
    for scene_id, detections in zip(scene_ids, detections_per_scene):
        for rank, det_i in enumerate(detection_ranking(detections)):
            det = detections[det_i]
            lines.append(f"{scene_id},{rank},{det.box.x:.10g},{det.box.y:.10g},"
                         f"{det.box.w:.10g},{det.box.h:.10g},{det.confidence:.10g}")
    return "\n".join(lines) + "\n"


def cmd_eval(resolved: ResolvedConfig, args: argparse.Namespace) -> None:
    started = time.perf_counter()
    paths, scoring = resolved.paths, resolved.scoring
    store_path = paths.file(paths.eval_store)
    gt_path = paths.file(paths.eval_ground_truth)
    ckpt_path = paths.file(paths.checkpoint_online)
    _require_files(store_path, gt_path, ckpt_path)
    hashes = section_hashes(resolved.sections)
    check_upstream(paths.manifest_path("gen-data"), "gen-data", hashes,
                   args.allow_hash_mismatch)
    check_upstream(paths.manifest_path("train"), "train", hashes,
                   args.allow_hash_mismatch)

    scenes = read_feature_store(store_path)
    gt_map = read_ground_truth(gt_path)
    missing = [s.index for s in scenes if s.index not in gt_map]
    if missing:
        raise DataContractError(
            f"ground-truth file lacks scenes {missing[:5]} present in the store")
    ground_truth = [gt_map[s.index] for s in scenes]
    params = load_checkpoint(ckpt_path)

    indices = None
    inputs = [store_path, gt_path, ckpt_path]
    if scoring.use_eci:
        if not resolved.training.use_transform:
            raise ConfigError("scoring.use_eci needs training.use_transform; "
                              "disable one of them")
        index_paths = [paths.index_path(level) for level in LEVELS]
        _require_files(*index_paths)
        check_upstream(paths.manifest_path("index"), "index", hashes,
                       args.allow_hash_mismatch)
        indices = {level: load_index(path)
                   for level, path in zip(LEVELS, index_paths)}
        inputs += index_paths
    weights = scoring.weights()

    scoring_started = time.perf_counter()
    detections = [score_scene(scene, params, indices, weights)
                  for scene in scenes]
    ms_per_scene = (time.perf_counter() - scoring_started) * 1e3 / len(scenes)

    curves = subset_curves(detections, ground_truth, scoring.subsets,
                           scoring.iou_threshold)
    report = ("proposal scoring evaluation\n"
              f"config {_config_echo(resolved)}\n\n"
              + format_curve_report("miss-rate curves", curves))
    artifacts = [paths.file(paths.report), paths.file(paths.rankings)]
    _write_text(artifacts[0], report)
    _write_text(artifacts[1],
                _rankings_csv(detections, [s.index for s in scenes]))
    for subset in scoring.subsets:
        out = paths.curve_path(subset)
        _write_text(out, curve_csv(curves[subset]))
        artifacts.append(out)
    logger.info("scored %d scenes at %.2f ms/scene", len(scenes), ms_per_scene)

    if args.ablation:
        train_path = paths.file(paths.train_store)
        _require_files(train_path)
        train_scenes = read_feature_store(train_path)
        rows = run_ablation(train_scenes, scenes, subsets=scoring.subsets,
                            detector_kwargs=_detector_kwargs(resolved))
        table_path = paths.file(paths.ablation_table)
        json_path = paths.file(paths.ablation_json)
        _write_text(table_path, format_ablation_table(rows))
        _write_text(json_path, json.dumps([dataclasses.asdict(r) for r in rows],
                                          sort_keys=True, indent=1) + "\n")
        artifacts += [table_path, json_path]
        inputs.append(train_path)

    _finish(resolved, "eval", started, inputs=inputs, artifacts=artifacts)


def _detector_kwargs(resolved: ResolvedConfig) -> dict:
    """Estimator parameters matching this configuration, for the ablation."""
    training, scoring = resolved.training, resolved.scoring
    return dict(n_clusters=resolved.dictionary.n_clusters,
                target_occluded_ratio=resolved.dictionary.target_occluded_ratio,
                tau=training.tau, level_weights=training.level_weights,
                alpha=training.alpha, hidden_dim=training.hidden_dim,
                embed_dim=training.embed_dim,
                offline_steps=training.offline_steps,
                online_steps=training.online_steps,
                lr_initial=training.lr_initial, lr_final=training.lr_final,
                negatives_per_step=training.negatives_per_step,
                mu=scoring.mu, lam=scoring.lam, scoring_mode=scoring.mode,
                index_m=resolved.index.m,
                ef_construction=resolved.index.ef_construction,
                ef_search=resolved.index.ef_search,
                iou_threshold=scoring.iou_threshold,
                random_state=resolved.seed)


# -- argument parsing ---------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-dict": cmd_build_dict,
    "train": cmd_train,
    "index": cmd_index,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the master seed")
    common.add_argument("--k", type=int, metavar="N",
                        help="override dictionary.n_clusters")
    common.add_argument("--mu", type=float, metavar="F",
                        help="override scoring.mu")
    common.add_argument("--lambda", type=float, dest="lam", metavar="F",
                        help="override scoring.lam")
    common.add_argument("--alpha", type=float, metavar="F",
                        help="override training.alpha")
    common.add_argument("--tau", type=float, metavar="F",
                        help="override training.tau")
    common.add_argument("--mode", choices=("verbatim", "similarity"),
                        help="override scoring.mode")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker budget (processing is currently sequential)")
    common.add_argument("--allow-hash-mismatch", action="store_true",
                        help="consume artifacts even if their recorded config "
                             "hashes disagree with this run")

    parser = argparse.ArgumentParser(
        prog="exemdet",
        description="Exemplar-guided contrastive proposal scoring pipeline.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common],
                   help="generate the synthetic train/eval feature stores")
    sub.add_parser("build-dict", parents=[common],
                   help="cluster training crops into the exemplar dictionary")
    train = sub.add_parser("train", parents=[common],
                           help="run offline pretraining and/or online training")
    train.add_argument("--phase", choices=("offline", "online", "both"),
                       default="both",
                       help="which training phase(s) to run (default: both)")
    sub.add_parser("index", parents=[common],
                   help="embed the dictionary and build per-level indices")
    ev = sub.add_parser("eval", parents=[common],
                        help="score held-out scenes and write the report")
    ev.add_argument("--ablation", action="store_true",
                    help="also fit and score the configuration ladder")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = _resolve_args(args)
        _COMMANDS[args.command](resolved, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataContractError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
