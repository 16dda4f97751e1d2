"""Command-line surface: train, score, evaluate, synthesize, export.

Exit codes: 0 success, 2 configuration problem, 3 data problem.  Every
command is deterministic given identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .deviations import denoise_query
from .encoder import CheckpointError, load_checkpoint, save_checkpoint
from .features import (CapacityError, FormatError, InvariantError,
                       build_inference_manifest, hard_filter, read_feature_file,
                       read_manifest, write_feature_file, write_manifest)
from .metrics import evaluate, task_difficulty, UndefinedMetric
from .scoring import (prepare_references, project_rows, read_score_map,
                      write_score_map)
from .synthetic import SynthWorldSpec, WorldError, generate_world
from .training import TrainConfig, TrainingError, infer, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _load_json_config(path, cls):
    """Instantiate a dataclass from a JSON document, rejecting unknown keys."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def _read_features(path):
    try:
        return read_feature_file(path)
    except FileNotFoundError as exc:
        raise DataError(f"feature file not found: {path}") from exc
    except (FormatError, InvariantError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_manifest(path):
    try:
        return read_manifest(path)
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    except (FormatError, InvariantError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _query_ids(queries, manifest, same_file: bool, setting: str):
    if setting == "hard":
        manifest = dataclasses.replace(manifest, setting="hard")
        ids = hard_filter(queries, manifest)
    else:
        ids = list(range(queries.n_images))
    if same_file:
        held = set(manifest.normal_ids) | set(manifest.abnormal_ids)
        ids = [i for i in ids if i not in held]
    return ids


# --------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = _load_json_config(args.config, TrainConfig) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    pool = _read_features(args.features)
    try:
        result = train(pool, cfg, progress=lambda msg: print(msg, file=sys.stderr))
    except (TrainingError, CapacityError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    save_checkpoint(args.out, result.checkpoint)
    trace_path = args.trace or (str(args.out) + ".trace.tsv")
    Path(trace_path).write_text("\n".join(result.trace_lines()) + "\n", encoding="utf-8")
    print(f"checkpoint written to {args.out}")
    print(f"loss trace written to {trace_path}")
    return EXIT_OK


def cmd_manifest(args) -> int:
    dataset = _read_features(args.features)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
    try:
        manifest = build_inference_manifest(
            dataset, args.l1, args.l2, rng, args.setting,
            dataset_name=args.dataset_name, seed=args.seed,
            allow_equal_shots=args.allow_equal_shots)
    except (CapacityError, InvariantError) as exc:
        raise DataError(str(exc)) from exc
    write_manifest(args.out, manifest)
    print(f"manifest written to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    queries = _read_features(args.features)
    manifest = _read_manifest(args.manifest)
    refs = _read_features(args.ref_features) if args.ref_features else None

    if args.matching_only:
        mode, ckpt = "matching", None
    elif args.deviation_matching:
        mode, ckpt = "deviation-matching", None
    else:
        if not args.ckpt:
            raise ConfigError("--ckpt is required unless a matching-only mode is set")
        mode, ckpt = "encoded", _read_checkpoint(args.ckpt)
        if args.ablate_suppression:
            ckpt = dataclasses.replace(ckpt, suppress=False)

    same_file = refs is None
    ids = _query_ids(queries, manifest, same_file, manifest.setting)
    try:
        results = infer(queries, manifest, ckpt, reference_set=refs, query_ids=ids,
                        mode=mode, height=args.map_height, width=args.map_width,
                        upsample=args.upsample)
    except (ValueError, TrainingError) as exc:
        raise DataError(str(exc)) from exc

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for qid, smap in results:
        write_score_map(out_dir / f"{qid}.idsm", smap)
        lines.append(f"{qid}\t{smap.image_score:.8g}")
    (out_dir / "scores.tsv").write_text("\n".join(lines) + ("\n" if lines else ""),
                                        encoding="utf-8")
    print(f"{len(results)} score maps written to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    queries = _read_features(args.features)
    manifest = _read_manifest(args.manifest)
    refs = _read_features(args.ref_features) if args.ref_features else queries
    setting = args.setting or manifest.setting

    table = Path(args.scores) / "scores.tsv"
    if not table.exists():
        raise DataError(f"score table not found: {table}")
    scored = []
    for line in table.read_text(encoding="utf-8").splitlines():
        if line.strip():
            qid, score = line.split("\t")
            scored.append((int(qid), float(score)))

    if setting == "hard":
        allowed = set(_query_ids(queries, manifest, args.ref_features is None, "hard"))
        scored = [(qid, s) for qid, s in scored if qid in allowed]

    if not scored:
        raise DataError("no scored queries to evaluate")

    image_scores = [s for _, s in scored]
    image_labels = [int(queries.image_labels[qid]) for qid, _ in scored]
    maps, masks = [], []
    for qid, _ in scored:
        smap = read_score_map(Path(args.scores) / f"{qid}.idsm")
        maps.append(smap.pixel_map)
        h, w = smap.pixel_map.shape
        side = queries.grid_side
        grid = queries.patch_masks[qid].reshape(side, side)
        yi = np.clip((np.arange(h) * side) // max(h, 1), 0, side - 1)
        xi = np.clip((np.arange(w) * side) // max(w, 1), 0, side - 1)
        masks.append(grid[np.ix_(yi, xi)])

    difficulty = None
    try:
        abn_ids = list(manifest.abnormal_ids)
        test_abn = [qid for qid, _ in scored if queries.image_labels[qid] == 1]
        if test_abn:
            difficulty = task_difficulty(
                refs.features[abn_ids].reshape(-1, refs.channels),
                refs.patch_masks[abn_ids].reshape(-1),
                queries.features[test_abn].reshape(-1, queries.channels),
                queries.patch_masks[test_abn].reshape(-1),
            )
    except UndefinedMetric:
        difficulty = None

    report = evaluate(image_scores, image_labels, maps, masks, difficulty)
    text = report.to_text()
    print(text, end="")
    print(report.summary_pair())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = _load_json_config(args.spec, SynthWorldSpec) if args.spec else SynthWorldSpec()
    try:
        world = generate_world(spec)
    except WorldError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_file(out / "train.idfs", world.train_pool)
    write_feature_file(out / "test.idfs", world.test_set)
    np.save(out / "directions.npy", world.directions)
    np.save(out / "nuisance.npy", world.nuisance_basis)
    print(f"world written to {out}")
    return EXIT_OK


def cmd_export_deviations(args) -> int:
    queries = _read_features(args.features)
    manifest = _read_manifest(args.manifest)
    refs = _read_features(args.ref_features) if args.ref_features else None
    ckpt = _read_checkpoint(args.ckpt)

    source = refs if refs is not None else queries
    normal = source.features[list(manifest.normal_ids)].reshape(-1, source.channels)
    abnormal = source.features[list(manifest.abnormal_ids)].reshape(-1, source.channels)
    abn_mask = source.patch_masks[list(manifest.abnormal_ids)].reshape(-1)
    prep = prepare_references(normal, abnormal, abn_mask, queries.grid_side, ckpt)

    ids = _query_ids(queries, manifest, refs is None, manifest.setting)
    blocks = []
    id_lines = []
    tokens = ad.constant(prep.tokens)
    for qid in ids:
        field = denoise_query(queries.features[qid], prep.normals,
                              k=prep.knn, r=prep.rank, alpha=prep.alpha,
                              suppress=prep.suppress)
        with ad.no_grad():
            projected = project_rows(ad.constant(field.denoised), tokens)
        blocks.append(np.concatenate(
            [field.residuals, field.denoised, projected.data], axis=1))
        id_lines.extend(f"{qid}\t{p}" for p in range(queries.n_patches))
    matrix = (np.concatenate(blocks, axis=0) if blocks
              else np.zeros((0, 3 * queries.channels), dtype=np.float32))
    np.save(args.out, matrix.astype(np.float32))
    Path(str(args.out) + ".ids.tsv").write_text(
        "\n".join(id_lines) + ("\n" if id_lines else ""), encoding="utf-8")
    print(f"{matrix.shape[0]} deviation rows written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deviad",
        description="Few-shot anomaly detection on patch features via "
                    "denoised deviations and a learned deviation bank.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", formatter_class=fmt,
                       help="episodic training on a feature pool")
    p.add_argument("--features", required=True, help="training feature file")
    p.add_argument("--config", help="JSON training config (defaults when omitted)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--trace", help="loss trace path (default: <out>.trace.tsv)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("manifest", formatter_class=fmt,
                       help="fix inference references for a dataset")
    p.add_argument("--features", required=True, help="reference-source feature file")
    p.add_argument("--l1", type=int, default=2, help="normal reference shots")
    p.add_argument("--l2", type=int, default=1, help="abnormal reference shots")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--setting", choices=("general", "hard"), default="general",
                   help="evaluation setting recorded in the manifest")
    p.add_argument("--dataset-name", default="dataset", help="dataset id to record")
    p.add_argument("--allow-equal-shots", action="store_true",
                   help="permit L1 <= L2")
    p.add_argument("--out", required=True, help="manifest output path")
    p.set_defaults(fn=cmd_manifest)

    p = sub.add_parser("score", formatter_class=fmt,
                       help="score every query against fixed references")
    p.add_argument("--features", required=True, help="query feature file")
    p.add_argument("--manifest", required=True, help="reference manifest")
    p.add_argument("--ckpt", help="trained checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ref-features",
                   help="reference feature file (defaults to --features)")
    p.add_argument("--ablate-suppression", action="store_true",
                   help="score from raw residuals, skipping subspace suppression")
    p.add_argument("--matching-only", action="store_true",
                   help="nearest-neighbor baseline on raw features (no bank)")
    p.add_argument("--deviation-matching", action="store_true",
                   help="nearest-neighbor baseline on denoised deviations (no bank)")
    p.add_argument("--map-height", type=int, default=None,
                   help="pixel map height (default: patch grid side)")
    p.add_argument("--map-width", type=int, default=None,
                   help="pixel map width (default: patch grid side)")
    p.add_argument("--upsample", choices=("bilinear", "nearest"), default="bilinear",
                   help="patch-to-pixel interpolation")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="compute detection metrics over a score directory")
    p.add_argument("--scores", required=True, help="directory written by score")
    p.add_argument("--features", required=True, help="query feature file")
    p.add_argument("--manifest", required=True, help="reference manifest")
    p.add_argument("--ref-features",
                   help="reference feature file (defaults to --features)")
    p.add_argument("--setting", choices=("general", "hard"), default=None,
                   help="override the manifest setting")
    p.add_argument("--out", help="write the report to this path as well")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="generate a synthetic feature world")
    p.add_argument("--spec", help="JSON world spec (defaults when omitted)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("export-deviations", formatter_class=fmt,
                       help="dump residual/denoised/projected vectors per patch")
    p.add_argument("--features", required=True, help="query feature file")
    p.add_argument("--manifest", required=True, help="reference manifest")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output .npy matrix path")
    p.add_argument("--ref-features",
                   help="reference feature file (defaults to --features)")
    p.set_defaults(fn=cmd_export_deviations)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, InvariantError, CapacityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
