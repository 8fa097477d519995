"""Command-line entry point: `python cli.py <subcommand> ...`.

Every subcommand wraps one library operation. Data goes to files or stdout,
logs go to stderr. Failures print one line `error: <Kind>: <message>`.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import pandas as pd

from augment import AssetPool, SeedPolicy, enumerate_sets, find_set, generate_corpus
from charts import ablation_figure, pr_curve_figure
from config import load_config, load_ensemble_specs, with_section
from core import (
    ConfigError,
    D2lvError,
    load_feature_store,
    load_image,
    read_ground_truth,
    read_pairs,
    save_feature_store,
    write_pairs,
)
from evaluation import GroundTruth, RankedPairList, dedupe_best, micro_ap, pr_curve, recall_at_precision
from features import apply_pca_to_store, build_model, extract_all, fit_pca_on_store, load_pca, save_pca
from learncore import BASE_LR, schedule_rows
from matching import EnsembleSpec, TrickConfig, match_pipeline
from patches import build_detector, parse_plan, patches_frame, query_patches, reference_patches
from synth_bench import run_ablation, synth_bench

logger = logging.getLogger("d2lv")

IMAGE_SUFFIXES = {".ppm", ".png", ".jpg", ".jpeg", ".bmp", ".webp"}
USAGE_ERRORS = (ConfigError, FileNotFoundError, NotADirectoryError, IsADirectoryError)


def _image_listing(folder):
    folder = Path(folder)
    if not folder.is_dir():
        raise ConfigError(f"image directory not found: {folder}")
    return [(p.stem, p) for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]


def _models(cfg):
    return [build_model(m) for m in cfg.features.models]


def _pca_models(cfg, override=None, models=()):
    paths = dict(cfg.features.pca)
    if override:
        paths.update({m.model_id: override for m in models})
    return {mid: load_pca(path) for mid, path in paths.items()}


def _ensemble_specs(cfg, path=None):
    entries = load_ensemble_specs(path) if path else cfg.ensemble
    return [EnsembleSpec.from_config(e) for e in entries]


def cmd_corpus(args, cfg):
    if args.list_sets:
        return cmd_sets(args, cfg)
    if not args.sources or not args.out:
        raise ConfigError("corpus needs --sources and --out (or --list-sets)")
    aug_set = find_set(args.set, cfg.augment)
    sources = [p for _, p in _image_listing(args.sources)]
    manifest = generate_corpus(sources, aug_set, SeedPolicy(cfg.seed), args.out,
                               AssetPool.from_config(cfg.augment), jobs=cfg.jobs)
    print(f"wrote {int((manifest['status'] == 'ok').sum())} images for set {aug_set.name} to {args.out}")


def cmd_sets(args, cfg):
    for s in enumerate_sets(cfg.augment):
        advanced = s.advanced.value if s.advanced else "-"
        print(f"{s.name}\tadvanced={advanced}\tblack_white={str(s.black_white).lower()}")


def cmd_patches(args, cfg):
    if bool(args.ref) == bool(args.query):
        raise ConfigError("patches needs exactly one of --ref or --query")
    path = Path(args.ref or args.query)
    img = load_image(path)
    image_id = args.id or path.stem
    if args.ref:
        patches = reference_patches(img, parse_plan("reference", cfg.patches.reference_plan), cfg.patches, image_id)
    else:
        detector = build_detector(cfg.patches, args.detections)
        patches = query_patches(img, parse_plan("query", cfg.patches.query_plan), detector, cfg.patches, image_id)
    patches_frame(patches).to_csv(args.out or sys.stdout, index=False, lineterminator="\n")


def cmd_extract(args, cfg):
    if args.scales:
        cfg = with_section(cfg, "features", scales=args.scales)
    models = _models(cfg)
    plan_rules = cfg.patches.query_plan if args.role == "query" else cfg.patches.reference_plan
    detector = build_detector(cfg.patches, args.detections) if args.role == "query" else None
    store = extract_all(
        _image_listing(args.images),
        parse_plan(args.role, plan_rules),
        models,
        cfg.features.scales,
        pca=_pca_models(cfg, args.pca, models),
        role=args.role,
        cfg=cfg.patches,
        detector=detector,
        jobs=cfg.jobs,
    )
    save_feature_store(store, args.out)
    print(f"wrote {len(store)} records (dim {store.dim}) to {args.out}")


def cmd_pca_fit(args, cfg):
    store = load_feature_store(args.store)
    model = fit_pca_on_store(store, model=args.model, scale=args.scale,
                             d_out=args.dim or cfg.features.pca_dim, whiten=args.whiten or cfg.features.whiten)
    save_pca(model, args.out)
    print(f"PCA {model.d_raw} -> {model.d_out}, explained variance {model.explained_variance_ratio:.6f}")


def cmd_pca_apply(args, cfg):
    store = load_feature_store(args.store)
    pca = load_pca(args.pca)
    models = [args.model] if args.model else store.models()
    projected = apply_pca_to_store(store, {m: pca for m in models})
    save_feature_store(projected, args.out)
    print(f"wrote {len(projected)} records (dim {projected.dim}) to {args.out}")


def cmd_match(args, cfg):
    match_changes = {k: v for k, v in (("mode", args.mode), ("top_t", args.top_t)) if v is not None}
    if args.top_t == 0:
        match_changes["top_t"] = None
    if match_changes:
        cfg = with_section(cfg, "match", **match_changes)
    trick_changes = {k: v for k, v in (("partial_penalty", args.penalty), ("face_list", args.face_list)) if v is not None}
    if args.top2:
        trick_changes["top2_average"] = True
    if trick_changes:
        cfg = with_section(cfg, "tricks", **trick_changes)

    queries = [load_feature_store(p) for p in args.queries]
    references = [load_feature_store(p) for p in args.references]
    ranked = match_pipeline(
        queries,
        references,
        _ensemble_specs(cfg, args.specs),
        TrickConfig.from_settings(cfg.tricks, cfg.patches.min_side),
        mode=cfg.match.mode,
        top_t=cfg.match.top_t,
        block_size=cfg.match.block_size,
        lg_models=cfg.match.local_global_models,
        lg_scales=cfg.match.local_global_scales,
        jobs=cfg.jobs,
    )
    write_pairs(ranked.pairs, args.out or sys.stdout)
    logger.info("wrote %d ranked pairs", len(ranked))


def cmd_eval(args, cfg):
    raw = read_pairs(args.pairs)
    pairs = dedupe_best(raw)
    if len(pairs) < len(raw):
        logger.warning("dropped %d duplicate (query, reference) rows, kept the best score", len(raw) - len(pairs))
    ranked = RankedPairList.from_scores(pairs)
    gt = GroundTruth.from_pairs(read_ground_truth(args.gt), args.total_positives)
    print(f"uAP={micro_ap(ranked, gt):.6f}")
    print(f"R@P{round(args.target * 100)}={recall_at_precision(ranked, gt, args.target):.6f}")
    if args.curve or args.plot:
        curve = pr_curve(ranked, gt)
        if args.curve:
            pd.DataFrame(curve, columns=["recall", "precision"]).to_csv(args.curve, index=False, lineterminator="\n")
        if args.plot:
            pr_curve_figure(curve).write_html(args.plot)


def cmd_schedule(args, cfg):
    rows = schedule_rows(base_lr=args.base_lr)
    pd.DataFrame(rows, columns=["epoch", "ratio", "lr"]).to_csv(sys.stdout, index=False, lineterminator="\n")


def cmd_synth_bench(args, cfg):
    layout = synth_bench(args.out, args.refs, args.overlay, args.crop, args.distractors,
                         seed=cfg.seed if args.seed is None else args.seed, jobs=cfg.jobs)
    print(f"wrote benchmark to {layout.root}")


def cmd_bench(args, cfg):
    results = run_ablation(args.dir, cfg, modes=tuple(args.modes), jobs=cfg.jobs)
    results.to_csv(sys.stdout, index=False, float_format="%.6f", lineterminator="\n")
    if args.plot:
        ablation_figure(results).write_html(args.plot)


def build_parser():
    parser = argparse.ArgumentParser(prog="d2lv", description="Image copy detection with global-local patch matching.")
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--jobs", type=int, help="worker processes (default: D2LV_JOBS or 1)")
    parser.add_argument("--seed", dest="global_seed", type=int, help="override the config seed")
    parser.add_argument("--log-level", default=os.getenv("D2LV_LOG_LEVEL", "WARNING"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="augment source images into a training corpus",
                       description="Reads [augment] (all ranges, variants, select_every, asset dirs) and seed.")
    p.add_argument("--sources", type=Path, help="directory of source images")
    p.add_argument("--set", default="basic", help="augmentation set name (see `sets`)")
    p.add_argument("--out", type=Path)
    p.add_argument("--list-sets", action="store_true")
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("sets", help="list the augmentation sets",
                       description="Reads [augment] probabilities and black_white_sets.")
    p.set_defaults(func=cmd_sets)

    p = sub.add_parser("patches", help="dump the patch boxes of one image as CSV",
                       description="Reads [patches] query_plan, reference_plan, min_side, exact_ratio, "
                                   "third_ratio, proposal_min_side, detections and overlay_detector.")
    p.add_argument("--ref", type=Path)
    p.add_argument("--query", type=Path)
    p.add_argument("--id", help="image id (default: file stem)")
    p.add_argument("--detections", type=Path, help="CSV image_id,x,y,w,h of overlay boxes")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("extract", help="extract a feature store from a directory of images",
                       description="Reads [features] models, scales and pca, plus every [patches] key.")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--role", choices=["query", "reference"], default="reference")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pca", type=Path, help="PCA model applied to every descriptor model")
    p.add_argument("--scales", type=int, nargs="+")
    p.add_argument("--detections", type=Path)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pca-fit", help="fit PCA on a feature store",
                       description="Reads [features] pca_dim and whiten.")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--model")
    p.add_argument("--scale", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("pca-apply", help="project a feature store with a fitted PCA")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--pca", type=Path, required=True)
    p.add_argument("--model", help="only project this model (default: all)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pca_apply)

    p = sub.add_parser("match", help="score queries against references and write ranked pairs",
                       description="Reads [match] mode, top_t, block_size, local_global_models, "
                                   "local_global_scales; [tricks] partial_penalty, top2_average, face_list; "
                                   "[[ensemble]] specs; [patches] min_side.")
    p.add_argument("--queries", type=Path, nargs="+", required=True)
    p.add_argument("--references", type=Path, nargs="+", required=True)
    p.add_argument("--specs", type=Path, help="TOML file of [[ensemble]] tables")
    p.add_argument("--mode", choices=["global-global", "global-local", "local-global", "both"])
    p.add_argument("--top-t", type=int, help="candidate references per query patch (0 = all)")
    p.add_argument("--penalty", type=float, help="partial-patch penalty factor")
    p.add_argument("--top2", action="store_true", help="average the two best patch scores")
    p.add_argument("--face-list", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="uAP and recall at precision of a pair CSV")
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--total-positives", type=int)
    p.add_argument("--target", type=float, default=0.90)
    p.add_argument("--curve", type=Path, help="write the PR curve as CSV")
    p.add_argument("--plot", type=Path, help="write the PR curve as HTML")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="print the learning-rate schedule as CSV")
    p.add_argument("--base-lr", type=float, default=BASE_LR)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("synth-bench", help="generate the synthetic copy-detection benchmark",
                       description="Reads seed.")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--refs", type=int, default=200)
    p.add_argument("--overlay", type=int, default=50)
    p.add_argument("--crop", type=int, default=50)
    p.add_argument("--distractors", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_bench)

    p = sub.add_parser("bench", help="compare matching modes on a synth-bench directory",
                       description="Reads [features], [patches], [match], [tricks] and [[ensemble]].")
    p.add_argument("--dir", type=Path, required=True)
    p.add_argument("--modes", nargs="+", default=["global-global", "both"],
                   choices=["global-global", "global-local", "local-global", "both"])
    p.add_argument("--plot", type=Path)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, jobs=args.jobs, seed=args.global_seed)
        args.func(args, cfg)
    except USAGE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (D2lvError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
