"""Command-line interface.

Subcommands: gen, train, infer-dist, superpix, eval, ablation, table1,
gradcheck.  Every command reads an optional ``--config`` file with
``--set key=value`` overrides and a ``--seed`` shortcut.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import apply_overrides, load_config, parse_config
from .evaluation import evaluate_model
from .experiments import (class_names, fit_estimator, fit_superpixel_svm,
                          format_number, infer_target_properties,
                          materialize_datasets, run_ablation,
                          run_distribution_report, run_gradient_checks,
                          train_regime, write_all_splits)
from .network import CurriculumSegmenter, load_checkpoint, save_checkpoint
from .raster import save_mask
from .superpixels import partition_to_mask

GRADCHECK_TOLERANCE = 1e-3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdaseg",
        description="Curriculum domain adaptation for pixel-wise segmentation "
                    "on synthetic paired scene domains.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="flat key=value configuration file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="override the global seed")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common],
                   help="write the source/target dataset splits to disk")
    sub.add_parser("train", parents=[common],
                   help="train one regime and write a checkpoint")
    sub.add_parser("infer-dist", parents=[common],
                   help="write estimated target-image label distributions")
    sub.add_parser("superpix", parents=[common],
                   help="write superpixel partitions and landmark lists")
    sub.add_parser("eval", parents=[common],
                   help="evaluate a checkpoint on the target test split")
    sub.add_parser("ablation", parents=[common],
                   help="train and score all six methods; write reports")
    sub.add_parser("table1", parents=[common],
                   help="write the distribution-match report")
    gc = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference audit of the training gradient")
    gc.add_argument("--probes", type=int, default=24)
    return parser


def _load(args) -> dict[str, object]:
    cfg = load_config(args.config) if args.config else parse_config("")
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _cmd_gen(cfg) -> int:
    root = str(cfg["data.root"]) or str(Path(str(cfg["output.dir"])) / "data")
    for path in write_all_splits(cfg, root):
        print(f"wrote {path}")
    return 0


def _cmd_train(cfg) -> int:
    data = materialize_datasets(cfg)
    regime = str(cfg["train.regime"])
    properties = None
    if regime != "source-only":
        estimator = fit_estimator(cfg, data.source_train)
        svm = fit_superpixel_svm(cfg, data.source_train)
        properties = infer_target_properties(cfg, data.target_train.images(),
                                             estimator, svm)
    seg = train_regime(cfg, regime, data, properties)
    out = Path(str(cfg["output.dir"]))
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / str(cfg["output.checkpoint"])
    save_checkpoint(ckpt, seg.model_)
    final = seg.history_[-1]
    print(f"trained regime={regime} epochs={cfg['train.epochs']} "
          f"final source term={format_number(final[0])} "
          f"target term={format_number(final[1])}")
    print(f"wrote {ckpt}")
    return 0


def _cmd_infer_dist(cfg) -> int:
    data = materialize_datasets(cfg)
    estimator = fit_estimator(cfg, data.source_train)
    out = Path(str(cfg["output.dir"]))
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    from .distributions import global_features
    for item_id, img in zip(data.target_train.manifest,
                            data.target_train.images()):
        dist = estimator.predict(global_features(img)[None, :])[0]
        lines.append(" ".join([item_id] + [format_number(p) for p in dist]))
    path = out / "distributions.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


def _cmd_superpix(cfg) -> int:
    data = materialize_datasets(cfg)
    estimator = fit_estimator(cfg, data.source_train)
    svm = fit_superpixel_svm(cfg, data.source_train)
    properties = infer_target_properties(cfg, data.target_train.images(),
                                         estimator, svm)
    out = Path(str(cfg["output.dir"])) / "superpixels"
    out.mkdir(parents=True, exist_ok=True)
    for item_id, prop in zip(data.target_train.manifest, properties):
        save_mask(partition_to_mask(prop.partition), out / f"sp_{item_id}.pgm")
        lines = [f"{lm.segment} {lm.label} {format_number(lm.confidence)}"
                 for lm in prop.landmarks]
        (out / f"landmarks_{item_id}.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(properties)} partitions under {out}")
    return 0


def _cmd_eval(cfg) -> int:
    ckpt = Path(str(cfg["output.dir"])) / str(cfg["output.checkpoint"])
    model, _ = load_checkpoint(ckpt)
    seg = CurriculumSegmenter()
    seg.model_ = model
    data = materialize_datasets(cfg)
    metrics = evaluate_model(seg, data.target_test)
    print(f"mean_iou {format_number(metrics.mean_iou)}")
    for name, iou in zip(class_names(model.num_classes), metrics.per_class_iou):
        print(f"iou {name} {format_number(iou)}")
    return 0


def _cmd_ablation(cfg) -> int:
    results = run_ablation(cfg)
    for method, metrics in results.items():
        print(f"{method}: mean IoU {metrics.mean_iou * 100:.2f}")
    print(f"wrote reports under {cfg['output.dir']}")
    return 0


def _cmd_table1(cfg) -> int:
    scores = run_distribution_report(cfg)
    for method, score in scores.items():
        print(f"{method}: mean chi2 {format_number(score)}")
    print(f"wrote reports under {cfg['output.dir']}")
    return 0


def _cmd_gradcheck(cfg, probes: int) -> int:
    worst, _ = run_gradient_checks(seed=int(cfg["seed"]), probes=probes)
    print(f"max relative gradient error over {probes} probes: {worst:.3e}")
    if worst > GRADCHECK_TOLERANCE:
        print(f"FAIL: exceeds {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 1
    print("PASS")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load(args)
        if args.command == "gen":
            return _cmd_gen(cfg)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "infer-dist":
            return _cmd_infer_dist(cfg)
        if args.command == "superpix":
            return _cmd_superpix(cfg)
        if args.command == "eval":
            return _cmd_eval(cfg)
        if args.command == "ablation":
            return _cmd_ablation(cfg)
        if args.command == "table1":
            return _cmd_table1(cfg)
        if args.command == "gradcheck":
            return _cmd_gradcheck(cfg, args.probes)
        parser.error(f"unknown command {args.command!r}")
    except Exception as exc:  # runtime failure -> message, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
