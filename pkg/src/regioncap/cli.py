"""Operator surface: gen-data, train, describe, evaluate, retrieve, detect.

Every command takes ``--config`` (JSON, strict keys) and ``--seed`` and echoes
its fully resolved configuration into the output directory, so any run can be
reproduced from its artifacts.  Exit codes: 0 success, 1 usage/config error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datasynth, evaluation, geometry, render, training
from .config import RunConfig, load_config, save_config, validate_config
from .errors import ConfigError, DataError, NumericError
from .model import DenseCaptioner


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    validate_config(cfg)
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")


def _load_model(path, cfg_override=None):
    model, meta, _ = DenseCaptioner.load(path)
    if cfg_override is not None:
        model.cfg.eval = cfg_override.eval
        model.cfg.retrieval = cfg_override.retrieval
    return model, meta


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    manifest = datasynth.write_dataset(out, cfg, args.n_images)
    save_config(cfg, out / "config.json")
    print(f"wrote {manifest['n_images']} images "
          f"({manifest['splits']}) with {manifest['n_regions']} regions to {out}")
    print(f"vocabulary: {manifest['vocabulary']['size']} words "
          f"(min_count={manifest['vocabulary']['min_count']}); "
          f"drops: {manifest['drops']}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    bundle = datasynth.read_dataset(args.dataset)
    out = Path(args.out)
    _echo_config(cfg, out)

    def progress(it, bd):
        print(f"iter {it:6d}  total {bd.total:8.4f}  caption {bd.caption:8.4f}")

    if args.resume:
        summary = training.resume_training(args.resume, bundle, cfg, out, progress=progress)
    else:
        model = DenseCaptioner.build(cfg, bundle.vocab, np.random.default_rng(cfg.seed))
        summary = training.train_loop(model, bundle, cfg, out, progress=progress)
    render.save_loss_curve(summary["log"], out / "loss_curve.png")
    print(f"final checkpoint: {summary['checkpoint']}")
    print(f"loss {summary['first_total']:.4f} -> {summary['final_total']:.4f} "
          f"over {summary['iterations']} iterations")
    return 0


def _describe_to_records(model, image, image_key, max_regions, nms_iou):
    h, w = image.shape[:2]
    outputs = model.describe(image, nms_iou=nms_iou)
    regions = []
    for box, tokens, conf in outputs:
        corners = geometry.to_corners(box)
        clipped = render.clip_corners(corners, w, h)
        if clipped is None:
            continue
        regions.append({"box": [round(v, 4) for v in clipped],
                        "caption": " ".join(tokens), "confidence": round(conf, 6)})
        if len(regions) >= max_regions:
            break
    return {"image": image_key, "regions": regions}


def cmd_describe(args) -> int:
    model, _ = _load_model(args.checkpoint)
    image = datasynth.read_ppm(args.image)
    out = Path(args.out)
    _echo_config(model.cfg, out)
    record = _describe_to_records(model, image, str(args.image),
                                  args.max_regions, args.nms_iou)
    evaluation.write_predictions(out / "predictions.jsonl", [record])
    annotated = render.annotate_image(
        image, [(r["box"], f"{r['caption']} {r['confidence']:.2f}")
                for r in record["regions"][:args.max_render]])
    datasynth.write_ppm(out / "annotated.ppm", annotated)
    print(f"{len(record['regions'])} regions -> {out / 'predictions.jsonl'}")
    return 0


def cmd_evaluate(args) -> int:
    gt_keys, gt_regions = evaluation.read_prediction_file(args.ground_truth,
                                                          need_confidence=False)
    pred_keys, pred_regions = evaluation.read_prediction_file(args.predictions)
    gt_by_key = dict(zip(gt_keys, gt_regions))
    unknown = [k for k in pred_keys if k not in gt_by_key]
    if unknown:
        raise DataError(f"predictions reference images absent from ground truth: "
                        f"{unknown[:3]}")
    preds_by_key = dict(zip(pred_keys, pred_regions))

    cfg = _load_cfg(args)
    merged, preds = [], []
    for key in gt_keys:
        gts = gt_by_key[key]
        boxes = np.stack([g.box for g in gts])
        merged.append(evaluation.merge_references(
            boxes, [g.tokens for g in gts], iou_thresh=cfg.eval.merge_iou))
        preds.append(preds_by_key.get(key, []))

    report = evaluation.dense_cap_ap(preds, merged, cfg.eval.iou_thresholds,
                                     cfg.eval.lang_thresholds)
    if report.n_predictions:
        report.language_only = evaluation.language_only_score(preds, merged)
    out = Path(args.out)
    _echo_config(cfg, out)
    (out / "eval_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "eval_report.txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


def _pool_records(bundle, split: str, pool_size: int):
    records = bundle.records if split == "all" else bundle.split(split)
    if pool_size:
        records = records[:pool_size]
    if not records:
        raise DataError(f"split {split!r} has no images")
    return records


def cmd_retrieve(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _load_model(args.checkpoint, cfg_override=cfg if args.config else None)
    bundle = datasynth.read_dataset(args.dataset)
    records = _pool_records(bundle, args.split, args.pool_size)
    rc = model.cfg.retrieval
    n_queries = args.n_queries if args.n_queries is not None else rc.n_queries
    per_query = args.captions_per_query or rc.captions_per_query
    if len(records) < n_queries:
        raise DataError(f"pool of {len(records)} images cannot serve "
                        f"{n_queries} queries")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    report = evaluation.retrieval_eval(model, bundle, records, n_queries,
                                       per_query, rc.top_proposals, rng,
                                       nms_iou=rc.nms_iou)
    out = Path(args.out)
    _echo_config(cfg, out)
    (out / "retrieval_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"pool {report.pool_size} images, {report.n_queries} queries of {per_query}")
    print(f"R@1 {report.recall_at[1]:.3f}  R@5 {report.recall_at[5]:.3f}  "
          f"R@10 {report.recall_at[10]:.3f}  median rank {report.median_rank:.1f}")
    print(f"grounding IoU recall@0.1/0.3/0.5: "
          f"{report.iou_recall_at[0.1]:.3f}/{report.iou_recall_at[0.3]:.3f}/"
          f"{report.iou_recall_at[0.5]:.3f}  median IoU {report.median_iou:.3f}")
    return 0


def cmd_detect(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _load_model(args.checkpoint, cfg_override=cfg if args.config else None)
    bundle = datasynth.read_dataset(args.dataset)
    records = _pool_records(bundle, args.split, args.pool_size)
    tokens = args.query.lower().split()
    if not tokens:
        raise ConfigError("empty query")
    idx = model.vocab.encode(tokens)
    if all(i == model.vocab.UNK for i in idx):
        raise DataError(f"query {args.query!r} has no in-vocabulary tokens")

    hits = evaluation.open_world_detect(model, bundle, records, tokens,
                                        top_n=args.top_n,
                                        top_p=model.cfg.retrieval.top_proposals,
                                        nms_iou=model.cfg.retrieval.nms_iou)
    out = Path(args.out)
    _echo_config(cfg, out)
    entries = []
    crops = []
    for rec_idx, box, score in hits:
        rec = records[rec_idx]
        corners = geometry.to_corners(box)
        clipped = render.clip_corners(corners, rec.width, rec.height)
        entries.append({"image": rec.path, "box": list(clipped) if clipped else None,
                        "score": score})
        if clipped is not None:
            crops.append((render.crop_region(bundle.load_image(rec), clipped),
                          f"{score:.2f}"))
    (out / "detections.json").write_text(
        json.dumps({"query": args.query, "detections": entries},
                   indent=2, sort_keys=True) + "\n")
    datasynth.write_ppm(out / "panel.ppm", render.detection_panel(crops))
    print(f"query {args.query!r}: wrote {len(entries)} detections to {out}")
    return 0


# ---------------------------------------------------------------------------
# Wiring


def build_parser() -> _Parser:
    p = _Parser(prog="regioncap",
                description="Joint region localization and captioning on a "
                            "synthetic shapes benchmark.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (strict keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-images", type=int, required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int, help="override train.iterations")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("describe", help="dense-caption one image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-regions", type=int, default=300)
    sp.add_argument("--max-render", type=int, default=8,
                    help="regions drawn onto the annotated image")
    sp.add_argument("--nms-iou", type=float, default=None)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("evaluate", help="score a prediction file against ground truth")
    common(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("retrieve", help="caption-query image retrieval over a pool")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp.add_argument("--pool-size", type=int, default=0, help="0 = whole split")
    sp.add_argument("--n-queries", type=int, default=None)
    sp.add_argument("--captions-per-query", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("detect", help="open-world detection of a text query")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sp.add_argument("--pool-size", type=int, default=0)
    sp.add_argument("--query", required=True)
    sp.add_argument("--top-n", type=int, default=6)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
