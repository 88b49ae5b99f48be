"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmark import BenchmarkConfig, aggregate_runs, run_benchmark
from .dataset import load_dataset, save_dataset, subset_images
from .detections import load_detections, save_detections
from .evaluator import METRIC_NAMES, EvalConfig, evaluate, save_report
from .exceptions import NumericError, ValidationError
from .features import SynthConfig, read_features, select_shots, synth_features, write_features
from .head import TrainConfig, init_head, load_heads, predict, save_heads, train_head
from .sampler import load_shotset, sample_kshot, save_shotset

EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("tfakit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ids(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _add_train_flags(p, lr, iters=2000):
    p.add_argument("--classifier", choices=("fc", "cosine"), default="cosine")
    p.add_argument("--alpha", type=float, default=20.0)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--loc-weight", type=float, default=1.0)
    p.add_argument("--freeze-base", action="store_true",
                   help="keep base-class classifier columns and regressor blocks fixed")
    p.add_argument("--init", choices=("random", "novel"), default="random")


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(iters=args.iters, batch_size=args.batch_size, lr=args.lr,
                       momentum=args.momentum, weight_decay=args.weight_decay,
                       seed=args.seed if seed is None else seed,
                       freeze_base_classifier_columns=args.freeze_base,
                       loc_weight=args.loc_weight)


def cmd_synth(args):
    if args.classes <= args.novel_classes:
        raise ValidationError("--classes must exceed --novel-classes")
    cfg = SynthConfig(
        n_classes_base=args.classes - args.novel_classes, n_classes_novel=args.novel_classes,
        dim=args.dim, per_class_count=args.per_class, class_separation=args.separation,
        noise_sigma=args.sigma, seed=args.seed, test_per_class=args.test_per_class,
    )
    d, train, test = synth_features(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(d, out / "annotations.json")
    write_features(train, out / "train.tfaf")
    write_features(test, out / "test.tfaf")
    print(f"wrote {out}/annotations.json ({d.counts[0]} images, {d.counts[1]} annotations), "
          f"train.tfaf ({len(train)} records), test.tfaf ({len(test)} records)")


def cmd_sample_shots(args):
    d = load_dataset(args.annotations)
    if args.features:
        d = subset_images(d, np.unique(read_features(args.features).image_ids).tolist())
    classes = _ids(args.classes) if args.classes else d.categories.ids
    shots = sample_kshot(d, classes, args.k, args.seed)
    save_shotset(shots, args.out)
    short = {c: s for c, s in shots.shortfalls.items() if s}
    print(f"wrote {args.out}: {sum(map(len, shots.picks.values()))} picks"
          + (f", shortfalls {short}" if short else ""))


def cmd_train_head(args):
    d = load_dataset(args.annotations)
    feats = read_features(args.features)
    base, novel = d.categories.base_ids, d.categories.novel_ids
    cfg = _train_config(args)
    if args.base_head is None:
        feats = feats.with_labels(base)
        heads = init_head("random", d=feats.dim, base_classes=base, seed=args.seed,
                          kind=args.classifier, alpha=args.alpha)
    else:
        if args.shots:
            pool = subset_images(d, np.unique(feats.image_ids).tolist())
            feats = select_shots(feats, pool, load_shotset(args.shots))
        heads = init_head(args.init, base_head=load_heads(args.base_head), novel_features=feats,
                          base_classes=base, novel_classes=novel, seed=args.seed,
                          kind=args.classifier, alpha=args.alpha, novel_cfg=cfg)
    heads, trace = train_head(heads, feats, cfg, base_classes=base)
    save_heads(heads, args.out)
    if args.trace:
        Path(args.trace).write_text("\n".join(repr(v) for v in trace) + "\n", encoding="utf-8")
    print(f"wrote {args.out}: {heads.kind} head, {heads.num_classes} classes, "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_predict(args):
    heads = load_heads(args.head)
    dets = predict(heads, read_features(args.features), args.score_thresh, args.nms_iou,
                   args.max_dets)
    save_detections(dets, args.out)
    print(f"wrote {args.out}: {len(dets)} detections")


def cmd_evaluate(args):
    d = load_dataset(args.annotations)
    images = None
    if args.features:
        images = np.unique(read_features(args.features).image_ids).tolist()
    cfg = EvalConfig(max_dets_per_image=args.max_dets)
    report = evaluate(load_detections(args.detections), d, cfg, image_ids=images)
    if args.out:
        save_report(report, args.out)
    for name in METRIC_NAMES:
        value = report[name]
        print(f"{name:>6}: {'n/a' if value is None else f'{value:.4f}'}")


def cmd_benchmark(args):
    d = load_dataset(args.annotations)
    train = read_features(args.features)
    base_feats = read_features(args.base_features) if args.base_features else train
    pool_feats = read_features(args.pool_features) if args.pool_features else train
    test_feats = read_features(args.test_features)
    cfg = BenchmarkConfig(
        k_values=tuple(args.k), n_runs=args.runs, base_seed=args.seed,
        classifier=args.classifier, alpha=args.alpha, init=args.init,
        train=_train_config(args),
        base_train=TrainConfig(iters=args.base_iters, batch_size=args.batch_size,
                               lr=args.base_lr, momentum=args.momentum,
                               weight_decay=args.weight_decay, seed=args.seed,
                               loc_weight=args.loc_weight),
    )
    results = run_benchmark(cfg, d, base_feats, pool_feats, test_feats, args.out)
    _print_aggregate(results)


def cmd_aggregate(args):
    _print_aggregate(aggregate_runs(args.out))


def _print_aggregate(results):
    for k, stats in results.items():
        for name in ("nAP50", "bAP50", "AP50"):
            st = stats.get(name)
            if st is None:
                continue
            ci = "" if st.ci95 is None else f" +/- {st.ci95:.4f}"
            print(f"k={k:<3} {name:>6}: {st.mean:.4f}{ci}  (n={st.n})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tfakit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic annotations and features")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--classes", type=int, default=20, help="total number of classes")
    p.add_argument("--novel-classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=40)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample-shots", help="draw a balanced K-shot annotation subset")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", help="restrict sampling to images in this feature file")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", help="comma-separated category ids (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_shots)

    p = sub.add_parser("train-head", help="train a base head, or fine-tune one with --base-head")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--base-head", help="stage-1 head to fine-tune from")
    p.add_argument("--shots", help="shot file selecting the fine-tuning records")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the per-iteration loss here")
    _add_train_flags(p, lr=0.001)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("predict", help="run box inference with a trained head")
    p.add_argument("--head", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--max-dets", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="COCO-style AP of a detection file")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", help="evaluate only images present in this feature file")
    p.add_argument("--max-dets", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="repeated-run K-shot protocol with aggregation")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True, help="train features (base and shot pool)")
    p.add_argument("--base-features", help="override base-training features")
    p.add_argument("--pool-features", help="override K-shot pool features")
    p.add_argument("--test-features", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1, 2, 3, 5, 10])
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-lr", type=float, default=0.02)
    p.add_argument("--base-iters", type=int, default=2000)
    p.add_argument("--out", required=True)
    _add_train_flags(p, lr=0.001)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("aggregate", help="rebuild aggregate CSVs from per-run metric files")
    p.add_argument("--out", required=True, help="benchmark output directory")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericError as exc:
        print(f"tfakit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"tfakit: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
