"""
Command line entry point.

    cytosynth maketoy  --out DIR --classes K --per-class N --res R --seed S
    cytosynth train    --data DIR --out DIR [--config FILE] [--set key=value ...] [--resume CKPT]
    cytosynth sample   --ckpt CKPT --class NAME|INDEX --n N --seed S --out DIR
    cytosynth fid      --real DIR --fake DIR [--extractor random|pretrained] [--stats-cache DIR] [--out FILE]
    cytosynth augbench --real DIR [--synth DIR] [--plan FILE] [--set key=value ...] --out FILE.csv

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration or validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as config_mod
from .data import ToySpec, load_dataset, make_toy_dataset, save_png, toy_manifest, write_dataset
from .errors import ConfigError, DomainError, ExtractorUnavailable
from .evaluation import (ConstantClassifier, OracleClassifier, augmentation_benchmark, fid_report, get_extractor,
                         write_benchmark_csv)
from .training import TrainState, sample, train

log = logging.getLogger("cytosynth")


class UsageError(Exception):
    pass


def cmd_maketoy(args) -> int:
    if args.classes < 1:
        raise UsageError(f"--classes must be >= 1, got {args.classes}")
    if args.per_class < 1:
        raise UsageError(f"--per-class must be >= 1, got {args.per_class}")
    try:
        spec = ToySpec(num_classes=args.classes, images_per_class=args.per_class, resolution=args.res, seed=args.seed)
    except ConfigError as exc:
        raise UsageError(f"--res: {exc}") from None
    write_dataset(make_toy_dataset(spec), args.out, toy_manifest(spec))
    print(f"wrote {args.classes * args.per_class} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    values = config_mod.load_document(args.config, args.set or [])
    cfg = config_mod.train_config(values)
    data = load_dataset(args.data, resolution=cfg.resolution)
    history = train(cfg, data, args.out, resume=args.resume)
    if history:
        last = history[-1]
        print(f"finished at iter {last.iter}: adv_d={last.adv_d:.4f} adv_g={last.adv_g:.4f} recon={last.recon:.4f}")
    return 0


def _resolve_class(name: str, class_names) -> int:
    if name in class_names:
        return class_names.index(name)
    if name.isdigit() and int(name) < len(class_names):
        return int(name)
    raise UsageError(f"unknown class '{name}'; valid classes: {', '.join(class_names)}")


def cmd_sample(args) -> int:
    state = TrainState.load(args.ckpt)
    k = _resolve_class(args.cls, state.class_names)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = sample(state.G_ema, k, args.n, args.seed)
    for i, img in enumerate(images):
        save_png(img, out / f"class{k}_{i}.png")
    print(f"wrote {args.n} images of class {state.class_names[k]} to {out}")
    return 0


def cmd_fid(args) -> int:
    extractor = get_extractor(args.extractor)
    real = load_dataset(args.real)
    fake = load_dataset(args.fake, resolution=real.resolution)
    cache = None
    if args.stats_cache:
        cache = Path(args.stats_cache)
        cache.mkdir(parents=True, exist_ok=True)
    report = fid_report(real, fake, extractor, extractor.extractor_id, cache)
    doc = {"extractor": extractor.extractor_id, "fid": report}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for name, value in report.items():
        print(f"{name:>12s}  {value:.4f}")
    return 0


def cmd_augbench(args) -> int:
    values = config_mod.load_document(args.plan, args.set or [])
    plan = config_mod.cv_plan(values)
    real = load_dataset(args.real)
    synth = load_dataset(args.synth, resolution=real.resolution) if args.synth else None
    builder = None
    if args.oracle:
        oracle = OracleClassifier(real)
        builder = lambda k, f: oracle  # noqa: E731
    elif args.constant is not None:
        builder = lambda k, f: ConstantClassifier(args.constant)  # noqa: E731
    tables = [augmentation_benchmark(real, None, plan, builder, setting="baseline")]
    if synth is not None:
        tables.append(augmentation_benchmark(real, synth, plan, builder, setting=f"+ {Path(args.synth).name}"))
    write_benchmark_csv(tables, args.out)
    for t in tables:
        s = t.summary()
        print(f"{t.setting:>16s}  acc {100 * s['accuracy_mean']:.2f}±{100 * s['accuracy_std']:.2f}  "
              f"f1 {100 * s['f1_mean']:.2f}±{100 * s['f1_std']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cytosynth", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("maketoy", help="write the procedural toy-cell dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_maketoy)

    s = sub.add_parser("train", help="train a generator/discriminator pair")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--resume", metavar="CKPT")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write generated images from a checkpoint's EMA generator")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="cls", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("fid", help="per-class FID between two dataset directories")
    s.add_argument("--real", required=True)
    s.add_argument("--fake", required=True)
    s.add_argument("--extractor", choices=["random", "pretrained"], default="pretrained")
    s.add_argument("--stats-cache")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("augbench", help="k-fold classifier benchmark with optional synthetic training data")
    s.add_argument("--real", required=True)
    s.add_argument("--synth")
    s.add_argument("--plan")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--oracle", action="store_true", help="smoke test: classifier that knows the true labels")
    g.add_argument("--constant", type=int, help="smoke test: classifier that always predicts this class")
    s.set_defaults(func=cmd_augbench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"cytosynth {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ExtractorUnavailable as exc:
        print(f"cytosynth {args.command}: extractor unavailable: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime / numerical failures
        log.debug("failure", exc_info=True)
        print(f"cytosynth {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
