"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 diverged training, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data, plotting, training
from .config import TrainConfig, desk_scale, load_config
from .errors import DinoNestedUNetError, DivergedLoss
from .metrics import read_report, write_report

log = logging.getLogger("dino_nestedunet")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _configs(args):
    if args.config:
        m, t = load_config(args.config)
    else:
        m, t = desk_scale(), TrainConfig()
    if args.seed is not None:
        t = replace(t, seed=args.seed)
    return m, t


def cmd_synth(args):
    m = data.synthesize_cohort(
        args.out,
        n_slides=args.slides,
        patches_per_slide=args.patches_per_slide,
        size=args.size,
        seed=args.seed or 0,
        noise_level=args.noise,
        name=args.name,
    )
    counts = {s: len(m.split(s)) for s in data.SPLITS}
    print(f"wrote {len(m)} patches to {Path(args.out) / 'manifest.csv'} {counts}")


def cmd_train(args):
    m, t = _configs(args)
    manifest = data.read_manifest(args.manifest)
    meta = training.train(m, t, manifest, args.out, deterministic=args.deterministic)
    print(json.dumps({"epoch": meta.epoch, "val_dice": meta.val_dice, "checkpoint": str(Path(args.out) / "best.ckpt")}))


def _expect(args):
    return load_config(args.config)[0] if args.config else None


def cmd_eval(args):
    if args.deterministic:
        training.set_determinism(args.seed or 0)
    split = args.split or "test"
    manifest = data.read_manifest(args.manifest)
    report = training.evaluate(args.checkpoint, manifest, split, _expect(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / f"eval_{split}.csv")
    if args.plots:
        plotting.emit_plots([report], out / "figures")
    print(json.dumps(report.summary()))


def cmd_xeval(args):
    if args.deterministic:
        training.set_determinism(args.seed or 0)
    manifest = data.read_manifest(args.manifest)
    report = training.cross_dataset_eval(args.checkpoint, manifest, args.split, _expect(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "xeval.csv")
    cols = ["cohort", "n", "mDice", "mIoU", "zero_shot", "evaluated_on_training_manifest"]
    summary = report.summary()
    with (out / "xeval_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if summary["evaluated_on_training_manifest"]:
            fh.write("# WARNING: external manifest overlaps the training data\n")
        w.writerow(cols)
        w.writerow([summary[c] for c in cols])
    print(json.dumps(summary))


def cmd_predict(args):
    mask = training.predict_file(args.checkpoint, args.image, args.out)
    print(f"wrote {args.out} ({mask.shape[1]}x{mask.shape[0]}, {int(mask.sum())} tumour px)")


def cmd_stitch(args):
    model, _ = training.load_checkpoint(args.checkpoint)
    slide = data.read_image(args.image)
    mask = training.stitch_wsi(model, slide, args.patch_size, args.stride)
    data.save_mask(mask, args.out)
    print(f"wrote {args.out} ({mask.shape[1]}x{mask.shape[0]})")


def cmd_report(args):
    reports = [read_report(p) for p in args.reports]
    overlays = []
    if args.overlays:
        if not (args.checkpoint and args.manifest):
            raise ValueError("report --overlays needs --checkpoint and --manifest")
        model, _ = training.load_checkpoint(args.checkpoint)
        manifest = data.read_manifest(args.manifest)
        records = manifest.split(args.split or "test")[: args.overlays]
        ids, x, y = data.load_records(manifest, records, model.cfg.input_size)
        preds = training.predict_masks(model, x)
        overlays = list(zip(ids, x, y, preds))
    paths = plotting.emit_plots(reports, args.out, overlays)
    for p in paths:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file ([model]/[train] key = value)")
    common.add_argument("--manifest", type=Path, help="manifest CSV")
    common.add_argument("--checkpoint", type=Path, help="checkpoint file")
    common.add_argument("--out", type=Path, help="output directory or file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="fix RNGs and use deterministic kernels")
    common.add_argument("--split", choices=data.SPLITS, default=None, help="default: test (xeval: all records)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dino-nestedunet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic cohort and manifest")
    s.add_argument("--slides", type=int, default=10)
    s.add_argument("--patches-per-slide", type=int, default=4)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--name", default="synthetic")
    s.set_defaults(func=cmd_synth, required=["out"])

    s = sub.add_parser("train", parents=[common], help="train and checkpoint on best val Dice")
    s.set_defaults(func=cmd_train, required=["manifest", "out"])

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    s.add_argument("--plots", action="store_true", help="also render Dice boxplots")
    s.set_defaults(func=cmd_eval, required=["checkpoint", "manifest", "out"])

    s = sub.add_parser("xeval", parents=[common], help="zero-shot evaluation on an external cohort")
    s.set_defaults(func=cmd_xeval, required=["checkpoint", "manifest", "out"])

    s = sub.add_parser("predict", parents=[common], help="predict a {0,255} mask for one image")
    s.add_argument("--image", type=Path, required=True)
    s.set_defaults(func=cmd_predict, required=["checkpoint", "out"])

    s = sub.add_parser("stitch", parents=[common], help="tile, predict and stitch a slide-level mask")
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--patch-size", type=int, default=1024)
    s.add_argument("--stride", type=int, default=None)
    s.set_defaults(func=cmd_stitch, required=["checkpoint", "out"])

    s = sub.add_parser("report", parents=[common], help="render figures from report CSVs")
    s.add_argument("reports", nargs="+", type=Path, help="per-patch report CSVs from eval/xeval")
    s.add_argument("--overlays", type=int, default=0, help="overlay panels for the first N patches")
    s.set_defaults(func=cmd_report, required=["out"])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    missing = [f"--{r}" for r in args.required if getattr(args, r) is None]
    if missing:
        parser.error(f"{args.command}: missing required {', '.join(missing)}")
    try:
        args.func(args)
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DinoNestedUNetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
