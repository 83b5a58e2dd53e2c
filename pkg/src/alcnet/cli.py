"""Command-line entry point: synth, train, eval, detect and bench.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
Training artifacts land in a run directory named by timestamp and seed.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import contrast, data, evaluation, net, objective

PROFILES = {
    "desk": {"channels": (8, 16, 32), "resize": 72, "crop": 64,
             "mlc": (2, 4), "dlc": (2,)},
    "paper": {"channels": (16, 32, 64), "resize": 512, "crop": 480,
              "mlc": (13, 17), "dlc": (13,)},
}

CONFIG_KEYS = ("profile", "arch", "b", "dilations", "reduction", "lr", "epochs",
               "weight_decay", "batch_size", "seed", "data", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config_file(path) -> dict:
    """key = value lines; unknown keys are configuration errors."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as err:
        raise UsageError(f"cannot read config file: {err}") from err
    for line_no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = value
    return values


def canonical_config(args) -> str:
    """Stable key = value dump; parsing it back reproduces the run."""
    dilations = ",".join(str(d) for d in args.dilations) if args.dilations else ""
    rows = {
        "arch": args.arch, "b": args.b, "batch_size": args.batch_size,
        "data": args.data, "dilations": dilations, "epochs": args.epochs,
        "lr": args.lr, "out": args.out, "profile": args.profile,
        "reduction": args.reduction, "seed": args.seed,
        "weight_decay": args.weight_decay,
    }
    return "\n".join(f"{key} = {rows[key]}" for key in sorted(rows)) + "\n"


def _parse_dilations(text):
    if text is None or text == "":
        return None
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError as err:
        raise UsageError(f"bad dilation list {text!r}") from err


def build_parser() -> _Parser:
    parser = _Parser(prog="alcnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--targets", default="1,3")
    p.add_argument("--amplitude", default="0.3,0.6")
    p.add_argument("--sigma", default="0.8,1.8")
    p.add_argument("--background", choices=data.BACKGROUND_KINDS, default="cloud")
    p.add_argument("--clutter", type=float, default=0.03)
    p.add_argument("--split", default="0.5,0.2,0.3",
                   help="ratios (0.5,0.2,0.3) or absolute counts (200,50,100)")

    p = sub.add_parser("train", help="train an architecture on a manifest dataset")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data", help="directory containing train/val/test .tsv manifests")
    p.add_argument("--arch", default="alcnet")
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--dilation", "--dilations", dest="dilations", default=None,
                   help="comma-separated dilation rates (profile default otherwise)")
    p.add_argument("--reduction", choices=("min", "max"), default="min")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=1e-4)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--stop-iou", dest="stop_iou", type=float, default=None,
                   help="stop early once validation IoU reaches this value")
    p.add_argument("--print-config", action="store_true",
                   help="print the canonical configuration and exit")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None, help="output directory (default: beside checkpoint)")

    p = sub.add_parser("detect", help="run one image through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--gt", default=None, help="optional ground-truth mask; prints IoU")
    p.add_argument("--out", default="detection.pgm")

    p = sub.add_parser("bench", help="benchmark kernel vs cyclic-shift detection")
    p.add_argument("--impl", choices=("both",), default="both")
    p.add_argument("--size", type=int, action="append", default=None,
                   help="square image size; repeatable (default 256 and 512)")
    p.add_argument("--scales", default="1,3,5,7,9")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    return parser


def _pair(text, cast=float):
    parts = [cast(v) for v in str(text).split(",")]
    if len(parts) != 2:
        raise UsageError(f"expected two comma-separated values, got {text!r}")
    return tuple(parts)


def cmd_synth(args) -> int:
    if args.count <= 0:
        raise UsageError("empty dataset requested")
    try:
        cfg = data.SynthConfig(
            count=args.count, size=args.size, seed=args.seed,
            targets=tuple(int(v) for v in _pair(args.targets, int)),
            amplitude=_pair(args.amplitude), sigma=_pair(args.sigma),
            background=args.background, clutter=args.clutter)
        split = tuple(float(v) for v in args.split.split(","))
    except ValueError as err:
        raise UsageError(str(err)) from err
    try:
        os.makedirs(args.out, exist_ok=True)
        counts = data.synth_dataset(cfg, args.out, split)
    except OSError as err:
        print(f"error: cannot write dataset: {err}", file=sys.stderr)
        return 2
    total = sum(counts.values())
    print(f"wrote {total} samples under {args.out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def _apply_config_file(args):
    if not getattr(args, "config", None):
        return args
    casts = {"b": int, "epochs": int, "batch_size": int, "seed": int,
             "lr": float, "weight_decay": float}
    for key, raw in load_config_file(args.config).items():
        default = build_parser().parse_args(["train"]).__dict__.get(key)
        if getattr(args, key) == default:  # flags beat file values
            setattr(args, key, casts.get(key, str)(raw) if raw != "" else None)
    return args


def cmd_train(args) -> int:
    args = _apply_config_file(args)
    args.dilations = _parse_dilations(args.dilations)
    profile = PROFILES[args.profile]
    if args.dilations is None and args.arch.strip().lower() in ("dlc-fpn",):
        args.dilations = profile["dlc"]
    elif args.dilations is None:
        args.dilations = profile["mlc"]
    if args.print_config:
        print(canonical_config(args), end="")
        return 0
    if not args.data:
        raise UsageError("--data is required")
    try:
        arch = net.make_arch(args.arch, args.b, args.dilations, args.reduction)
        train_cfg = objective.TrainConfig(lr=args.lr, epochs=args.epochs,
                                          weight_decay=args.weight_decay,
                                          batch_size=args.batch_size, seed=args.seed)
        if arch.dilations:
            # deepest stage runs at crop/4; every rate must fit there
            contrast.validate_dilations(arch.dilations, profile["crop"] // 4,
                                        profile["crop"] // 4)
    except ValueError as err:
        raise UsageError(str(err)) from err
    try:
        train_samples = data.load_split(args.data, "train")
        val_samples = data.load_split(args.data, "val")
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot load dataset: {err}") from err
    model = net.build_network(arch, channels=profile["channels"], seed=args.seed)
    run_dir = os.path.join(args.out, f"run-{time.strftime('%Y%m%d-%H%M%S')}-s{args.seed}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(canonical_config(args))
    print(f"training {arch.to_string()} on {len(train_samples)} samples "
          f"(val {len(val_samples)}) -> {run_dir}")
    try:
        result = objective.train(model, train_samples, val_samples, train_cfg,
                                 profile["resize"], profile["crop"], run_dir,
                                 stop_iou=args.stop_iou)
    except objective.TrainingDiverged as err:
        print(f"error: {err}; last good checkpoint: {err.checkpoint}", file=sys.stderr)
        return 2
    print(f"done after {result.epochs_run} epochs; best val IoU {result.best_val_iou:.4f}; "
          f"checkpoint {result.best_path}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = net.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot load checkpoint: {err}") from err
    try:
        samples = data.load_split(args.data, args.split)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot load dataset: {err}") from err
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    report = evaluation.evaluate(model, samples, with_roc=True)
    report.to_csv(os.path.join(out_dir, f"metrics_{args.split}.csv"))
    report.to_jsonl(os.path.join(out_dir, f"metrics_{args.split}.jsonl"))
    evaluation.roc_to_csv(report.roc_points, os.path.join(out_dir, f"roc_{args.split}.csv"))
    name = model.arch.to_string()
    print(f"{'Metric':<8}{name}")
    print(f"{'IoU':<8}{report.iou:.3f}")
    print(f"{'nIoU':<8}{report.niou:.3f}")
    return 0


def cmd_detect(args) -> int:
    try:
        model = net.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot load checkpoint: {err}") from err
    try:
        image = data.load_image(args.image)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot load image: {err}") from err
    scores = evaluation.predict_scores(model, image)
    mask = scores >= 0.5
    data.write_pgm(args.out, np.where(mask, 255, 0).astype(np.uint8))
    print(f"wrote {args.out} ({int(mask.sum())} positive pixels)")
    if args.gt:
        gt = data.load_mask(args.gt)
        print(f"IoU {evaluation.iou(mask, gt):.4f}")
    return 0


def cmd_bench(args) -> int:
    sizes = args.size or [256, 512]
    try:
        scales = tuple(int(v) for v in args.scales.split(","))
        cfg = contrast.MpcmConfig(scales=scales)
    except ValueError as err:
        raise UsageError(str(err)) from err
    try:
        report = contrast.mpcm_bench([(s, s) for s in sizes], cfg,
                                     repeats=args.repeats, seed=args.seed)
    except AssertionError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    report.to_csv(args.out)
    print(f"{'impl':<8}{'H':>6}{'W':>6}{'mean_ms':>12}{'std_ms':>10}{'speedup':>10}")
    for row in report.rows:
        print(f"{row.impl:<8}{row.h:>6}{row.w:>6}{row.mean_ms:>12.2f}"
              f"{row.std_ms:>10.2f}{row.speedup:>10.2f}")
    print(f"wrote {args.out}")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "detect": cmd_detect, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return HANDLERS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def run():  # console-script entry point
    sys.exit(main())


if __name__ == "__main__":
    run()
