"""Command-line entry point: ``python -m robustlab <command> ...``.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import analyzer
from .arch import adapt_low_res, build, preset_spec, resolve_presets, replace_head
from .attacks import EvalReport, evaluate_robust_accuracy, reports_to_csv
from .checkpoint import load_checkpoint, make_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10, resize_pipeline, synth_blobs
from .sweep import parse_resolutions, resolution_sweep
from .threat import ThreatModel
from .train import (TRANSFER_PRESETS, TrainConfig, adv_train, finetune_defaults, finetune_radius, load_config,
                    select_checkpoint, transfer_config)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _tm(text: str) -> ThreatModel:
    try:
        return ThreatModel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synth",
                   help="'synth' (seeded blobs) or 'cifar10:DIR' (binary batches)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--n", type=int, default=256, help="number of examples")
    p.add_argument("--classes", type=int, default=3, help="classes for synthetic data")
    p.add_argument("--data-resolution", type=int, default=32)
    p.add_argument("--margin", type=float, default=200.0, help="synthetic class separation in noise units")
    p.add_argument("--data-seed", type=int, default=None, help="defaults to --seed")


def _load_data(args) -> Dataset:
    seed = args.seed if args.data_seed is None else args.data_seed
    if args.data == "synth":
        return synth_blobs(args.n, args.classes, args.data_resolution, args.margin, seed=seed)
    if args.data.startswith("cifar10:"):
        ds = load_cifar10(args.data.split(":", 1)[1], args.split)
        order = np.random.default_rng(seed).permutation(len(ds))[:args.n]
        ds = ds.subset(np.sort(order), args.split)
        ds.meta["shuffle_seed"] = seed
        if args.data_resolution != ds.images.shape[-1]:
            ds = Dataset(resize_pipeline(ds.images, args.data_resolution, 1.0), ds.labels, ds.split,
                         ds.provenance, ds.num_classes, ds.meta)
        return ds
    raise ValueError(f"unknown data source {args.data!r}")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field (``--peak-lr`` etc.), all defaulting to 'unset'."""
    for f in fields(TrainConfig):
        if f.name in ("augment", "seed"):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                       type=_tm if f.name == "tm" else str, metavar=f.name.upper())
    p.add_argument("--config", default=None, help="key = value file with a [train] section")
    p.add_argument("--recipe", default=None, choices=sorted(TRANSFER_PRESETS),
                   help="start from a named transfer fine-tuning recipe")
    p.add_argument("--out", default="runs", help="output directory for checkpoints and logs")


def _train_config(args, base: TrainConfig) -> TrainConfig:
    if args.recipe:
        base = transfer_config(args.recipe)
    cfg = load_config(args.config, base=base) if args.config else base
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = cfg.updated(overrides)
    return replace(cfg, seed=args.seed, out_dir=args.out)


def _model_from(args, num_classes: int):
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        return ckpt.to_model(use_ema=getattr(args, "ema", False))
    spec = preset_spec(args.preset, num_classes=num_classes)
    return build(spec, seed=args.seed)


def _print(text: str, out_path: str | None = None) -> None:
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_analyze(args) -> int:
    specs = resolve_presets(args.presets)
    _, rows = analyzer.cost_table(specs, args.resolution)
    text = analyzer.rows_to_csv(rows) if args.format == "csv" else analyzer.rows_to_text(rows) + "\n"
    _print(text, args.output)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args, TrainConfig())
    ds = _load_data(args)
    train, val = ds.split_off(args.val, args.seed) if args.val else (ds, None)
    model = build(preset_spec(args.preset, num_classes=ds.num_classes,
                              input_resolution=ds.images.shape[-1]), seed=args.seed)
    res = adv_train(model, train, cfg, val, progress=None if args.quiet else _progress)
    _print(res.log_csv())
    return 0


def cmd_finetune(args) -> int:
    cfg = _train_config(args, finetune_defaults())
    ds = _load_data(args)
    train, val = ds.split_off(args.val, args.seed) if args.val else (ds, None)
    res = finetune_radius(args.checkpoint, args.tm, train, cfg, val)
    _print(res.log_csv())
    return 0


def _progress(row: dict) -> None:
    print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} clean {row['clean_val_acc']:.3f} "
          f"robust {row['quick_robust_val_acc']:.3f}", file=sys.stderr)


def cmd_attack(args) -> int:
    ds = _load_data(args)
    model = _model_from(args, ds.num_classes)
    kw = {"target_classes": args.apgd_targets}
    if args.iters is not None:
        kw["ce_iters"] = args.iters
    if args.dlr_iters is not None:
        kw["dlr_iters"] = args.dlr_iters
    reports: list[EvalReport] = []
    for tm in args.tm:
        reports.append(evaluate_robust_accuracy(model, ds.images, ds.labels, tm, args.protocol,
                                                seed=args.seed, **kw))
    _print(reports_to_csv(reports), args.output)
    return 0


def cmd_sweep(args) -> int:
    ds = _load_data(args)
    model = _model_from(args, ds.num_classes)
    kw = {"target_classes": args.apgd_targets}
    if args.iters is not None:
        kw["ce_iters"] = args.iters
    rep = resolution_sweep(model, ds, parse_resolutions(args.resolutions), args.tm, args.protocol,
                           scale_l2=args.scale_l2, sr=args.sr, seed=args.seed, **kw)
    _print(rep.to_csv(), args.output)
    return 0


def cmd_select(args) -> int:
    paths = list(args.checkpoints)
    if args.dir:
        paths += sorted(os.path.join(args.dir, n) for n in os.listdir(args.dir) if n.endswith(".ckpt"))
    if not paths:
        raise UsageError("select-checkpoint needs --checkpoints or --dir")
    ckpts = [load_checkpoint(p) for p in paths]
    ds = _load_data(args)
    best, rows = select_checkpoint(ckpts, ds, args.tm, seed=args.seed, use_ema=args.ema)
    lines = ["checkpoint,robust_acc_1step,clean_acc,selected"]
    for i, robust, clean in rows:
        lines.append(f"{paths[i]},{robust:.6f},{clean:.6f},{int(i == best)}")
    _print("\n".join(lines) + "\n")
    return 0


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model(use_ema=args.ema)
    if args.num_classes:
        model = replace_head(model, args.num_classes, seed=args.seed)
    if args.low_res:
        model = adapt_low_res(model)
    save_checkpoint(make_checkpoint(model, None, 0, args.seed, {"adapted_from": args.checkpoint}), args.out)
    print(f"wrote {args.out}: {model.spec.name}, {model.num_parameters()} parameters")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("analyze", help="parameter / MAC table for presets"))
    p.add_argument("--presets", default="table7", help="group name or comma-separated preset names")
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--format", choices=("csv", "text"), default="csv")
    p.add_argument("--output", default=None)
    p.set_defaults(fn=cmd_analyze)

    p = common(sub.add_parser("train", help="adversarial (or standard) training"))
    p.add_argument("--preset", default="micro-convnext+convstem")
    p.add_argument("--val", type=int, default=64, help="held-out examples for the log columns")
    p.add_argument("--quiet", action="store_true")
    _add_train_args(p)
    _add_data_args(p)
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("finetune-radius", help="adversarial fine-tuning at a new radius"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--val", type=int, default=64)
    _add_train_args(p)
    _add_data_args(p)
    p.set_defaults(fn=cmd_finetune)
    # --tm is mandatory here and doubles as the TrainConfig field
    for action in p._actions:
        if action.dest == "cfg_tm":
            action.dest, action.required = "tm", True

    def attack_args(p, many_tm: bool):
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--preset", default="micro-convnext+convstem", help="untrained model if no checkpoint")
        p.add_argument("--ema", action="store_true", help="use the EMA weights")
        if many_tm:
            p.add_argument("--tm", type=_tm, action="append", required=True,
                           help="threat model such as linf:4/255 (repeatable)")
        else:
            p.add_argument("--tm", type=_tm, required=True)
        p.add_argument("--protocol", choices=("quick", "standard"), default="quick")
        p.add_argument("--iters", type=int, default=None, help="APGD-CE iterations")
        p.add_argument("--apgd-targets", type=int, default=3, help="target classes for APGD-T")
        p.add_argument("--output", default=None)
        _add_data_args(p)

    p = common(sub.add_parser("attack", help="clean and robust accuracy"))
    attack_args(p, True)
    p.add_argument("--dlr-iters", type=int, default=None, help="APGD-T iterations per target")
    p.set_defaults(fn=cmd_attack)

    p = common(sub.add_parser("sweep-resolution", help="accuracy versus test resolution"))
    attack_args(p, False)
    p.add_argument("--resolutions", required=True, help="e.g. 24,32,40 or 24:64:8")
    p.add_argument("--scale-l2", action="store_true", help="scale l2 radii with resolution")
    p.add_argument("--sr", type=float, default=1.0, help="resize scale ratio (crop fraction)")
    p.set_defaults(fn=cmd_sweep)

    p = common(sub.add_parser("select-checkpoint", help="post-hoc ranking by 1-step APGD"))
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--dir", default=None)
    p.add_argument("--tm", type=_tm, required=True)
    p.add_argument("--ema", action="store_true")
    _add_data_args(p)
    p.set_defaults(fn=cmd_select)

    p = common(sub.add_parser("adapt", help="new classifier head and/or low-resolution strides"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=0)
    p.add_argument("--low-res", action="store_true")
    p.add_argument("--ema", action="store_true")
    p.set_defaults(fn=cmd_adapt)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"robustlab: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"robustlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
