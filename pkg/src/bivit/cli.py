"""Command-line interface.

Settings are resolved as defaults < command-line flags < ``--config`` file,
and ``BIVIT_SEED`` (if set) replaces the seed last.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import SOURCES, DatasetSpec, load_dataset
from .layers import ATTN_BINARIZERS, ViTArch

TRAIN_FLAGS = {
    # dest: (type, help)
    "epochs": (int, "student training epochs"),
    "teacher_epochs": (int, "teacher training epochs"),
    "batch_size": (int, "mini-batch size"),
    "base_lr": (float, "peak learning rate (cosine decay, no warm-up)"),
    "teacher_lr": (float, "teacher learning rate"),
    "lam": (float, "weight of the ranking term"),
    "temperature": (float, "distillation temperature"),
    "seed": (int, "random seed"),
    "optimizer": (str, "adam or sgd"),
    "weight_decay": (float, "weight decay"),
    "mhsa": (str, "self-attention precision label, e.g. w1a1"),
    "mlp": (str, "MLP precision label, e.g. w1a32"),
    "ranking_stage": (str, "pre_softmax or post_softmax"),
    "attn_binarizer": (str, "|".join(ATTN_BINARIZERS)),
    "lsf": (int, "1 to learn head-wise scales, 0 to freeze them at 1"),
    "grad_clip": (float, "global gradient-norm clip (0 disables)"),
}
DATA_FLAGS = {
    "dataset": (str, "|".join(SOURCES)),
    "images": (str, "image file (idx) or comma-separated record files"),
    "labels": (str, "label file (idx)"),
    "val_images": (str, "validation image file"),
    "val_labels": (str, "validation label file"),
    "resolution": (int, "square input side after crop/pad"),
    "classes": (int, "number of classes"),
    "channels": (int, "image channels"),
    "val_fraction": (float, "held-out fraction when no validation files are given"),
    "split_seed": (int, "seed of the train/val split"),
    "n_samples": (int, "synthetic dataset size"),
}
MODEL_FLAGS = {
    "patch": (int, "patch side"),
    "dim": (int, "embedding width"),
    "depth": (int, "number of blocks"),
    "heads": (int, "attention heads"),
    "mlp_ratio": (float, "MLP hidden width / embedding width"),
}
ALL_FLAGS = {**TRAIN_FLAGS, **DATA_FLAGS, **MODEL_FLAGS}
ALIASES = {"lambda": "lam", "lr": "base_lr"}


class UsageError(Exception):
    pass


def _add_flags(p: argparse.ArgumentParser, table: dict) -> None:
    for dest, (typ, help_) in table.items():
        names = ["--" + dest.replace("_", "-")]
        names += ["--" + a for a, d in ALIASES.items() if d == dest]
        p.add_argument(*names, dest=dest, type=typ, default=None, help=help_)


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use - or _."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key).replace("-", "_")
        if key not in ALL_FLAGS:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            out[key] = ALL_FLAGS[key][0](value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def resolve_settings(args) -> dict:
    settings = {k: v for k, v in vars(args).items() if k in ALL_FLAGS and v is not None}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    env_seed = os.environ.get("BIVIT_SEED")
    if env_seed is not None:
        try:
            settings["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"BIVIT_SEED must be an integer, got {env_seed!r}") from None
    return settings


def build_data_spec(s: dict) -> DatasetSpec:
    kw = {k: s[k] for k in DATA_FLAGS if k in s and k != "dataset"}
    return DatasetSpec(source=s.get("dataset", "digits"), **kw)


def build_train_config(s: dict, spec: DatasetSpec):
    from .train import TrainConfig

    model = {k: s[k] for k in MODEL_FLAGS if k in s}
    arch = ViTArch(image_size=spec.resolution, in_chans=spec.channels, classes=spec.classes, **model)
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in s.items() if k in names}
    if "lsf" in kw:
        kw["lsf"] = bool(kw["lsf"])
    return TrainConfig(arch=arch, **kw)


def _setup(args):
    s = resolve_settings(args)
    spec = build_data_spec(s)
    cfg = build_train_config(s, spec)
    return cfg, spec


# -- subcommands --------------------------------------------------------------------------


def cmd_train_teacher(args, out) -> int:
    from .train import save_model, train_teacher

    cfg, spec = _setup(args)
    data = load_dataset(spec)
    model, acc = train_teacher(cfg, data)
    save_model(args.out, model, {"val_acc": acc, "config": cfg.to_dict()})
    out(f"teacher val top-1: {100 * acc:.2f}%  -> {args.out}")
    return 0


def cmd_train_student(args, out) -> int:
    from .distill import TeacherBundle
    from .train import evaluate, load_model, save_model, train_student, write_metrics

    cfg, spec = _setup(args)
    data = load_dataset(spec)
    teacher = load_model(args.teacher)
    bundle = TeacherBundle(teacher, cfg.ranking_stage)
    bundle.precompute(data.x_train)
    student, rows = train_student(cfg, bundle, data, ckpt_dir=args.ckpt_dir, resume=args.resume)
    acc = evaluate(student, data.x_val, data.y_val)
    if args.metrics:
        write_metrics(args.metrics, rows)
    if args.out:
        save_model(args.out, student, {"val_acc": acc, "config": cfg.to_dict()})
    out(f"student val top-1: {100 * acc:.2f}%")
    return 0


def cmd_eval(args, out) -> int:
    from .train import evaluate, load_model

    _, spec = _setup(args)
    data = load_dataset(spec)
    model = load_model(args.model)
    out(f"val top-1: {100 * evaluate(model, data.x_val, data.y_val):.2f}%")
    return 0


def cmd_ablate(args, out) -> int:
    from .ablation import lambda_sweep, run_components

    cfg, spec = _setup(args)
    data = load_dataset(spec)
    seeds = tuple(int(v) for v in args.seeds.split(","))
    if args.grid == "components":
        res = run_components(cfg, data, seeds, log=out)
    elif args.grid == "lambda":
        lams = tuple(float(v) for v in args.lambdas.split(","))
        res = lambda_sweep(cfg, data, lams, seeds, log=out)
    else:
        from .diagnostics import precision_ablation_grid
        from .distill import TeacherBundle
        from .train import train_teacher

        teacher, _ = train_teacher(cfg, data)
        bundle = TeacherBundle(teacher, cfg.ranking_stage)
        bundle.precompute(data.x_train)
        grid = precision_ablation_grid(cfg, data, bundle)
        if args.out:
            grid.to_csv(args.out)
        for (mlp, mhsa), acc in grid.cells.items():
            out(f"mlp {mlp:<7} mhsa {mhsa:<7} {100 * acc:6.2f}")
        return 0
    if args.out:
        res.to_csv(args.out)
    out(res.format())
    out(f"({res.seconds:.0f}s)")
    return 0


def cmd_diagnose(args, out) -> int:
    from .diagnostics import attention_heatmap_dump, extreme_dot_range_check, softmax_grad_curve

    if args.what == "curve":
        curve = softmax_grad_curve(args.d, args.samples, args.row_len)
        if args.out:
            curve.to_csv(args.out)
        i = int(np.argmax(curve.y))
        out(f"peak {curve.y[i]:.4f} at p={curve.x[i]:.3f}; y at p=+-{args.d}: "
            f"{curve.y[0]:.3g}, {curve.y[-1]:.3g}")
        return 0
    if args.what == "dotrange":
        r = extreme_dot_range_check(args.d)
        out(f"d={r.d} attained {len(r.attained)} values in [{min(r.attained)}, {max(r.attained)}]"
            f" ({'exhaustive' if r.exhaustive else 'sampled'}): {'ok' if r.ok else 'VIOLATION'}")
        return 0 if r.ok else 1
    if not args.model:
        raise UsageError("--model is required for heatmap and ste diagnostics")
    from .train import load_model

    _, spec = _setup(args)
    data = load_dataset(spec)
    model = load_model(args.model)
    images = data.x_val[: args.batch]
    if args.what == "heatmap":
        pgm, txt = attention_heatmap_dump(model, images, args.block, args.head,
                                          args.out or "heatmap", args.stage)
        out(f"wrote {pgm} and {txt}")
        return 0
    from . import autodiff as ad
    from .distill import cross_entropy
    from .layers import ste_grad_fraction

    with ad.Tape() as tape:
        logits, _ = model(images)
        loss = cross_entropy(logits, data.y_val[: args.batch])
    ad.backward(tape, loss)
    for i, rec in enumerate(ste_grad_fraction(model)):
        parts = "  ".join(f"{k}: " + ",".join(f"{v:.3f}" for v in vals) for k, vals in rec.items())
        out(f"block {i}  {parts or '(no binarized attention)'}")
    return 0


def cmd_calc_ops(args, out) -> int:
    from .diagnostics import ARCHS, ops_size_calc, parse_bits

    if args.arch not in ARCHS:
        raise UsageError(f"unknown --arch {args.arch!r}; choose from {', '.join(ARCHS)}")
    rep = ops_size_calc(args.arch, parse_bits(args.bits), real_first_last=args.real_first_last)
    if args.breakdown:
        rep.breakdown_csv(args.breakdown)
    if args.verbose:
        out(f"real-valued: {rep.real_size_mb:.1f} MB, {rep.real_ops_1e8:.1f}e8 OPs")
        out(f"params: {rep.fp_params} fp32 + {rep.bin_params} low-bit; "
            f"FLOPs {rep.fp_flops}, BOPs {rep.bops}")
    out(rep.summary())
    return 0


def cmd_selftest(args, out) -> int:
    from .selftest import run

    return 0 if run(out) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bivit", description="Binarized vision transformers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="less logging")
    sub = parser.add_subparsers(dest="command", metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file (overrides flags)")
    g = common.add_argument_group("data")
    _add_flags(g, DATA_FLAGS)
    g = common.add_argument_group("model")
    _add_flags(g, MODEL_FLAGS)
    g = common.add_argument_group("training")
    _add_flags(g, TRAIN_FLAGS)

    p = sub.add_parser("train-teacher", parents=[common], help="train the real-valued teacher")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", parents=[common], help="train a binarized student")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", help="final student checkpoint")
    p.add_argument("--metrics", help="per-step metrics CSV")
    p.add_argument("--ckpt-dir", help="directory for per-epoch checkpoints")
    p.add_argument("--resume", help="continue from a per-epoch checkpoint")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="component, lambda or precision grids")
    p.add_argument("--grid", choices=("components", "lambda", "precision"), default="components")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--lambdas", default="0,1,10")
    p.add_argument("--out", help="CSV output")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", parents=[common], help="curves, ranges, heatmaps, STE fractions")
    p.add_argument("what", choices=("curve", "dotrange", "heatmap", "ste"))
    p.add_argument("--model", help="checkpoint (heatmap, ste)")
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--stage", choices=("pre_softmax", "post_softmax"), default="pre_softmax")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--d", type=int, default=64, help="head dimension (curve, dotrange)")
    p.add_argument("--samples", type=int, default=257)
    p.add_argument("--row-len", type=int, default=2)
    p.add_argument("--out", help="output path or prefix")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("calc-ops", help="theoretical size and OPs")
    p.add_argument("--arch", required=True, help="deit-tiny|deit-small|deit-base|swin-tiny|swin-small")
    p.add_argument("--bits", default="1-1", help="weight-activation bits, e.g. 1-1 or 32-32")
    p.add_argument("--real-first-last", action="store_true",
                   help="count patch embedding and classifier at full precision")
    p.add_argument("--breakdown", help="per-layer CSV output")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_calc_ops)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None, out=print) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0) if e.code in (0, None) else 2
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (UsageError, ValueError, KeyError) as e:
        parser.print_usage(sys.stderr)
        print(f"bivit: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"bivit: {e}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
