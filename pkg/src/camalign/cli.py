"""Command-line harness.

Commands: gen-data, train, eval, sweep, decompose, gradcheck.  Every
command accepts --config/--seed/--output.  Exit codes: 0 ok, 1 usage or
bad configuration, 2 data problem (missing/corrupt files), 3 numeric
failure.  Errors print a single machine-parsable line ``E<code>: message``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as ds
from .autodiff import Tensor
from .decomposition import decompose
from .errors import ConfigError, DataError, NumericError
from .formats import write_ften, write_pgm
from .model import forward, image_to_input, load_checkpoint
from .selfcheck import gradcheck_suite, suite_passed
from .training import (MAP_SOURCES, RunConfig, train, write_eval_artifacts,
                       evaluate_model)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--output", "-o", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="camalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, help="override num_classes")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--mode", choices=["full", "vanilla"], help="override mode")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=cmd_train)

    for name, help_text in (("eval", "evaluate a checkpoint"),
                            ("sweep", "threshold sweep only (CSV output)")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        p.add_argument("--map-source", choices=list(MAP_SOURCES), default="cam")
        p.add_argument("--split", choices=["train", "val", "test"], default="test")
        p.set_defaults(func=cmd_eval if name == "eval" else cmd_sweep)

    p = sub.add_parser("decompose", help="dump decomposition maps for one image")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--index", type=int, default=0, help="sample index within the split")
    p.add_argument("--class-index", type=int,
                   help="class to decompose (default: the sample's label)")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("gradcheck", help="finite-difference self-test")
    _add_common(p)
    p.add_argument("--inject-bug", action="store_true",
                   help="corrupt the analytic gradients (the check must fail)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _load_json(path):
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _run_config(args, need_dataset=True) -> RunConfig:
    raw = _load_json(args.config) if args.config else {}
    config = RunConfig.from_dict(raw)
    updates = {}
    if getattr(args, "dataset", None):
        updates["dataset_dir"] = args.dataset
    if args.output:
        updates["output_dir"] = args.output
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    if getattr(args, "epochs", None):
        updates["epochs"] = args.epochs
    if updates:
        config = RunConfig.from_dict({**config.to_dict(), **updates})
    if need_dataset and not config.dataset_dir:
        raise UsageError("no dataset directory (use --dataset or config dataset_dir)")
    return config


def cmd_gen_data(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if args.classes is not None:
        raw["num_classes"] = args.classes
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = ds.DatasetSpec.from_dict(raw)
    if not args.output:
        raise UsageError("gen-data needs --output")
    index_path = os.path.join(args.output, "index.json")
    if os.path.exists(index_path) and not args.force:
        raise DataError(f"dataset already exists (use --force to overwrite): {index_path}")
    dataset = ds.generate(spec)
    ds.save(dataset, args.output)
    n = sum(len(v) for v in dataset.splits.values())
    print(f"wrote {n} samples ({spec.num_classes} classes) to {args.output}")
    return 0


def cmd_train(args) -> int:
    config = _run_config(args)
    if not config.output_dir:
        raise UsageError("train needs an output directory (--output or config output_dir)")
    result = train(config, quiet=args.quiet)
    last = result.log.records[-1]
    print(f"finished {config.epochs} epochs ({config.mode} mode): "
          f"train_acc={last.train_acc:.3f} val_gt_loc={last.val_gt_loc:.3f}")
    if result.report is not None:
        print(f"test gt_loc={result.report.gt_loc:.3f} "
              f"maxboxaccv2_mean={result.report.maxboxaccv2_mean:.3f}")
    print(f"artifacts in {config.output_dir}")
    return 0


def _eval_setup(args):
    config = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    dataset = ds.load(config.dataset_dir)
    if dataset.spec.num_classes != model.config.num_classes:
        raise DataError(
            f"checkpoint has {model.config.num_classes} classes but dataset has "
            f"{dataset.spec.num_classes}")
    return config, model, dataset.splits[args.split]


def cmd_eval(args) -> int:
    config, model, samples = _eval_setup(args)
    out = config.output_dir or args.checkpoint
    report = write_eval_artifacts(model, samples, config.eval, args.map_source, out)
    print(f"map_source={args.map_source} split={args.split} n={len(samples)}")
    for key, value in report.to_dict().items():
        print(f"  {key}: {value}")
    print(f"artifacts in {out}")
    return 0


def cmd_sweep(args) -> int:
    from .reporting import write_sweep_csv

    config, model, samples = _eval_setup(args)
    _report, curve, _stats = evaluate_model(model, samples, config.eval,
                                            args.map_source)
    out = config.output_dir or args.checkpoint
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(path, curve)
    for d, accs in sorted(curve.accuracy_per_iou.items()):
        print(f"max acc@{d:g} = {max(accs):.4f}")
    print(f"wrote {path}")
    return 0


def cmd_decompose(args) -> int:
    from .reporting import render_decomposition

    config, model, samples = _eval_setup(args)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} out of range ({len(samples)} samples)")
    sample = samples[args.index]
    class_index = sample.label if args.class_index is None else args.class_index
    if not 0 <= class_index < model.config.num_classes:
        raise UsageError(
            f"--class-index {class_index} out of range ({model.config.num_classes} classes)")
    out = config.output_dir or os.path.join(args.checkpoint, "decompose")
    os.makedirs(out, exist_ok=True)
    bundle = forward(model, Tensor(image_to_input(sample.image)))
    maps = decompose(bundle.f_map, Tensor(model.head.data[class_index]), class_index)
    named = {"norm": maps.norm_map.data, "sim": maps.sim_map.data,
             "norm_hat": maps.norm_hat.data, "cam": maps.cam.data}
    for name, arr in named.items():
        write_ften(os.path.join(out, f"{name}.ften"), arr)
        write_pgm(os.path.join(out, f"{name}.pgm"), _to_pgm(arr, name))
    with open(os.path.join(out, "decompose.json"), "w") as fh:
        json.dump({"split": args.split, "index": args.index,
                   "class_index": int(class_index), "label": int(sample.label),
                   "weight_norm": maps.weight_norm}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    render_decomposition(os.path.join(out, "decomposition.png"), named)
    print(f"wrote norm/sim/norm_hat/cam dumps for class {class_index} to {out}")
    return 0


def _to_pgm(arr, name):
    """Affine scale to 0..255; similarity uses the fixed [-1,1] range."""
    if name == "sim":
        scaled = (arr + 1.0) / 2.0
    else:
        lo, hi = float(arr.min()), float(arr.max())
        scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    corrupt = 1.01 if args.inject_bug else None
    reports = gradcheck_suite(seed=seed, corrupt_scale=corrupt)
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        print(f"{name:10s} max_rel_err={rep.max_rel_err:.3e} "
              f"(eps={rep.eps:g}, tol={rep.tol:g}) {status}")
    if not suite_passed(reports):
        raise NumericError("gradient check failed")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return 1
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"E1: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"E2: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"E3: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
