"""Command-line interface: ``grnet {gen-data,train,eval,gradcheck}``.

Exit codes: 0 success, 1 check/eval failure or numerical error, 2 usage
error, 3 malformed dataset/model file. Every command first prints a
``# config`` line with all effective settings; timing goes to stderr.
"""
import argparse
import csv
import json
import sys
import time

import numpy as np

from grnet import __version__, data, gradcheck, linalg, net, optim
from grnet.errors import ConfigInvalid, FormatError, GrNetError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3
HISTORY_FIELDS = ["epoch", "train_loss", "train_acc", "test_acc"]


class UsageError(Exception):
    pass


def _fmt(x):
    return format(float(x), ".17g")


def _echo_config(command, settings):
    header = {"command": command, "version": __version__, "backend": linalg.BACKEND, **settings}
    print("# config " + json.dumps(header, sort_keys=True), flush=True)


def _timing(label, start):
    print(f"# {label}: {time.perf_counter() - start:.3f}s", file=sys.stderr, flush=True)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _nonneg_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _block(text):
    try:
        return net.BlockSpec.parse(text)
    except ConfigInvalid as err:
        raise argparse.ArgumentTypeError(str(err)) from None


# -- commands ------------------------------------------------------------


def cmd_gen_data(args):
    if args.order >= args.dim:
        raise UsageError(f"--order ({args.order}) must be smaller than --dim ({args.dim})")
    _echo_config("gen-data", {k: v for k, v in vars(args).items() if k != "func"})
    start = time.perf_counter()
    train, test = data.gen_synthetic(args.classes, args.per_class, args.dim, args.order, args.noise, args.seed)
    data.save(train, args.out_train)
    data.save(test, args.out_test)
    acc = data.nearest_prototype_accuracy(test, train.prototypes)
    print(f"train: {len(train)} samples -> {args.out_train}")
    print(f"test: {len(test)} samples -> {args.out_test}")
    print(f"Gr({args.order}, {args.dim}), {args.classes} classes, noise {args.noise}")
    print(f"nearest-prototype test accuracy: {_fmt(acc)}")
    _timing("gen-data", start)
    return EXIT_OK


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([row["epoch"]] + [_fmt(row[k]) for k in HISTORY_FIELDS[1:]])


def cmd_train(args):
    train = data.load(args.train, "train")
    test = data.load(args.test, "test") if args.test else None
    if test is not None and (test.dim, test.order) != (train.dim, train.order):
        raise UsageError("training and test sets live on different Grassmannians")
    order = train.order if args.order is None else args.order
    if order != train.order:
        raise UsageError(f"--order {order} does not match the data order {train.order}")
    classes = train.n_classes if args.classes is None else args.classes
    if len(train) and train.labels.max() >= classes:
        raise UsageError(f"--classes {classes} is smaller than the largest label + 1")
    cfg = net.NetworkConfig(
        input_dim=train.dim,
        order=order,
        n_classes=classes,
        blocks=list(args.blocks or []),
        retraction=args.retraction,
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except ConfigInvalid as err:
        raise UsageError(f"{err} (block grammar: {net.BLOCK_GRAMMAR})") from None
    log_path = args.log or args.out_model + ".history.csv"
    _echo_config("train", {**cfg.to_dict(), "train": args.train, "test": args.test, "out_model": args.out_model,
                           "log": log_path, "threads": args.threads})

    start = time.perf_counter()
    model = net.build(cfg)

    def report(row):
        print(f"epoch {row['epoch']:4d}  train_loss {row['train_loss']:.6f}  "
              f"train_acc {row['train_acc']:.4f}  test_acc {row['test_acc']:.4f}", flush=True)

    model, history = optim.train(model, train, test=test, threads=args.threads, on_epoch=report)
    net.save_model(model, args.out_model)
    write_history(log_path, history)
    print(f"model -> {args.out_model}")
    print(f"history -> {log_path}")
    _timing("train", start)
    return EXIT_OK


def cmd_eval(args):
    model = net.load_model(args.model)
    ds = data.load(args.data)
    if (ds.dim, ds.order) != (model.config.input_dim, model.config.order):
        raise UsageError(
            f"data is Gr({ds.order}, {ds.dim}) but the model expects "
            f"Gr({model.config.order}, {model.config.input_dim})"
        )
    _echo_config("eval", {"model": args.model, "data": args.data, "min_accuracy": args.min_accuracy,
                          "model_config": model.config.to_dict()})
    start = time.perf_counter()
    metrics = optim.evaluate(model, ds)
    print(f"samples: {len(ds)}")
    print(f"accuracy: {_fmt(metrics['accuracy'])}")
    print(f"loss: {_fmt(metrics['loss'])}")
    print("confusion (rows: true class, cols: predicted):")
    for c, row in enumerate(metrics["confusion"]):
        print(f"  {c}: " + " ".join(f"{v:5d}" for v in row))
    _timing("eval", start)
    if args.min_accuracy is not None and metrics["accuracy"] < args.min_accuracy:
        print(f"accuracy below --min-accuracy {args.min_accuracy}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args):
    targets = gradcheck.TARGETS if args.target == "all" else [args.target]
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    _echo_config("gradcheck", {"targets": targets, "seeds": list(seeds), "h": args.h, "tol": args.tol,
                               "log": args.log})
    start = time.perf_counter()
    reports = gradcheck.run_suite(targets, seeds=seeds, h=args.h, tol=args.tol)
    for rep in reports:
        print(rep.line())
    if args.log:
        with open(args.log, "w") as fh:
            for rep in reports:
                fh.write(rep.to_json() + "\n")
    ok = all(r.passed for r in reports)
    print(f"{sum(r.passed for r in reports)}/{len(reports)} targets passed")
    _timing("gradcheck", start)
    return EXIT_OK if ok else EXIT_FAIL


# -- parser --------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="grnet", description="Deep networks on Grassmann manifolds")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/test pair of GRNB files")
    p.add_argument("--classes", type=_positive_int, default=3)
    p.add_argument("--per-class", type=_positive_int, default=100, help="samples per class in each split")
    p.add_argument("--dim", type=_positive_int, default=20)
    p.add_argument("--order", type=_positive_int, default=10)
    p.add_argument("--noise", type=_nonneg_float, default=0.1)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a GrNet and write a GRNM model plus CSV history")
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--blocks", type=_block, action="append",
                   help=f"one Projection+Pooling block, repeatable: {net.BLOCK_GRAMMAR}")
    p.add_argument("--order", type=_positive_int)
    p.add_argument("--classes", type=_positive_int)
    p.add_argument("--lr", type=_nonneg_float, default=0.01)
    p.add_argument("--batch", type=_positive_int, default=30)
    p.add_argument("--epochs", type=_nonneg_int, default=100)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--retraction", choices=["psd", "stiefel"], default="psd")
    p.add_argument("--out-model", required=True)
    p.add_argument("--log", help="history CSV path (default: <out-model>.history.csv)")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--min-accuracy", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    p.add_argument("--target", choices=gradcheck.TARGETS + ["all"], default="all")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="first seed")
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of consecutive seeds")
    p.add_argument("--h", type=_positive_float, default=gradcheck.DEFAULT_H)
    p.add_argument("--tol", type=_positive_float)
    p.add_argument("--log", help="write one JSON report per line")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"grnet {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as err:
        print(f"grnet {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except (GrNetError, OSError) as err:
        print(f"grnet {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FORMAT if isinstance(err, OSError) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
