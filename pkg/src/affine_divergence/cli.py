"""Command-line runner.

Exit codes: 0 ok, 1 usage or configuration error, 2 verification failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys

from . import experiment as X
from .data import DatasetFormatError
from .layers import ConfigurationError
from .model import ACTIVATIONS, CONV_PRESETS, NORMALISERS
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag name -> config key; all default to None so that unset flags do not override the file
_CONFIG_FLAGS = [
    ("--arch", "arch", str, "comma-separated widths, e.g. 3072,32,10"),
    ("--normaliser", "normaliser", str, f"one of {', '.join(NORMALISERS)}"),
    ("--activation", "activation", str, f"one of {', '.join(ACTIVATIONS)}"),
    ("--epochs", "epochs", int, None),
    ("--batch-size", "batch_size", int, None),
    ("--eta", "eta", float, None),
    ("--optimizer", "optimizer", str, "sgd or adam"),
    ("--repeats", "repeats", int, None),
    ("--seed", "seed", int, "base seed; repeat r uses seed + r"),
    ("--data", "data", str, "cifar10 (read from --data-dir or DATA_DIR) or synthetic"),
    ("--channels", "channels", int, "base channel count of conv presets"),
    ("--synthetic-train", "synthetic_train", int, "training set size for --data synthetic"),
    ("--synthetic-test", "synthetic_test", int, "test set size for --data synthetic"),
]


def _add_config_flags(p):
    p.add_argument("--config", help="key=value file; flags override it")
    for flag, dest, typ, help_ in _CONFIG_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
    p.add_argument("--standardize", dest="standardize", action="store_const", const=True, default=None,
                   help="per-channel standardisation of CIFAR-10 pixels")
    p.add_argument("--data-dir", help="CIFAR-10 directory (default: $DATA_DIR, then ./data)")
    p.add_argument("--jobs", type=int, default=1, help="parallel repeats (output does not depend on it)")
    p.add_argument("--out", help="CSV path (default: stdout)")


def build_parser():
    p = _Parser(prog="affine-divergence", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train dense nets and write per-epoch accuracy")
    _add_config_flags(t)

    pt = sub.add_parser("patchnorm-train", help="train a conv preset")
    _add_config_flags(pt)
    pt.add_argument("--preset", choices=CONV_PRESETS, default="gap-net")

    s = sub.add_parser("sweep", help="final accuracy over a width or batch-size grid, with OLS slope")
    _add_config_flags(s)
    s.add_argument("--kind", choices=["width", "batch_size"], required=True)
    s.add_argument("--grid", required=True, help="comma-separated grid values, e.g. 8,16,32,64,128")

    c = sub.add_parser("clouds", help="2-D standard-normal points through a parameterless normaliser")
    c.add_argument("--normaliser", required=True, help=f"one of {', '.join(X.CLOUD_NORMALISERS)}")
    c.add_argument("--n", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")

    v = sub.add_parser("verify", help="numerical verification suites")
    v.add_argument("suite", choices=list(X.SUITES))
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--tol", type=float, default=None)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="per-trial CSV")
    return p


def resolve_config(args, **fixed) -> X.ExperimentConfig:
    values = X.read_config_file(args.config) if args.config else {}
    for _, dest, _, _ in _CONFIG_FLAGS:
        if getattr(args, dest) is not None:
            values[dest] = getattr(args, dest)
    if args.standardize is not None:
        values["standardize"] = args.standardize
    values.update(fixed)
    return X.ExperimentConfig.from_mapping(values)


def _data_path(args):
    return args.data_dir or os.environ.get("DATA_DIR")


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _sibling(path, suffix):
    root, _ = os.path.splitext(path)
    return f"{root}.{suffix}.csv"


def _print_summary(summary, fh):
    for row in summary:
        print(f"epoch {row['epoch']:>3}: test accuracy {row['test_acc_mean']:.2f} +- "
              f"{row['test_acc_se']:.2f} % over {row['repeats']} repeat(s)", file=fh)


def cmd_train(args, **fixed):
    cfg = resolve_config(args, **fixed)
    train, test = X.load_data(cfg, _data_path(args))
    records = X.run_repeats(cfg, train, test, jobs=args.jobs)
    summary = X.summarize(records)
    with _output(args.out) as fh:
        X.write_csv(X.train_rows(records), X.TRAIN_FIELDS, fh)
    if args.out:
        with open(_sibling(args.out, "summary"), "w", newline="") as fh:
            X.write_csv(summary, X.SUMMARY_FIELDS, fh, X.SUMMARY_FORMATS)
    print(f"config {cfg.fingerprint()[:16]}", file=sys.stderr)
    _print_summary(summary, sys.stderr)
    return EXIT_OK


def cmd_patchnorm_train(args):
    fixed = {"model": args.preset}
    if args.normaliser is None:
        fixed["normaliser"] = "patchnorm_affine"
    return cmd_train(args, **fixed)


def _parse_grid(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"grid values must be integers, got {text!r}") from None


def cmd_sweep(args):
    cfg = resolve_config(args)
    grid = _parse_grid(args.grid)
    if len(grid) < 2:
        raise ConfigurationError("a sweep grid needs at least 2 values")
    train, test = X.load_data(cfg, _data_path(args))
    rows, fit = X.run_sweep(cfg, args.kind, grid, train, test, jobs=args.jobs)
    with _output(args.out) as fh:
        X.write_csv(rows, X.SWEEP_FIELDS, fh)
    fit_row = {"kind": args.kind, "points": fit.points, "slope": fit.slope,
               "slope_se": fit.slope_se, "intercept": fit.intercept}
    if args.out:
        with open(_sibling(args.out, "fit"), "w", newline="") as fh:
            X.write_csv([fit_row], X.FIT_FIELDS, fh)
    print(f"slope {fit.slope:.4e} +- {fit.slope_se:.4e} accuracy-% per {args.kind} unit "
          f"({fit.points} grid points)", file=sys.stderr)
    return EXIT_OK


def cmd_clouds(args):
    Xin, Y = X.cloud_points(args.normaliser, args.n, args.seed)
    with _output(args.out) as fh:
        X.write_csv(X.cloud_rows(Xin, Y), X.CLOUD_FIELDS, fh)
    return EXIT_OK


def cmd_verify(args):
    result = X.run_suite(args.suite, args.trials, args.tol, args.seed)
    for line in result.lines:
        print(line)
    print(f"{result.suite}: {'PASS' if result.passed else 'FAIL'}")
    if args.out and result.rows:
        with open(args.out, "w", newline="") as fh:
            X.write_csv(result.rows, list(result.rows[0].keys()), fh)
    return EXIT_OK if result.passed else EXIT_VERIFY


COMMANDS = {"train": cmd_train, "patchnorm-train": cmd_patchnorm_train, "sweep": cmd_sweep,
            "clouds": cmd_clouds, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
