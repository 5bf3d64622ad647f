"""Command-line interface.

Subcommands: ``train``, ``dump``, ``eval``, ``sweep``, ``oracle``, ``analyze``.
Any subcommand accepts ``--config FILE`` with ``key=value`` lines (keys are
the long flag names with dashes or underscores); explicit flags win.

Exit codes: 0 success, 2 usage error, 3 data-format or missing-file error,
4 training divergence.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from .exceptions import DataFormatError, InvalidInputError, TrainingDivergedError
from .harness import (
    collect_exitlog,
    compare_policies,
    dump_exitlog,
    evaluate,
    layer_accuracies,
    load_csv_dataset,
    load_exitlog,
    pairwise_disagreement,
    parse_dataset_spec,
    sweep,
    write_histogram_csv,
    write_report_csv,
)
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .objective import ObjectiveConfig, train, write_closest_layers_csv, write_diagnostics_csv
from .strategies import ExitPolicy, make_policy, parse_policy, split_policy_spec

log = logging.getLogger("exitwise")

EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED = 2, 3, 4

# manifest keys written by ``train``, in order
_TRAIN_KEYS = (
    "dataset", "data", "test_fraction", "seed", "layers", "hidden", "head_hidden",
    "activation", "residual", "lam", "alpha_scheme", "zero_last_beta", "adjacent_only",
    "stop_gradient", "epochs", "lr", "batch_size", "log_every",
)


class UsageError(Exception):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_data_args(p):
    src = p.add_argument_group("data")
    src.add_argument("--dataset", help="synthetic spec, e.g. two_moons:n=2000,noise=0.2")
    src.add_argument("--data", help="CSV file with label,feature,... rows")
    src.add_argument("--test-fraction", type=float, default=0.25)
    src.add_argument("--seed", type=int, default=42)


def _add_log_args(p, split=True):
    p.add_argument("--log", help="exitlog v1 file")
    p.add_argument("--model", help="checkpoint; used with --dataset/--data when --log is absent")
    _add_data_args(p)
    if split:
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--jobs", type=int, default=1, help="evaluation workers (capped by EXITWISE_THREADS)")


def build_parser():
    parser = argparse.ArgumentParser(prog="exitwise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a multi-exit model")
    p.add_argument("--config")
    _add_data_args(p)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--head-hidden", type=int, default=None)
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.add_argument("--residual", type=_bool, default=False)
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--alpha-scheme", choices=("uniform", "linear"), default="uniform")
    p.add_argument("--zero-last-beta", type=_bool, default=False)
    p.add_argument("--adjacent-only", type=_bool, default=False)
    p.add_argument("--stop-gradient", type=_bool, default=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("dump", help="write an exitlog for a dataset")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate exit policies")
    p.add_argument("--config")
    _add_log_args(p)
    p.add_argument("--policy", action="append", required=True)
    p.add_argument("--out", help="report CSV (default: stdout)")

    p = sub.add_parser("sweep", help="sweep one policy parameter")
    p.add_argument("--config")
    _add_log_args(p)
    p.add_argument("--policy", required=True, help="kind plus fixed params, e.g. voting:k=0.5")
    p.add_argument("--grid", required=True, help="param=v1,v2,... e.g. delta=1,2,3")
    p.add_argument("--out", help="report CSV (default: stdout)")

    p = sub.add_parser("oracle", help="oracle accuracy and speed-up")
    p.add_argument("--config")
    _add_log_args(p)
    p.add_argument("--out", help="report CSV (default: stdout)")

    p = sub.add_parser("analyze", help="policy comparison and per-layer exit histograms")
    p.add_argument("--config")
    _add_log_args(p)
    p.add_argument("--policy", action="append", default=[])
    p.add_argument("--out-dir", required=True)
    return parser


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _find_config(argv):
    command = next((a for a in argv if a in COMMANDS), None)
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if arg.startswith("--config="):
            return command, arg.split("=", 1)[1]
    return command, None


def _parse(argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, config_path = _find_config(argv)
    if command and config_path:
        sub = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in read_config_file(config_path).items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {command}")
            action = known[key]
            if raw in ("", "None"):
                defaults[key] = None
            elif action.type is not None:
                try:
                    defaults[key] = action.type(raw)
                except (ValueError, argparse.ArgumentTypeError):
                    raise UsageError(f"bad value for {key!r} in {config_path}: {raw!r}") from None
            else:
                defaults[key] = raw
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _load_dataset(args):
    if bool(args.dataset) == bool(args.data):
        raise UsageError("give exactly one of --dataset or --data")
    if args.data:
        return load_csv_dataset(args.data)
    return parse_dataset_spec(args.dataset, seed=args.seed)


def _select_split(data, args, split):
    if split == "all":
        return data
    train_set, test_set = data.split(args.test_fraction, seed=args.seed)
    return train_set if split == "train" else test_set


def _get_log(args):
    if args.log:
        return load_exitlog(args.log)
    if not args.model:
        raise UsageError("give --log, or --model with --dataset/--data")
    model = load_checkpoint(args.model)
    return collect_exitlog(model, _select_split(_load_dataset(args), args, args.split))


def _emit(points, out):
    write_report_csv(points, out or sys.stdout)


def _write_manifest(args, path):
    with open(path, "w") as fh:
        for key in _TRAIN_KEYS:
            value = getattr(args, key)
            fh.write(f"{key}={'' if value is None else value}\n")


def cmd_train(args):
    ObjectiveConfig(lam=args.lam)  # validate before touching the filesystem
    data = _load_dataset(args)
    train_set, _ = data.split(args.test_fraction, seed=args.seed)
    config = ModelConfig(
        input_dim=data.X.shape[1],
        hidden_dim=args.hidden,
        num_layers=args.layers,
        num_classes=data.n_classes,
        head_hidden_dim=args.head_hidden,
        activation=args.activation,
        seed=args.seed,
        residual=args.residual,
    )
    objective = ObjectiveConfig(
        lam=args.lam,
        alpha_scheme=args.alpha_scheme,
        zero_last_beta=args.zero_last_beta,
        adjacent_only=args.adjacent_only,
        stop_gradient=args.stop_gradient,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(config)
    t0 = time.perf_counter()
    result = train(
        model, train_set.X, train_set.y, objective, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch_size, seed=args.seed, log_every=args.log_every,
    )
    log.info("trained %d steps in %.2fs, final loss %.5f", len(result.losses), time.perf_counter() - t0, result.losses[-1])
    save_checkpoint(model, out / "model.mexm")
    write_diagnostics_csv(result.diagnostics, out / "diagnostics.csv")
    write_closest_layers_csv(result.closest_counts, out / "closest_layers.csv")
    _write_manifest(args, out / "manifest.txt")
    return 0


def cmd_dump(args):
    model = load_checkpoint(args.model)
    data = _select_split(_load_dataset(args), args, args.split)
    dump_exitlog(model, data, args.out)
    return 0


def cmd_eval(args):
    exit_log = _get_log(args)
    points = [evaluate(exit_log, parse_policy(s), args.jobs) for s in args.policy]
    _emit(points, args.out)
    return 0


def cmd_sweep(args):
    exit_log = _get_log(args)
    kind, fixed = split_policy_spec(args.policy)
    name, sep, values = args.grid.partition("=")
    if not sep:
        raise UsageError("--grid must look like param=v1,v2,...")
    try:
        grid = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"non-numeric grid value in {args.grid!r}") from None
    expected = {"voting": "delta", "patience": "s", "entropy": "t", "maxprob": "t"}.get(kind)
    if expected is None or name.strip() != expected:
        raise UsageError(f"{kind} sweeps take a grid over {expected!r}" if expected else f"cannot sweep {kind!r}")
    make_policy(kind, **{**fixed, expected: grid[0]} if grid else fixed)
    points = sweep(exit_log, kind, grid, n_jobs=args.jobs, **fixed)
    _emit(points, args.out)
    return 0


def cmd_oracle(args):
    _emit([evaluate(_get_log(args), ExitPolicy("oracle"), args.jobs)], args.out)
    return 0


def cmd_analyze(args):
    exit_log = _get_log(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policies = [parse_policy(s) for s in args.policy]
    points = compare_policies(exit_log, policies, args.jobs)
    write_report_csv(points, out / "comparison.csv")
    write_histogram_csv(points, out / "exit_histogram.csv")
    with open(out / "layer_accuracy.csv", "w") as fh:
        fh.write("layer,accuracy\n")
        for l, acc in enumerate(layer_accuracies(exit_log), start=1):
            fh.write(f"{l},{float(acc)!r}\n")
    with open(out / "summary.csv", "w") as fh:
        fh.write("samples,layers,classes,pairwise_disagreement\n")
        fh.write(f"{len(exit_log)},{exit_log.L},{exit_log.C},{pairwise_disagreement(exit_log)!r}\n")
    return 0


COMMANDS = {
    "train": cmd_train,
    "dump": cmd_dump,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "analyze": cmd_analyze,
}


def main(argv=None):
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"exitwise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (FileNotFoundError, OSError) as exc:
        print(f"exitwise: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"exitwise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidInputError as exc:
        print(f"exitwise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, OSError) as exc:
        print(f"exitwise: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDivergedError as exc:
        print(f"exitwise: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
