"""``eblearn`` command-line interface.

Subcommands: ``train``, ``eval``, ``verify``, ``bench`` and ``counterexample``.
Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import preset_names, resolve_config
from .datasets import load_dataset
from .exceptions import DomainError, EBLError, FormatError
from .kernels import Precision
from .relaxation import Scheme
from .training import ALL_RULES, TrainConfig, evaluate, fit, init_params, transform_for

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad configuration, arguments or input files (exit code 2)."""


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file or preset name (" + ", ".join(preset_names()) + ")")
    p.add_argument("--data-dir", help="dataset root (default: $EBL_DATA_DIR)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--rule", choices=ALL_RULES)
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="threads per batch (default: available cores)")
    p.add_argument("--precision", choices=[p.value for p in Precision])
    p.add_argument("--scheme", choices=[s.value for s in Scheme])
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int, help="use only the first N training images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eblearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics and checkpoints")
    _add_run_flags(p)
    p.add_argument("--test-limit", type=int, help="use only the first N test images")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="error rate of a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("verify", help="run the numerical self-checks")
    p.add_argument("--tier", choices=("fast", "full"), default="fast")
    p.add_argument("--out", help="also write the table as CSV here")

    p = sub.add_parser("bench", help="residual and time per relaxation iteration")
    p.add_argument("--config", default="table4-comparative")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--max-iters", type=int, default=250)
    p.add_argument("--target", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the trace as CSV here")

    p = sub.add_parser("counterexample", help="coupled-learning counterexample records")
    p.add_argument("--eta", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--theta0", type=float, default=1.0)
    return parser


def _overrides(args) -> dict:
    names = ("data_dir", "out", "rule", "dataset", "seed", "workers", "precision", "scheme",
             "epochs", "limit", "test_limit")
    return {n: getattr(args, n, None) for n in names}


def _data_dir(path) -> Path:
    if not path:
        raise UsageError("no data directory: pass --data-dir or set EBL_DATA_DIR")
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"data directory not found: {path}")
    return path


def _load(name: str, data_dir: Path, split: str, limit):
    try:
        data = load_dataset(name, data_dir, split)
    except FileNotFoundError as err:
        raise UsageError(f"{name} {split} data not found under {data_dir}: {err}") from None
    return data.subset(limit)


def cmd_train(args, out=sys.stdout, err=sys.stderr) -> int:
    exp = resolve_config(args.config, _overrides(args))
    data_dir = _data_dir(exp.data_dir)
    train = _load(exp.train.dataset, data_dir, "train", exp.limit)
    test = _load(exp.train.dataset, data_dir, "test", exp.test_limit)
    out_dir = Path(exp.out or "eblearn-run")
    out_dir.mkdir(parents=True, exist_ok=True)
    exp.write(out_dir / "config.json")
    print(f"training {exp.train.rule} on {len(train)} {exp.train.dataset} images "
          f"({len(test)} test), writing to {out_dir}", file=err)
    progress = None if args.quiet else (
        lambda e, seen, total: print(f"\repoch {e + 1}: {seen}/{total}", end="", file=err, flush=True))
    _, history = fit(exp.train, train, test, out_dir=out_dir, resume=args.resume, progress=progress)
    if not args.quiet:
        print(file=err)
    for h in history:
        print(f"epoch {h.epoch}: train error {h.train_error:.2f}% cost {h.train_cost:.4f}, "
              f"test error {h.test_error:.2f}% cost {h.test_cost:.4f} ({h.seconds:.1f} s)", file=out)
    return EXIT_OK


def cmd_eval(args, out=sys.stdout, err=sys.stderr) -> int:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(ckpt.config) if ckpt.config else None
    dataset = args.dataset or (config.dataset if config else None)
    if dataset is None:
        raise UsageError("checkpoint has no config; pass --dataset")
    data_dir = _data_dir(args.data_dir or os.environ.get("EBL_DATA_DIR"))
    data = _load(dataset, data_dir, args.split, args.limit)
    T = config.T if config else 60
    scheme = Scheme(config.scheme) if config else Scheme.ASYNC
    dtype = config.storage_dtype if config else ckpt.params.dtype
    error, mean_cost = evaluate(ckpt.params, data.images, data.labels, T, scheme,
                                transform=transform_for(dataset, dtype), dtype=dtype)
    print(f"{dataset} {args.split}: error {error:.4f}% cost {mean_cost:.6f} on {len(data)} images",
          file=out)
    return EXIT_OK


def _write_rows(rows, header, out, path=None):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def cmd_verify(args, out=sys.stdout, err=sys.stderr) -> int:
    from .checks import run_tier

    tic = time.perf_counter()
    results = run_tier(args.tier)
    _write_rows([r.row() for r in results], ["check", "error", "tolerance", "status", "detail"],
                out, args.out)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in "
          f"{time.perf_counter() - tic:.1f} s", file=err)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args, out=sys.stdout, err=sys.stderr) -> int:
    from .checks import bench_relaxation

    exp = resolve_config(args.config, {"workers": 1})
    arch = exp.train.architecture()
    params = init_params(arch, exp.train.gains, args.seed, np.float64)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(args.batch,) + arch.layer_shapes[0])
    traces = bench_relaxation(params, x, args.max_iters, args.target)
    rows = [row for t in traces for row in t.rows()]
    _write_rows(rows, ["scheme", "precision", "iter", "residual", "ms"], out, args.out)
    for t in traces:
        reached = t.iterations_to_target
        print(f"{t.scheme}/{t.precision}: " + (f"residual <= {t.target:g} after {reached} iterations"
              if reached else f"residual {t.residuals[-1]:.3g} after {len(t.residuals)} iterations"),
              file=err)
    return EXIT_OK


def cmd_counterexample(args, out=sys.stdout, err=sys.stderr) -> int:
    from .theory import quadratic_counterexample, scalar_counterexample

    eta, beta = args.eta, args.beta
    q = quadratic_counterexample(eta, beta)
    s = scalar_counterexample(eta, beta, args.theta0)
    report = {
        "quadratic": {
            "theta0": [0.0, 0.0], "eta": eta, "beta": beta,
            "delta_theta": q.delta_theta.tolist(),
            "directional_derivative": q.directional_derivative,
            "expected_stated": eta, "expected_derived": 2 * eta,
            "loss_before": q.loss_before, "loss_after": q.loss_after,
        },
        "scalar": {
            "theta0": s.theta0, "eta": eta, "beta": beta,
            "delta_theta": s.delta_theta,
            "L1_prime": s.L1_prime,
            "expected_stated": {"delta_theta": -eta * (1 + 2 * beta), "L1_prime": -2.0}
            if s.theta0 == 1.0 else None,
            "expected_derived": {"delta_theta": -eta * (5 - 4 * s.theta0 - 2 * beta * s.theta0)
                                 * s.theta0, "L1_prime": 10 * s.theta0 - 12 * s.theta0 ** 2},
        },
    }
    print(json.dumps(report, indent=2), file=out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "counterexample": cmd_counterexample,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out, err)
    except (UsageError, FileNotFoundError, FormatError, DomainError, ValueError, EBLError) as e:
        print(f"eblearn {args.command}: error: {e}", file=err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
