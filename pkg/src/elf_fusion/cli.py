"""Command-line entry point.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage, config or data error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from collections import Counter
from pathlib import Path
from typing import Iterator

from . import shapes
from .config import MODES, load_config, render_config
from .data import read_split, split_dataset, synth_dataset, write_split
from .diagnostics import model_gradcheck
from .elft import atomic_write_text
from .errors import ConfigError, ElfError, FormatError, MetricError
from .metrics import reports_to_csv
from .train import (
    ablate,
    ablation_csv,
    evaluate,
    load_checkpoint,
    render_ablation,
    save_checkpoint,
    train,
)

logger = logging.getLogger("elf_fusion")

USAGE_ERRORS = (ConfigError, FormatError, FileNotFoundError)


class UsageError(Exception):
    pass


@contextlib.contextmanager
def dir_lock(directory: Path) -> Iterator[None]:
    """Exclusive lock file so two commands never write the same output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _echo_config(run) -> None:
    for line in render_config(run).splitlines():
        logger.info("config %s", line)


def cmd_synth(args) -> int:
    run = load_config(args.spec)
    out = Path(args.out)
    if out.exists() and any(p.name != ".lock" for p in out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    samples = synth_dataset(run.synth, run.fusion)
    with dir_lock(out):
        if args.test_fraction > 0:
            train_set, test_set = split_dataset(samples, 1 - args.test_fraction, run.synth.synth_seed)
            splits = {"train": train_set, "test": test_set}
        else:
            splits = {"train": samples}
        for split, items in splits.items():
            if (out / split).exists():
                shutil.rmtree(out / split)
            write_split(out, split, items)
            counts = Counter(s.label for s in items)
            per_class = " ".join(f"class{c}={counts.get(c, 0)}" for c in range(run.fusion.num_classes))
            print(f"{split}: {len(items)} samples ({per_class})")
    return 0


def cmd_train(args) -> int:
    run = load_config(args.config)
    _echo_config(run)
    data = read_split(args.data, args.split, run.fusion)
    out = Path(args.out)
    with dir_lock(out):
        result = train(
            data,
            run.fusion,
            run.train,
            args.mode,
            on_epoch=lambda e: logger.info("epoch %d loss %.6f train_acc %.4f", e.epoch, e.loss, e.train_acc),
        )
        save_checkpoint(out / "checkpoint", result.params, args.mode, run.fusion)
        atomic_write_text(out / "train_log.csv", result.log_csv())
        atomic_write_text(out / "config.txt", render_config(run))
        rep = evaluate(data, result.params, run.fusion, args.mode)
    print(f"final train acc {rep.acc:.3f} kappa {rep.kappa:.3f} (n={rep.n}, mode={args.mode})")
    return 0


def cmd_eval(args) -> int:
    run = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, mode = load_checkpoint(ckpt, run.fusion)
    if args.mode and args.mode != mode:
        raise UsageError(f"checkpoint was trained in mode {mode!r}, not {args.mode!r}")
    data = read_split(args.data, args.split, run.fusion)
    rep = evaluate(data, params, run.fusion, mode)
    print(rep.render(), end="")
    if args.out:
        atomic_write_text(args.out, reports_to_csv([rep]))
    return 0


def cmd_ablate(args) -> int:
    run = load_config(args.config)
    _echo_config(run)
    train_set = read_split(args.data, args.train_split, run.fusion)
    eval_set = read_split(args.data, args.eval_split, run.fusion) if args.eval_split != args.train_split else train_set
    out = Path(args.out)
    with dir_lock(out):
        rows = ablate(train_set, run.fusion, run.train, eval_set)
        table = render_ablation(rows)
        atomic_write_text(out / "ablation.txt", table)
        atomic_write_text(out / "ablation.csv", ablation_csv(rows))
    print(table, end="")
    kappa = {r.mode: r.report.kappa for r in rows}
    ordered = kappa["full"] >= max(kappa["fundus_only"], kappa["oct_only"])
    print(f"soft check: full >= single-modality kappa: {'yes' if ordered else 'no'}")
    return 0


def cmd_gradcheck(args) -> int:
    run = load_config(args.config)
    seed = run.train.seed if args.seed is None else args.seed
    report = model_gradcheck(run.fusion, seed, n_samples=args.samples, h=args.h, tol=args.tol)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max relative error {report.max_rel_err:.3e} (tol {report.tol:g}, h {report.h:g}) {verdict}")
    return 0 if report.passed else 1


def cmd_shapes(args) -> int:
    run = load_config(args.config)
    print(shapes.render_trace(run.fusion), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elf-fusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--spec", help="config file with synthesis keys (default: built-in defaults)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the six ablation configurations")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--train-split", default="train")
    p.add_argument("--eval-split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("shapes", help="print the symbolic dimension trace")
    p.add_argument("--config", help="config file or preset name (toy, paper)")
    p.set_defaults(func=cmd_shapes)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ElfError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
