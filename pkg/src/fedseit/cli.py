"""Command line: ``run``, ``eval`` and ``split``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, parse_sit


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedseit", description="Federated continual text classification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration over its seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=["fedseit", "fedweit", "fedseit-dls", "isolated"])
    r.add_argument("--sit", help="off, or K")
    r.add_argument("--lambda2", type=float)
    g = r.add_mutually_exclusive_group()
    g.add_argument("--seeds", type=_seeds, help="comma-separated, e.g. 1,2,3")
    g.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="re-score saved checkpoints")
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--out", required=True)

    s = sub.add_parser("split", help="build the non-iid task grid from a TSV corpus")
    s.add_argument("--corpus", required=True, help="training TSV (label<TAB>text)")
    s.add_argument("--test-corpus", help="test TSV; omitted means empty test sets")
    s.add_argument("--clients", type=int, default=3)
    s.add_argument("--tasks", type=int, default=5)
    s.add_argument("--labels-per-task", type=int, default=4)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    return p


def _run(args) -> str:
    from .experiment import run_experiment

    s = load_config(args.config)
    if args.mode:
        s["mode"] = args.mode
    if args.sit is not None:
        s["sit"] = parse_sit(args.sit)
    if args.lambda2 is not None:
        s["lambda2"] = args.lambda2
    if args.seeds:
        s["seeds"] = args.seeds
    elif args.seed is not None:
        s["seeds"] = [args.seed]
    res = run_experiment(s, args.out)
    return f"TTA {res.tta_mean:.4f} +/- {res.tta_std:.4f} over seeds {res.seeds} -> {args.out}"


def _eval(args) -> str:
    from .experiment import evaluate_checkpoints

    res = evaluate_checkpoints(args.checkpoints, args.out)
    return f"TTA {res.tta_mean:.4f} +/- {res.tta_std:.4f} over seeds {res.seeds} -> {args.out}"


def _split(args) -> str:
    from .data import Corpus, load_corpus, non_iid_split, save_grid

    train = load_corpus(args.corpus, "train")
    test = load_corpus(args.test_corpus, "test") if args.test_corpus else Corpus([], "test")
    grid = non_iid_split(train, test, args.clients, args.tasks, args.labels_per_task, args.seed)
    save_grid(grid, args.out)
    return f"wrote {args.clients}x{args.tasks} task grid to {args.out}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "eval": _eval, "split": _split}[args.command]
    try:
        print(handler(args))
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"fedseit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
