"""Command line entry point: ``run``, ``compare`` and ``gen-data``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .synthdata import generate


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _resolve_spec(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    try:
        return ex.bundled_spec(arg)
    except FileNotFoundError:
        raise FileNotFoundError(f"no spec file {arg!r} (and no bundled spec of that name)") from None


def cmd_run(args) -> int:
    spec = ex.load_spec(_resolve_spec(args.spec))
    if args.seeds is not None:
        if args.seeds < 1:
            raise ValueError("--seeds must be positive")
        spec = dataclasses.replace(spec, seeds=list(range(args.seeds)))
    if args.dry_run:
        print(ex.describe_plan(spec))
        return 0
    out = Path(args.out) if args.out else Path("results") / spec.name
    summary = ex.run_experiment(spec, out, jobs=args.jobs, progress=None if args.quiet else _log)
    print(ex.compare([summary.out_dir]), end="")
    print(f"wrote {out}")
    return 0


def cmd_compare(args) -> int:
    print(ex.compare(args.dirs), end="")
    return 0


def cmd_gen_data(args) -> int:
    recipe, split = ex.parse_recipe(Path(args.recipe).read_text(), args.recipe)
    data = generate(recipe)
    data.save(args.out, split=args.split or split)
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-lab", description="Bias-unlearning experiments on synthetic lesions.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment spec")
    r.add_argument("spec", help="spec file, or the name of a bundled spec such as marking_bias")
    r.add_argument("--out", help="results directory (default results/<name>)")
    r.add_argument("--seeds", type=int, help="override the seed list with 0..N-1")
    r.add_argument("--jobs", type=int, default=1, help="worker threads (capped by UNLEARN_LAB_THREADS)")
    r.add_argument("--dry-run", action="store_true", help="validate and print the run matrix only")
    r.add_argument("-q", "--quiet", action="store_true", help="no per-unit progress on stderr")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="markdown AUC table over result directories")
    c.add_argument("dirs", nargs="+")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-data", help="generate and save a dataset from a recipe file")
    g.add_argument("recipe")
    g.add_argument("--out", required=True)
    g.add_argument("--split", help="split name written to the manifest")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
