"""Run every bundled experiment and print one comparison table per experiment.

    python3 scripts/run_all.py --out results [--seeds N] [--jobs K]
"""
import argparse
import time
from pathlib import Path

from unlearn_lab import experiment as ex

SPECS = ("marking_bias", "ruler_bias", "instrument_generalisation", "gr_ablation", "multi_head")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--seeds", type=int, help="use the first N seeds of each spec")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--only", nargs="+", choices=SPECS, default=SPECS)
    args = ap.parse_args()

    for name in args.only:
        spec = ex.load_spec(ex.bundled_spec(name))
        if args.seeds:
            spec.seeds = spec.seeds[:args.seeds]
        t = time.perf_counter()
        summary = ex.run_experiment(spec, args.out / name, jobs=args.jobs)
        print(f"\n## {name} ({len(spec.seeds)} seeds, {time.perf_counter() - t:.0f}s)\n")
        print(ex.compare([summary.out_dir]))
        if summary.probes:
            by_method: dict[str, list[float]] = {}
            for p in summary.probes:
                by_method.setdefault(p["method"], []).append(p["accuracy"])
            print("\nprobe accuracy: " + ", ".join(f"{m} {sum(v) / len(v):.3f}" for m, v in by_method.items()))


if __name__ == "__main__":
    main()
