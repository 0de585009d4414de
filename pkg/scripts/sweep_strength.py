"""Sweep one training parameter of one run in a bundled spec against its baseline.

Prints mean AUC per split, the gap closed relative to baseline and, when the
spec has a probe, the mean probe accuracy. Seeds start at 100 by default so
sweeps never touch the seeds the bundled specs are evaluated on.

    python3 scripts/sweep_strength.py marking_bias TABE alpha 0.1 0.2 0.3 --seeds 3
"""
import argparse
import dataclasses
import tempfile
from pathlib import Path

import numpy as np

from unlearn_lab import experiment as ex


def _probe(res: dict) -> str:
    return "" if np.isnan(res["probe"]) else f" probe {res['probe']:.3f}"


def _summarise(summary: ex.RunSummary, method: str, splits: list[str]) -> dict:
    rec = {r["method"]: r for r in summary.aggregate}[method]
    out = {s: rec[f"{s}_auc_mean"] for s in splits}
    probes = [p["accuracy"] for p in summary.probes if p["method"] == method]
    out["probe"] = float(np.mean(probes)) if probes else float("nan")
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("spec", help="bundled spec name or path")
    ap.add_argument("run", help="run name in the spec file")
    ap.add_argument("param", help="TrainConfig field, e.g. alpha, mu, lam")
    ap.add_argument("values", nargs="+", type=float)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--seed-start", type=int, default=100)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    path = Path(args.spec) if Path(args.spec).exists() else ex.bundled_spec(args.spec)
    spec = ex.load_spec(path)
    spec.seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    runs = {r.name: r for r in spec.runs}
    target, splits = runs[args.run], list(spec.splits)
    plain, shifted = splits[0], splits[-1]

    with tempfile.TemporaryDirectory() as tmp:
        base_spec = dataclasses.replace(spec, runs=[runs["baseline"]])
        base = _summarise(ex.run_experiment(base_spec, Path(tmp) / "base", args.jobs), "baseline", splits)
        gap = base[plain] - base[shifted]
        print(f"{'baseline':>24} " + " ".join(f"{s} {base[s]:.3f}" for s in splits) + _probe(base), flush=True)
        for v in args.values:
            cfg = dataclasses.replace(target.config, **{args.param: type(getattr(target.config, args.param))(v)})
            run = ex.RunSpec(args.run, cfg)
            label = f"{args.run} {args.param}={v}"
            try:
                summary = ex.run_experiment(dataclasses.replace(spec, runs=[run]), Path(tmp) / str(v), args.jobs)
            except FloatingPointError as exc:
                print(f"{label:>24} diverged: {exc}", flush=True)
                continue
            res = _summarise(summary, args.run, splits)
            closed = 1 - (res[plain] - res[shifted]) / gap if gap else float("nan")
            print(f"{label:>24} "
                  + " ".join(f"{s} {res[s]:.3f}" for s in splits)
                  + _probe(res) + f" closed {closed:.0%} plain drop {base[plain] - res[plain]:+.3f}", flush=True)


if __name__ == "__main__":
    main()
