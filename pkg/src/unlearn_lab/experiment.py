"""Declarative experiment specs and the multi-seed runner.

Spec files are plain ``key = value`` text grouped in sections::

    name = marking_bias
    seeds = 6                 # a count (0..n-1) or an explicit list "0, 1, 5"
    image_size = 24

    [data]                    # training recipe (DatasetRecipe fields)
    n_samples = 600
    marking_rate = 0.06
    dm = 20

    [test]                    # one latent set, rendered once per split
    n_samples = 300

    [split plain]             # per-split artefact / instrument overrides
    marking = 0
    [split marked]
    marking = 1

    [probe]                   # optional linear probe of a bias axis
    axis = marking
    marking_rate = 0.5

    [model]                   # ExtractorConfig fields
    [train]                   # TrainConfig defaults shared by all runs
    lr = 0.005

    [run LNTL]                # one method per run; keys override [train]
    heads = LNTL:marking
    mu = 0.3

Blank lines and ``#`` comments are ignored. Unknown keys and sections are
errors reported with their line number.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import (accuracy, aggregate_seeds, probe_bias, roc_auc, saliency_map,
                      sensitivity_specificity, tta_predict_batch, write_pgm)
from .models import ExtractorConfig, HeadSpec, ModelBundle
from .synthdata import (BIAS_AXES, Dataset, DatasetRecipe, generate, instrument_proxy_labels,
                        render_latents, sample_latents)
from .unlearn import HeadAssignment, TrainConfig, train

THREADS_ENV = "UNLEARN_LAB_THREADS"
_HEADER = re.compile(r"^\[\s*(\w+)(?:\s+([\w.+*-]+))?\s*\]$")


class SpecError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


# --------------------------------------------------------------------------
# value conversion driven by dataclass annotations


def _convert(text: str, annotation: str):
    text = text.strip()
    optional = "None" in annotation
    if optional and text.lower() == "none":
        return None
    base = annotation.replace("| None", "").strip()
    if base.startswith("tuple"):
        inner = "int" if "int" in base else "str"
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(int(t) if inner == "int" else t for t in items)
    if base == "bool":
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    return text


def _fields(cls, exclude=()) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls) if f.name not in exclude}


RECIPE_KEYS = _fields(DatasetRecipe, exclude=("image_size", "seed"))
TRAIN_KEYS = _fields(TrainConfig, exclude=("heads", "seed"))
MODEL_KEYS = _fields(ExtractorConfig, exclude=("image_size",))
TOP_KEYS = {"name": "str", "seeds": "str", "image_size": "int", "tta": "int", "saliency": "int",
            "description": "str"}
DATA_EXTRA = {"instrument_min_count": "int"}
TEST_KEYS = {k: v for k, v in RECIPE_KEYS.items() if k not in ("dm", "dr")}
SPLIT_KEYS = {"marking": "int", "ruler": "int", "instrument": "int"}
PROBE_KEYS = {"axis": "str", **TEST_KEYS}
RUN_KEYS = {"heads": "str", **TRAIN_KEYS}


@dataclass
class RunSpec:
    name: str
    config: TrainConfig


@dataclass
class ExperimentSpec:
    name: str
    seeds: list[int]
    image_size: int
    train_recipe: dict
    test_recipe: dict
    splits: dict[str, dict[str, int]]
    runs: list[RunSpec]
    model: dict = field(default_factory=dict)
    probe: dict | None = None
    instrument_min_count: int = 1
    tta: int = 8
    saliency: int = 2
    description: str = ""

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(image_size=self.image_size, **self.model)

    def planned(self) -> list[tuple[int, RunSpec]]:
        return [(s, r) for s in self.seeds for r in self.runs]


def _parse_seeds(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        n = int(parts[0])
        if n < 1:
            raise ValueError("seed count must be positive")
        return list(range(n))
    return [int(p) for p in parts]


def parse_spec(text: str, path="<spec>") -> ExperimentSpec:
    """Parse spec text; every error names the offending line."""
    sections: list[tuple[str, str | None, int, dict[str, tuple[str, int]]]] = [("", None, 0, {})]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m:
            kind, arg = m.group(1), m.group(2)
            if kind not in ("data", "test", "split", "probe", "model", "train", "run"):
                raise SpecError(path, lineno, f"unknown section [{kind}]")
            if (kind in ("split", "run")) != (arg is not None):
                raise SpecError(path, lineno, f"section [{kind}] {'needs' if arg is None else 'takes no'} a name")
            sections.append((kind, arg, lineno, {}))
            continue
        if line.startswith("["):
            raise SpecError(path, lineno, f"malformed section header {line!r}")
        key, eq, value = line.partition("=")
        if not eq or not key.strip():
            raise SpecError(path, lineno, f"expected 'key = value', got {line!r}")
        body = sections[-1][3]
        key = key.strip()
        if key in body:
            raise SpecError(path, lineno, f"duplicate key {key!r}")
        body[key] = (value.strip(), lineno)

    def convert(body, allowed, where):
        out = {}
        for key, (value, lineno) in body.items():
            if key not in allowed:
                raise SpecError(path, lineno, f"unknown key {key!r} in {where}")
            try:
                out[key] = _convert(value, allowed[key])
            except ValueError as exc:
                raise SpecError(path, lineno, f"bad value for {key!r}: {exc}") from None
        return out

    top = convert(sections[0][3], TOP_KEYS, "top level")
    seen: set[tuple[str, str | None]] = set()
    train_recipe, test_recipe, model, train_defaults = {}, {}, {}, {}
    probe = None
    splits: dict[str, dict[str, int]] = {}
    run_bodies: list[tuple[str, int, dict]] = []
    inst_min = 1
    for kind, arg, lineno, body in sections[1:]:
        if (kind, arg) in seen:
            raise SpecError(path, lineno, f"duplicate section [{kind}{' ' + arg if arg else ''}]")
        seen.add((kind, arg))
        if kind == "data":
            train_recipe = convert(body, {**RECIPE_KEYS, **DATA_EXTRA}, "[data]")
            inst_min = train_recipe.pop("instrument_min_count", 1)
        elif kind == "test":
            test_recipe = convert(body, TEST_KEYS, "[test]")
        elif kind == "split":
            splits[arg] = convert(body, SPLIT_KEYS, f"[split {arg}]")
        elif kind == "probe":
            probe = convert(body, PROBE_KEYS, "[probe]")
            if probe.get("axis") not in ("marking", "ruler"):
                raise SpecError(path, lineno, "probe axis must be marking or ruler")
        elif kind == "model":
            model = convert(body, MODEL_KEYS, "[model]")
        elif kind == "train":
            train_defaults = convert(body, TRAIN_KEYS, "[train]")
        else:
            run_bodies.append((arg, lineno, body))

    if "name" not in top:
        raise SpecError(path, None, "missing top-level 'name'")
    if not splits:
        raise SpecError(path, None, "at least one [split NAME] section is required")
    if not run_bodies:
        raise SpecError(path, None, "at least one [run NAME] section is required")
    try:
        seeds = _parse_seeds(top.get("seeds", "6"))
    except ValueError as exc:
        line = sections[0][3].get("seeds", ("", None))[1]
        raise SpecError(path, line, f"bad seeds: {exc}") from None

    runs = []
    for name, lineno, body in run_bodies:
        vals = convert(body, RUN_KEYS, f"[run {name}]")
        heads_text = vals.pop("heads", "")
        try:
            heads = tuple(HeadAssignment.parse(h) for h in heads_text.split(",") if h.strip())
            for h in heads:
                if h.axis not in BIAS_AXES:
                    raise ValueError(f"unknown bias axis {h.axis!r}")
        except ValueError as exc:
            raise SpecError(path, body["heads"][1], f"[run {name}]: {exc}") from None
        try:
            cfg = TrainConfig(heads=heads, **{**train_defaults, **vals})
        except (ValueError, TypeError) as exc:
            raise SpecError(path, lineno, f"[run {name}]: {exc}") from None
        runs.append(RunSpec(name, cfg))

    spec = ExperimentSpec(
        name=top["name"], seeds=seeds, image_size=top.get("image_size", 32),
        train_recipe=train_recipe, test_recipe=test_recipe, splits=splits, runs=runs,
        model=model, probe=probe, instrument_min_count=inst_min, tta=top.get("tta", 8),
        saliency=top.get("saliency", 2), description=top.get("description", ""),
    )
    try:
        DatasetRecipe(image_size=spec.image_size, **train_recipe)
        DatasetRecipe(image_size=spec.image_size, **test_recipe)
        spec.extractor_config().conv_output_shape()
    except (ValueError, TypeError) as exc:
        raise SpecError(path, None, str(exc)) from None
    return spec


def load_spec(path) -> ExperimentSpec:
    return parse_spec(Path(path).read_text(), path)


def bundled_spec(name: str) -> Path:
    """Path of a spec shipped with the package (``marking_bias`` etc.)."""
    p = Path(__file__).parent / "specs" / (name if name.endswith(".spec") else name + ".spec")
    if not p.exists():
        raise FileNotFoundError(p)
    return p


# --------------------------------------------------------------------------
# data per seed


def _derive(seed: int, role: int) -> int:
    return int(np.random.SeedSequence([seed, role]).generate_state(1)[0])


@dataclass
class SeedData:
    train: Dataset
    splits: dict[str, Dataset]
    instrument_classes: int
    probe: Dataset | None = None


def build_seed_data(spec: ExperimentSpec, seed: int) -> SeedData:
    size = spec.image_size
    data = generate(DatasetRecipe(image_size=size, seed=_derive(seed, 1), **spec.train_recipe))
    labels, kept = instrument_proxy_labels(data.dims, spec.instrument_min_count)
    data = data.subset(np.flatnonzero(kept))
    data.instrument = labels[kept]
    test_kw = {"marking_rate": 0.0, "ruler_rate": 0.0, **spec.test_recipe}
    latents = sample_latents(DatasetRecipe(image_size=size, seed=_derive(seed, 2), **test_kw))
    splits = {name: render_latents(latents, size, **ov) for name, ov in spec.splits.items()}
    probe = None
    if spec.probe is not None:
        kw = {k: v for k, v in spec.probe.items() if k != "axis"}
        kw = {"marking_rate": 0.0, "ruler_rate": 0.0, "n_samples": 800, **kw}
        probe = render_latents(sample_latents(DatasetRecipe(image_size=size, seed=_derive(seed, 3), **kw)), size)
    return SeedData(data, splits, int(labels[kept].max()) + 1 if kept.any() else 1, probe)


# --------------------------------------------------------------------------
# one (seed, run) unit


@dataclass
class UnitResult:
    seed: int
    run: str
    rows: list[dict]
    scores: dict[str, tuple[np.ndarray, np.ndarray]]
    log: list[dict]
    probe: dict | None
    saliency: list[tuple[str, np.ndarray]]
    saliency_rows: list[dict]


def _head_specs(cfg: TrainConfig, n_inst: int) -> list[HeadSpec]:
    return [HeadSpec(h.method, h.axis, n_inst if h.axis == "instrument" else 2) for h in cfg.heads]


def run_unit(spec: ExperimentSpec, seed: int, run: RunSpec, data: SeedData, with_saliency: bool) -> UnitResult:
    cfg = dataclasses.replace(run.config, seed=seed)
    bundle = ModelBundle.build(spec.extractor_config(), _head_specs(cfg, data.instrument_classes), seed=seed)
    try:
        result = train(bundle, data.train, cfg)
    except FloatingPointError as exc:
        raise FloatingPointError(f"run {run.name!r} seed {seed} diverged: {exc}") from exc
    rows, scores, sal, sal_rows = [], {}, [], []
    for split, ds in data.splits.items():
        s = tta_predict_batch(bundle, ds.images, spec.tta, seed=_derive(seed, 4))
        auc = roc_auc(s, ds.labels).auc
        sens, spec_ = sensitivity_specificity(s, ds.labels, 0.5)
        rows.append({"seed": seed, "method": run.name, "split": split, "auc": auc,
                     "sensitivity": sens, "specificity": spec_, "accuracy": accuracy(s, ds.labels)})
        scores[split] = (s, ds.labels)
        if with_saliency:
            for i in range(min(spec.saliency, len(ds))):
                m = saliency_map(bundle, ds.images[i], int(ds.labels[i]))
                sal.append((f"{run.name}_{split}_{i}", m))
                if ds.marking_mask is not None and ds.marking_mask[i].any():
                    sal_rows.append({"method": run.name, "split": split, "image": i,
                                     "marking_mass": float(m[ds.marking_mask[i]].sum() / max(m.sum(), 1e-300))})
    probe = None
    if data.probe is not None:
        axis = spec.probe["axis"]
        feats = bundle.features(data.probe.images)
        half = len(feats) // 2
        bias = data.probe.bias(axis)
        pr = probe_bias(feats[:half], bias[:half], feats[half:], bias[half:], n_classes=2)
        probe = {"seed": seed, "method": run.name, "axis": axis, "accuracy": pr.accuracy,
                 "cross_entropy": pr.cross_entropy, "chance": pr.chance}
    return UnitResult(seed, run.name, rows, scores, result.log, probe, sal, sal_rows)


# --------------------------------------------------------------------------
# the full matrix


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


METRICS = ("auc", "sensitivity", "specificity", "accuracy")


def aggregate_rows(rows: list[dict], methods: list[str], splits: list[str]) -> tuple[list[str], list[dict]]:
    """One row per method with mean/std per split and metric."""
    header = ["method", "n_seeds"]
    for split in splits:
        for m in METRICS:
            header += [f"{split}_{m}_mean", f"{split}_{m}_std"]
    out = []
    for method in methods:
        rec: dict = {"method": method}
        for split in splits:
            sel = [r for r in rows if r["method"] == method and r["split"] == split]
            rec["n_seeds"] = len(sel)
            for m in METRICS:
                agg = aggregate_seeds([r[m] for r in sel])
                rec[f"{split}_{m}_mean"], rec[f"{split}_{m}_std"] = agg.mean, agg.std
        out.append(rec)
    return header, out


def resolve_jobs(requested: int) -> int:
    jobs = max(1, requested)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return jobs


@dataclass
class RunSummary:
    out_dir: Path
    rows: list[dict]
    probes: list[dict]
    aggregate: list[dict]


def run_experiment(spec: ExperimentSpec, out_dir, jobs: int = 1, progress=None) -> RunSummary:
    """Train and evaluate every (seed, run) pair and write all outputs.

    Units may run on worker threads; results are sorted before writing so
    the bytes on disk do not depend on scheduling.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = resolve_jobs(jobs)
    say = progress or (lambda msg: None)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        data = dict(zip(spec.seeds, pool.map(lambda s: build_seed_data(spec, s), spec.seeds)))
        first = spec.seeds[0]

        def unit(item):
            seed, run = item
            res = run_unit(spec, seed, run, data[seed], with_saliency=seed == first)
            say(f"seed {seed} {run.name}: " + ", ".join(f"{r['split']} {r['auc']:.3f}" for r in res.rows))
            return res

        results = list(pool.map(unit, spec.planned()))

    order = {r.name: i for i, r in enumerate(spec.runs)}
    results.sort(key=lambda u: (order[u.run], spec.seeds.index(u.seed)))
    methods = [r.name for r in spec.runs]
    splits = list(spec.splits)

    rows = [row for u in results for row in u.rows]
    _write_csv(out / "results.csv", ["seed", "method", "split", *METRICS], rows)
    header, agg = aggregate_rows(rows, methods, splits)
    _write_csv(out / "aggregate.csv", header, agg)

    for method in methods:
        for split in splits:
            parts = [u.scores[split] for u in results if u.run == method]
            s = np.concatenate([p[0] for p in parts])
            y = np.concatenate([p[1] for p in parts])
            roc_auc(s, y).to_csv(out / f"roc_{split}_{method}.csv")

    probes = [u.probe for u in results if u.probe is not None]
    if probes:
        _write_csv(out / "probe.csv", ["seed", "method", "axis", "accuracy", "cross_entropy", "chance"], probes)

    sal_dir = out / "saliency"
    if sal_dir.exists():
        shutil.rmtree(sal_dir)
    sal_dir.mkdir()
    for u in results:
        for name, m in u.saliency:
            write_pgm(sal_dir / f"{name}.pgm", m)
    sal_rows = [r for u in results for r in u.saliency_rows]
    if sal_rows:
        _write_csv(out / "saliency.csv", ["method", "split", "image", "marking_mass"], sal_rows)

    log_dir = out / "logs"
    log_dir.mkdir(exist_ok=True)
    for u in results:
        with open(log_dir / f"{u.run}_seed{u.seed}.ndjson", "w") as fh:
            for rec in u.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return RunSummary(out, rows, probes, agg)


def describe_plan(spec: ExperimentSpec) -> str:
    lines = [f"experiment {spec.name}: {len(spec.runs)} runs x {len(spec.seeds)} seeds "
             f"= {len(spec.planned())} trainings",
             f"seeds: {', '.join(map(str, spec.seeds))}",
             f"test splits: {', '.join(f'{k} {v}' if v else k for k, v in spec.splits.items())}"]
    for r in spec.runs:
        c = r.config
        heads = ", ".join(map(str, c.heads)) or "(none)"
        extra = " no-reversal" if c.ablate_gradient_reversal else ""
        lines.append(f"  run {r.name}: heads {heads}; lr {c.lr} epochs {c.epochs} alpha {c.alpha} "
                     f"lam {c.lam} mu {c.mu} boost {c.effective_boost}{extra}")
    if spec.probe:
        lines.append(f"probe: {spec.probe['axis']}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# comparing result directories


def _read_aggregate(path: Path) -> tuple[list[str], dict[str, dict[str, tuple[float, float]]]]:
    with open(path / "aggregate.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty aggregate.csv")
    splits = [k[:-len("_auc_mean")] for k in rows[0] if k.endswith("_auc_mean")]
    table = {r["method"]: {s: (float(r[f"{s}_auc_mean"]), float(r[f"{s}_auc_std"])) for s in splits}
             for r in rows}
    return splits, table


def compare(dirs) -> str:
    """Markdown table of AUC mean +- std per method and split; column maxima in bold."""
    dirs = [Path(d) for d in dirs]
    if not dirs:
        raise ValueError("need at least one results directory")
    loaded = [(d, *_read_aggregate(d)) for d in dirs]
    splits = loaded[0][1]
    for d, s, _ in loaded[1:]:
        if sorted(s) != sorted(splits):
            raise ValueError(f"split names differ: {loaded[0][0]} has {splits}, {d} has {s}")
    all_methods = [m for _, _, t in loaded for m in t]
    clash = {m for m in all_methods if all_methods.count(m) > 1}
    entries = []
    for d, _, table in loaded:
        for method, vals in table.items():
            label = f"{d.name}/{method}" if method in clash else method
            entries.append((label, vals))
    best = {s: max(v[s][0] for _, v in entries) for s in splits}
    lines = ["| method | " + " | ".join(splits) + " |", "|---|" + "---|" * len(splits)]
    for label, vals in entries:
        cells = []
        for s in splits:
            mean, std = vals[s]
            cell = f"{mean:.3f} ± {std:.3f}"
            cells.append(f"**{cell}**" if mean == best[s] else cell)
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_recipe(text: str, path="<recipe>") -> tuple[DatasetRecipe, str]:
    """A recipe file is a [data]-style key list (optionally with ``split``)."""
    body, split = {}, "train"
    allowed = {**RECIPE_KEYS, "image_size": "int", "seed": "int"}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line == "[data]":
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise SpecError(path, lineno, f"expected 'key = value', got {line!r}")
        if key == "split":
            split = value.strip()
            continue
        if key not in allowed:
            raise SpecError(path, lineno, f"unknown recipe key {key!r}")
        try:
            body[key] = _convert(value, allowed[key])
        except ValueError as exc:
            raise SpecError(path, lineno, f"bad value for {key!r}: {exc}") from None
    try:
        return DatasetRecipe(**body), split
    except (ValueError, TypeError) as exc:
        raise SpecError(path, None, str(exc)) from None

