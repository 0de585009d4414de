"""Procedural lesion images with planted artefacts and instrument renderings.

Each sample is drawn as a latent description (:class:`Lesion`) and then
rendered; rendering is a pure function of the latent plus the artefact and
instrument switches, so the same lesion can be drawn with and without a
marking to build paired test sets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import ClassWeights

ARTEFACTS = ("marking", "ruler")
BIAS_AXES = ("marking", "ruler", "instrument")

VIOLET = np.array([0.62, 0.16, 0.80])
RULER_DARK, RULER_LIGHT = 0.06, 0.95

# border tint colour, tint strength and blur sigma per instrument class
INSTRUMENT_TINTS = np.array([
    [0.98, 0.72, 0.45],
    [0.45, 0.75, 0.98],
    [0.55, 0.95, 0.55],
    [0.15, 0.15, 0.15],
    [0.98, 0.98, 0.85],
    [0.95, 0.45, 0.40],
    [0.45, 0.45, 0.70],
    [0.85, 0.85, 0.30],
])
INSTRUMENT_STRENGTH = np.array([0.55, 0.55, 0.5, 0.6, 0.5, 0.55, 0.6, 0.55])
INSTRUMENT_BLUR = np.array([0.0, 0.5, 0.8, 0.0, 0.5, 0.8, 0.3, 0.6])
# nominal capture size per instrument, used as the image-dimension proxy
INSTRUMENT_DIMS = [(1024, 768), (640, 480), (6000, 4000), (1872, 1053),
                   (3024, 2016), (4288, 2848), (2592, 1936), (1504, 1129)]

# marking detector: violet band and minimum pixel fraction
VIOLET_RULE = dict(blue_min=0.5, red_min=0.4, green_max=0.35, min_fraction=0.005)
# ruler detector: edge strip depth, window length, mean |step| threshold
RULER_RULE = dict(depth=2, window=12, threshold=0.2)


@dataclass
class DatasetRecipe:
    n_samples: int = 1000
    image_size: int = 32
    malignant_fraction: float = 0.3
    # per artefact: presence rate (None -> equal to malignant_fraction) and phi correlation
    marking_rate: float | None = 0.1
    marking_corr: float = 0.0
    ruler_rate: float | None = 0.1
    ruler_corr: float = 0.0
    n_instruments: int = 8
    # probability that a sample's instrument is drawn from the label's preferred group
    instrument_corr: float = 0.0
    instruments: tuple[int, ...] | None = None
    # signal strength of the lesion class: 1 is the default overlap, larger separates more
    class_separation: float = 1.0
    dm: int = 0
    dr: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_instruments < 2 or self.n_instruments > len(INSTRUMENT_TINTS):
            raise ValueError(f"n_instruments must lie in [2, {len(INSTRUMENT_TINTS)}]")
        for name in ("marking_corr", "ruler_corr"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")
        if not 0.0 < self.malignant_fraction < 1.0:
            raise ValueError("malignant_fraction must lie in (0, 1)")
        if self.dm < 0 or self.dr < 0:
            raise ValueError("dm and dr must be nonnegative")

    @property
    def instrument_pool(self) -> tuple[int, ...]:
        return tuple(self.instruments) if self.instruments is not None else tuple(range(self.n_instruments))


@dataclass(frozen=True)
class Lesion:
    """Everything needed to render one lesion; artefact geometry is always present."""

    label: int
    center: tuple[float, float]
    radius: float
    irregularity: float
    lobes: tuple[tuple[int, float, float], ...]
    mottle: float
    darkness: float
    skin: tuple[float, float, float]
    texture_seed: int
    marking_arcs: tuple[tuple[float, float, float, float], ...]
    ruler: tuple[int, int, int, int]
    tint_jitter: float


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    marking: np.ndarray
    ruler: np.ndarray
    instrument: np.ndarray
    marking_mask: np.ndarray | None = None
    lesion_mask: np.ndarray | None = None
    dims: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def bias(self, axis: str) -> np.ndarray:
        if axis not in BIAS_AXES:
            raise ValueError(f"unknown bias axis {axis!r}")
        return getattr(self, axis)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx], self.labels[idx], self.marking[idx], self.ruler[idx], self.instrument[idx],
            None if self.marking_mask is None else self.marking_mask[idx],
            None if self.lesion_mask is None else self.lesion_mask[idx],
            [self.dims[i] for i in np.arange(len(self))[idx]] if self.dims else [],
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        def cat(name):
            arrs = [getattr(p, name) for p in parts]
            return None if any(a is None for a in arrs) else np.concatenate(arrs)

        return Dataset(
            cat("images"), cat("labels"), cat("marking"), cat("ruler"), cat("instrument"),
            cat("marking_mask"), cat("lesion_mask"), [d for p in parts for d in p.dims],
        )

    def save(self, out_dir, split: str = "train") -> None:
        """Write ``images.npy`` plus a CSV manifest with one row per sample."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "images.npy", self.images.astype("<f8"))
        with open(out / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label", "marking", "ruler", "instrument", "split"])
            for i in range(len(self)):
                w.writerow([i, int(self.labels[i]), int(self.marking[i]), int(self.ruler[i]),
                            int(self.instrument[i]), split])

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        d = Path(in_dir)
        images = np.load(d / "images.npy")
        with open(d / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([int(r[k]) for r in rows], dtype=int)  # noqa: E731
        return cls(images, col("label"), col("marking"), col("ruler"), col("instrument"))


# --------------------------------------------------------------------------
# sampling


def _coupled_bernoulli(rng, labels: np.ndarray, rate: float | None, corr: float) -> np.ndarray:
    """Binary variable with the given marginal rate and phi correlation to ``labels``."""
    pi = labels.mean() if len(labels) else 0.5
    q = pi if rate is None else rate
    if corr == 1.0 and rate is None:
        return labels.copy()
    if corr == -1.0 and rate is None:
        return 1 - labels
    pi = float(np.clip(pi, 1e-9, 1 - 1e-9))
    p11 = q * pi + corr * math.sqrt(q * (1 - q) * pi * (1 - pi))
    p_pos = p11 / pi
    p_neg = (q - p11) / (1 - pi)
    if not (-1e-12 <= p_pos <= 1 + 1e-12 and -1e-12 <= p_neg <= 1 + 1e-12):
        raise ValueError(f"correlation {corr} is infeasible for rate {q:.3f} and prevalence {pi:.3f}")
    p = np.where(labels == 1, np.clip(p_pos, 0, 1), np.clip(p_neg, 0, 1))
    return (rng.random(len(labels)) < p).astype(int)


def _sample_instruments(rng, labels: np.ndarray, pool: Sequence[int], corr: float) -> np.ndarray:
    """Uniform over ``pool``; with probability ``corr`` restricted to the label's half of it.

    Malignant samples prefer the first half of the pool, benign the second.
    """
    pool = np.asarray(pool, dtype=int)
    half = max(1, len(pool) // 2)
    first, second = pool[:half], pool[half:] if len(pool) > half else pool[:half]
    out = rng.choice(pool, size=len(labels))
    tied = rng.random(len(labels)) < corr
    pref_mal = rng.choice(first, size=len(labels))
    pref_ben = rng.choice(second, size=len(labels))
    out = np.where(tied & (labels == 1), pref_mal, out)
    out = np.where(tied & (labels == 0), pref_ben, out)
    return out


def _sample_lesion(rng: np.random.Generator, label: int, size: int, sep: float) -> Lesion:
    s = size / 32.0
    if label:
        irr = rng.uniform(0.10, 0.40) * sep
        mottle = rng.uniform(0.15, 0.55) * sep
        darkness = rng.uniform(0.55, 0.95)
    else:
        irr = rng.uniform(0.0, 0.18)
        mottle = rng.uniform(0.0, 0.25)
        darkness = rng.uniform(0.75, 1.1)
    n_lobes = int(rng.integers(2, 5))
    ks = rng.choice(np.arange(2, 7), size=n_lobes, replace=False)
    amps = rng.dirichlet(np.ones(n_lobes))
    lobes = tuple((int(k), float(a), float(rng.uniform(0, 2 * math.pi))) for k, a in zip(ks, amps))
    radius = rng.uniform(5.0, 8.0) * s
    c = (size - 1) / 2
    center = (c + rng.uniform(-2.5, 2.5) * s, c + rng.uniform(-2.5, 2.5) * s)
    skin = tuple(float(v) for v in np.array([0.88, 0.68, 0.56]) + rng.uniform(-0.05, 0.05, 3))
    arcs = []
    for _ in range(int(rng.integers(1, 4))):
        start = rng.uniform(0, 2 * math.pi)
        span = rng.uniform(math.pi / 3, 5 * math.pi / 6)
        arcs.append((float(radius * (1 + irr) + rng.uniform(1.5, 4.0) * s), float(start),
                     float(span), float(rng.uniform(1.1, 1.8) * s)))
    ruler = (int(rng.integers(0, 4)), int(round(rng.integers(3, 6) * s)),
             int(max(2, round(2 * s))), int(rng.integers(0, 8)))
    return Lesion(int(label), center, float(radius), float(irr), lobes, float(mottle), float(darkness),
                  skin, int(rng.integers(0, 2**31)), tuple(arcs), ruler, float(rng.uniform(0.7, 1.3)))


@dataclass
class LatentSet:
    lesions: list[Lesion]
    labels: np.ndarray
    marking: np.ndarray
    ruler: np.ndarray
    instrument: np.ndarray


def sample_latents(recipe: DatasetRecipe) -> LatentSet:
    """Draw labels, artefact flags, instruments and lesion latents (no rendering)."""
    ss = np.random.SeedSequence([recipe.seed, 7001])
    r_lab, r_art, r_inst, r_les = (np.random.default_rng(s) for s in ss.spawn(4))
    labels = (r_lab.random(recipe.n_samples) < recipe.malignant_fraction).astype(int)
    marking = _coupled_bernoulli(r_art, labels, recipe.marking_rate, recipe.marking_corr)
    ruler = _coupled_bernoulli(r_art, labels, recipe.ruler_rate, recipe.ruler_corr)
    instrument = _sample_instruments(r_inst, labels, recipe.instrument_pool, recipe.instrument_corr)
    lesions = [_sample_lesion(r_les, y, recipe.image_size, recipe.class_separation) for y in labels]
    return LatentSet(lesions, labels, marking, ruler, instrument)


# --------------------------------------------------------------------------
# rendering


def _grid(size: int):
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def render(lesion: Lesion, size: int, marking: bool = False, ruler: bool = False,
           instrument: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render a lesion to a [3,H,W] image in [0,1].

    Returns ``(image, marking_mask, lesion_mask)``; masks are boolean [H,W].
    """
    yy, xx = _grid(size)
    rng = np.random.default_rng(lesion.texture_seed)
    skin = np.asarray(lesion.skin)
    img = skin[:, None, None] * (1.0 + 0.04 * rng.standard_normal((1, size, size)))

    dy, dx = yy - lesion.center[0], xx - lesion.center[1]
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    wobble = sum(a * np.cos(k * theta + ph) for k, a, ph in lesion.lobes)
    boundary = lesion.radius * (1.0 + lesion.irregularity * wobble)
    alpha = 1.0 / (1.0 + np.exp(-(boundary - rho) / 0.6))

    f1, f2 = rng.uniform(0.5, 1.4, 2) * (32.0 / size)
    p1, p2 = rng.uniform(0, 2 * math.pi, 2)
    tex = 0.5 + 0.25 * np.cos(f1 * xx + p1) * np.cos(f2 * yy + p2) + 0.25 * rng.random((size, size))
    brown = np.array([0.50, 0.30, 0.19]) * lesion.darkness
    lesion_rgb = brown[:, None, None] * (1.0 - lesion.mottle * tex)[None]
    img = img * (1 - alpha) + lesion_rgb * alpha

    # instrument: border tint ramping in from the edges, then blur; artefacts are stamped afterwards
    c = (size - 1) / 2
    r_norm = np.maximum(np.abs(yy - c), np.abs(xx - c)) / c
    vign = np.clip((r_norm - 0.55) / 0.45, 0, 1) ** 1.5
    w = vign * INSTRUMENT_STRENGTH[instrument] * lesion.tint_jitter
    w = np.clip(w, 0, 1)
    img = img * (1 - w) + INSTRUMENT_TINTS[instrument][:, None, None] * w
    sigma = INSTRUMENT_BLUR[instrument] * size / 32.0
    if sigma > 0:
        img = gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")

    mark_mask = np.zeros((size, size), dtype=bool)
    if marking:
        cover = np.zeros((size, size))
        for ra, start, span, thick in lesion.marking_arcs:
            rel = np.mod(theta - start, 2 * math.pi)
            on_arc = rel <= span
            d = np.abs(rho - ra)
            cover = np.maximum(cover, np.where(on_arc, np.clip(thick / 2 + 0.5 - d, 0, 1), 0.0))
        img = img * (1 - cover) + VIOLET[:, None, None] * cover
        mark_mask = cover > 0.5

    if ruler:
        edge, width, half, offset = lesion.ruler
        along = xx if edge in (0, 1) else yy
        depth = {0: yy, 1: size - 1 - yy, 2: xx, 3: size - 1 - xx}[edge]
        band = depth < width
        stripe = ((along.astype(int) + offset) // half) % 2 == 0
        shade = np.where(stripe, RULER_DARK, RULER_LIGHT)
        img = np.where(band[None], shade[None], img)
    return np.clip(img, 0.0, 1.0), mark_mask, alpha > 0.5


def render_latents(latents: LatentSet, size: int, marking=None, ruler=None, instrument=None) -> Dataset:
    """Render every lesion; ``marking``/``ruler``/``instrument`` override the sampled values.

    An override may be a scalar applied to every sample or an array.
    """
    n = len(latents.lesions)

    def resolve(override, default):
        if override is None:
            return np.asarray(default, dtype=int).copy()
        return np.broadcast_to(np.asarray(override, dtype=int), (n,)).copy()

    mk = resolve(marking, latents.marking)
    rl = resolve(ruler, latents.ruler)
    inst = resolve(instrument, latents.instrument)
    images = np.empty((n, 3, size, size))
    mmask = np.zeros((n, size, size), dtype=bool)
    lmask = np.zeros((n, size, size), dtype=bool)
    for i, les in enumerate(latents.lesions):
        images[i], mmask[i], lmask[i] = render(les, size, bool(mk[i]), bool(rl[i]), int(inst[i]))
    dims = [INSTRUMENT_DIMS[k] for k in inst]
    return Dataset(images, latents.labels.copy(), mk, rl, inst, mmask, lmask, dims)


def generate(recipe: DatasetRecipe) -> Dataset:
    """Sample and render a dataset; applies the recipe's dm/dr skews if nonzero."""
    data = render_latents(sample_latents(recipe), recipe.image_size)
    if recipe.dm:
        data = skew(data, "marking", recipe.dm, seed=(recipe.seed, 1))
    if recipe.dr:
        data = skew(data, "ruler", recipe.dr, seed=(recipe.seed, 2))
    return data


# --------------------------------------------------------------------------
# skewing and labelling


def augment(images: np.ndarray, rng: np.random.Generator, masks: Sequence[np.ndarray] = ()):
    """Random horizontal/vertical flips and brightness jitter of +-0.05 per image."""
    out = images.copy()
    masks = [m.copy() for m in masks]
    for i in range(len(out)):
        hflip, vflip = rng.random(2) < 0.5
        shift = rng.uniform(-0.05, 0.05)
        img = out[i]
        if hflip:
            img = img[:, :, ::-1]
        if vflip:
            img = img[:, ::-1, :]
        out[i] = np.clip(img + shift, 0.0, 1.0)
        for m in masks:
            mi = m[i]
            if hflip:
                mi = mi[:, ::-1]
            if vflip:
                mi = mi[::-1, :]
            m[i] = mi
    return out, masks


def skew(dataset: Dataset, artefact: str, d: int, seed=0) -> Dataset:
    """Drop benign samples carrying ``artefact`` and add ``d`` augmented copies of each
    malignant one carrying it (so each appears ``d + 1`` times)."""
    if artefact not in ARTEFACTS:
        raise ValueError(f"artefact must be one of {ARTEFACTS}, got {artefact!r}")
    if d < 0:
        raise ValueError("d must be nonnegative")
    flag = dataset.bias(artefact)
    keep = ~((flag == 1) & (dataset.labels == 0))
    base = dataset.subset(np.flatnonzero(keep))
    src = np.flatnonzero((base.bias(artefact) == 1) & (base.labels == 1))
    if d == 0 or len(src) == 0:
        return base
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rep = np.repeat(src, d)
    copies = base.subset(rep)
    masks = [m for m in (copies.marking_mask, copies.lesion_mask) if m is not None]
    copies.images, new_masks = augment(copies.images, rng, masks)
    if copies.marking_mask is not None:
        copies.marking_mask = new_masks.pop(0)
    if copies.lesion_mask is not None:
        copies.lesion_mask = new_masks.pop(0)
    return Dataset.concat([base, copies])


def instrument_proxy_labels(image_dims: Sequence[tuple[int, int]], min_class_count: int = 1):
    """Classes from distinct (H, W) pairs, most frequent first; rare sizes are dropped.

    Returns ``(labels, kept_mask)``; dropped samples get label -1.
    """
    dims = [tuple(int(v) for v in d) for d in image_dims]
    counts: dict[tuple[int, int], int] = {}
    for d in dims:
        counts[d] = counts.get(d, 0) + 1
    ranked = sorted(counts, key=lambda d: (-counts[d], d))
    classes = {d: i for i, d in enumerate(k for k in ranked if counts[k] >= min_class_count)}
    labels = np.array([classes.get(d, -1) for d in dims], dtype=int)
    return labels, labels >= 0


def colour_threshold_label(image: np.ndarray, artefact: str) -> int:
    """1 if the artefact is detected in a [3,H,W] image by colour rules, else 0."""
    r, g, b = image[0], image[1], image[2]
    if artefact == "marking":
        rule = VIOLET_RULE
        violet = (b > rule["blue_min"]) & (r > rule["red_min"]) & (g < rule["green_max"])
        return int(violet.mean() > rule["min_fraction"])
    if artefact == "ruler":
        gray = image.mean(axis=0)
        k, win, thr = RULER_RULE["depth"], RULER_RULE["window"], RULER_RULE["threshold"]
        strips = [gray[:k].mean(0), gray[-k:].mean(0), gray[:, :k].mean(1), gray[:, -k:].mean(1)]
        for prof in strips:
            steps = np.abs(np.diff(prof))
            if len(steps) < win:
                score = steps.mean() if len(steps) else 0.0
            else:
                score = np.convolve(steps, np.ones(win) / win, mode="valid").max()
            if score > thr:
                return 1
        return 0
    raise ValueError(f"artefact must be one of {ARTEFACTS}, got {artefact!r}")


def class_weights(labels, n_classes: int) -> ClassWeights:
    """Inverse class-frequency weights (absent classes get 1 with a warning)."""
    return ClassWeights.from_labels(labels, n_classes)
