"""ROC/AUC, threshold metrics, test-time augmentation, saliency and probes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import weighted_cross_entropy


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores for {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min(initial=1) == y.max(initial=0) or len(y) == 0:
        raise ValueError("both classes must be present (metric undefined for a single class)")
    return s, y


@dataclass
class RocCurve:
    """ROC points ordered by decreasing threshold; ``thresholds[0]`` is +inf."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def roc_auc(scores, labels) -> RocCurve:
    """Trapezoidal AUC over every distinct threshold (positive iff score >= t).

    Tied scores move along a diagonal segment, so the area equals the
    Mann-Whitney statistic with ties counted as one half.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    # integer doubled area, divided once at the end
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(np.r_[np.inf, s[last]], fp / n_neg, tp / n_pos, auc)


def auc_pairwise(scores, labels) -> float:
    """Brute-force P(score_pos > score_neg) + 0.5 P(tie) over all pairs."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    twice = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return twice / (2 * len(pos) * len(neg))


def sensitivity_specificity(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    tp = np.sum(pred & (y == 1))
    tn = np.sum(~pred & (y == 0))
    return float(tp / np.sum(y == 1)), float(tn / np.sum(y == 0))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if len(s) != len(y) or len(s) == 0:
        raise ValueError("scores and labels must be nonempty and equally long")
    return float(np.mean((s >= threshold).astype(int) == y))


# --------------------------------------------------------------------------
# model-based metrics


def _flip(images: np.ndarray, hflip: np.ndarray, vflip: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[hflip] = out[hflip][..., ::-1]
    out[vflip] = out[vflip][..., ::-1, :]
    return out


def tta_predict_batch(bundle, images: np.ndarray, n_aug: int = 8, seed=0,
                      batch_size: int = 256) -> np.ndarray:
    """Mean malignant probability over ``n_aug`` random flip draws per image.

    Each draw flips horizontally and vertically with probability 1/2 each,
    independently; duplicate draws are allowed.
    """
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    flips = rng.random((len(images), n_aug, 2)) < 0.5
    scores = np.empty((len(images), n_aug))
    for k in range(n_aug):
        aug = _flip(images, flips[:, k, 0], flips[:, k, 1])
        scores[:, k] = bundle.predict_proba(aug, batch_size)
    return scores.mean(axis=1)


def tta_predict(bundle, image: np.ndarray, n_aug: int = 8, seed=0) -> float:
    return float(tta_predict_batch(bundle, np.asarray(image)[None], n_aug, seed)[0])


def saliency_map(bundle, image: np.ndarray, label: int) -> np.ndarray:
    """|d CE / d pixel| reduced by max over channels, scaled so the maximum is 1."""
    x = Tensor(np.asarray(image, dtype=np.float64)[None], requires_grad=True)
    logits = bundle.forward(x).primary_logits
    loss = weighted_cross_entropy(logits, np.array([int(label)]))
    ad.backward(loss)
    grad = np.zeros_like(x.data) if x.grad is None else x.grad
    ad.zero_grad(bundle.parameters())
    sal = np.abs(grad[0]).max(axis=0)
    top = sal.max()
    return sal / top if top > 0 else sal


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of a [H,W] array in [0,1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w) / maxval


@dataclass
class SeedAggregate:
    per_seed: list[float]
    mean: float
    std: float


def aggregate_seeds(values) -> SeedAggregate:
    """Mean and population standard deviation over seeds."""
    v = [float(x) for x in values]
    if not v:
        raise ValueError("need at least one seed value")
    arr = np.array(v)
    return SeedAggregate(v, float(arr.mean()), float(arr.std()))


# --------------------------------------------------------------------------
# linear probes on frozen features


@dataclass
class ProbeResult:
    accuracy: float
    cross_entropy: float
    chance: float
    n_classes: int


def probe_bias(train_features: np.ndarray, train_bias, test_features: np.ndarray, test_bias,
               n_classes: int | None = None, standardize: bool = False) -> ProbeResult:
    """Fit a fresh multinomial logistic probe on frozen features and score it.

    By default the probe sees the raw features, as an auxiliary head does.
    ``chance`` is the majority-class rate of the test bias labels.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    yb = np.asarray(train_bias, dtype=int)
    yt = np.asarray(test_bias, dtype=int)
    n = n_classes or int(max(yb.max(), yt.max()) + 1)
    scaler = StandardScaler(with_mean=standardize, with_std=standardize).fit(train_features)
    clf = LogisticRegression(max_iter=5000)
    clf.fit(scaler.transform(train_features), yb)
    ft = scaler.transform(test_features)
    prob = np.full((len(yt), n), 1e-12)
    prob[:, clf.classes_] = np.maximum(clf.predict_proba(ft), 1e-12)
    ce = float(-np.mean(np.log(prob[np.arange(len(yt)), yt])))
    acc = float(np.mean(clf.classes_[clf.predict_proba(ft).argmax(1)] == yt))
    chance = float(np.bincount(yt, minlength=n).max() / len(yt))
    return ProbeResult(acc, ce, chance, n)
