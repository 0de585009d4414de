"""Layers, initialisation, SGD with momentum and the debiasing losses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Probabilities are floored here before any logarithm.
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def init_parameters(shape: Sequence[int], fan_in: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Fan-in scaled uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero bias.

    ``shape`` is the weight shape; the bias has length ``shape[0]``. ``seed``
    may be an int, a sequence of ints (mixed into a SeedSequence) or a
    Generator.
    """
    bound = 1.0 / math.sqrt(fan_in)
    w = _rng(seed).uniform(-bound, bound, size=tuple(shape))
    return w, np.zeros(shape[0])


class LinearLayer:
    """y = x @ W.T + b with W of shape [out, in]."""

    def __init__(self, n_in: int, n_out: int, seed=0, learning_rate_multiplier: float = 1.0):
        if learning_rate_multiplier <= 0:
            raise ValueError("learning_rate_multiplier must be positive")
        w, b = init_parameters((n_out, n_in), n_in, seed)
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(b, requires_grad=True, name="bias")
        self.learning_rate_multiplier = learning_rate_multiplier

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        """Apply the layer. ``frozen`` treats W and b as constants for this call."""
        w, b = self.weight, self.bias
        if frozen:
            w, b = ad.detach(w), ad.detach(b)
        return ad.add(ad.matmul(x, ad.transpose(w)), b)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, k: int = 3, seed=0):
        w, b = init_parameters((c_out, c_in, k, k), c_in * k * k, seed)
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(b, requires_grad=True, name="bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


class SgdMomentum:
    """v <- momentum*v + grad; p <- p - lr*multiplier*v.

    A parameter with no gradient is treated as having a zero gradient (its
    velocity still decays and moves it), so only pass the parameters an
    optimiser is meant to own.
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float, momentum: float = 0.0,
                 multipliers: Sequence[float] | None = None):
        self.params = list(params)
        if learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.multipliers = list(multipliers) if multipliers is not None else [1.0] * len(self.params)
        if len(self.multipliers) != len(self.params):
            raise ValueError("one multiplier per parameter")
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def for_layers(cls, layers, learning_rate: float, momentum: float) -> "SgdMomentum":
        params, mults = [], []
        for layer in layers:
            m = getattr(layer, "learning_rate_multiplier", 1.0)
            for p in layer.parameters():
                params.append(p)
                mults.append(m)
        return cls(params, learning_rate, momentum, mults)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else 0.0
            v = self.momentum * self.velocity[i] + g
            self.velocity[i] = v
            p.data = p.data - (self.learning_rate * self.multipliers[i]) * v


@dataclass
class ClassWeights:
    weights: np.ndarray
    missing: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0)):
            raise ValueError("class weights must be finite and positive")

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls(np.ones(n_classes))

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "ClassWeights":
        """Inverse class frequency; absent classes get weight 1 and are listed in ``missing``."""
        if n_classes < 2:
            raise ValueError("need at least two classes")
        counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes)[:n_classes]
        missing = [int(i) for i in np.flatnonzero(counts == 0)]
        if missing:
            warnings.warn(f"classes {missing} absent from labels; weight set to 1", stacklevel=2)
        return cls(1.0 / np.maximum(counts, 1), missing)


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def weighted_cross_entropy(logits: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    """Weighted mean of per-sample cross-entropy, normalised by the applied weights."""
    labels = np.asarray(labels, dtype=int)
    B, C = logits.shape
    if len(labels) != B or B < 1:
        raise ValueError(f"{len(labels)} labels for a batch of {B}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    w = np.ones(C) if weights is None else weights.weights
    if len(w) != C:
        raise ValueError(f"{len(w)} class weights for {C} classes")
    per_sample = w[labels]
    coef = _onehot(labels, C) * (per_sample / per_sample.sum())[:, None]
    return ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits), coef)))


def _clamped_log_probs(logits: Tensor) -> Tensor:
    return ad.clamp_min(ad.log_softmax(logits), LOG_FLOOR)


def confusion_loss(aux_logits: Tensor) -> Tensor:
    """Cross-entropy between the head's softmax and the uniform distribution (batch mean)."""
    B, n = aux_logits.shape
    if n < 2:
        raise ValueError("confusion loss needs at least two classes")
    return ad.scale(ad.tsum(_clamped_log_probs(aux_logits)), -1.0 / (n * B))


def neg_conditional_entropy(aux_logits: Tensor, lam: float) -> Tensor:
    """lam * mean_b sum_n Q_n log Q_n with Q = softmax(aux_logits)."""
    B, n = aux_logits.shape
    if n < 2:
        raise ValueError("negative conditional entropy needs at least two classes")
    q = ad.softmax(aux_logits)
    return ad.scale(ad.tsum(ad.mul(q, _clamped_log_probs(aux_logits))), lam / B)
