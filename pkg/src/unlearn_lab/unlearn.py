"""Training schedules: baseline, LNTL, TABE, CLGR and mixed multi-head runs.

One batch goes through at most two sub-steps:

* step A (only when TABE/CLGR heads exist): every confusion-style head fits
  its bias labels. TABE heads see detached features; CLGR heads see the
  features through a gradient reversal, and the reversed gradient is left
  in the representation's ``.grad`` so it joins step B's update.
* step B: primary cross-entropy, plus ``alpha * confusion`` for TABE/CLGR
  heads (head parameters frozen), plus for LNTL heads the entropy
  regulariser (head frozen) and the head's cross-entropy through a
  gradient reversal. The representation optimiser and the LNTL head
  optimisers step once.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import METHODS, ModelBundle
from .nn import (ClassWeights, SgdMomentum, confusion_loss, neg_conditional_entropy,
                 weighted_cross_entropy)

log = logging.getLogger(__name__)

CONFUSION_METHODS = ("TABE", "CLGR")


@dataclass(frozen=True)
class HeadAssignment:
    method: str
    axis: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @classmethod
    def parse(cls, text: str) -> "HeadAssignment":
        """``"TABE:instrument"`` -> HeadAssignment("TABE", "instrument")."""
        method, sep, axis = text.partition(":")
        if not sep or not axis:
            raise ValueError(f"head must look like METHOD:axis, got {text!r}")
        return cls(method.strip().upper(), axis.strip())

    def __str__(self) -> str:
        return f"{self.method}:{self.axis}"


@dataclass
class TrainConfig:
    heads: tuple[HeadAssignment, ...] = ()
    lr: float = 0.0003
    momentum: float = 0.9
    tabe_head_lr_boost: float = 10.0
    alpha: float = 0.03
    lam: float = 0.01
    mu: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    ablate_gradient_reversal: bool = False

    def __post_init__(self):
        self.heads = tuple(h if isinstance(h, HeadAssignment) else HeadAssignment.parse(h)
                           for h in self.heads)
        if self.lr <= 0 or self.tabe_head_lr_boost <= 0:
            raise ValueError("learning rate and TABE boost must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if min(self.alpha, self.lam, self.mu) < 0:
            raise ValueError("alpha, lambda and mu must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def effective_boost(self) -> float:
        # several heads together are unstable with the boost
        return 1.0 if len(self.heads) >= 2 else self.tabe_head_lr_boost

    @property
    def reversal_scale(self) -> float:
        return 0.0 if self.ablate_gradient_reversal else self.mu


@dataclass
class LossWeights:
    primary: ClassWeights
    aux: dict[str, ClassWeights] = field(default_factory=dict)


@dataclass
class Optimisers:
    repr: SgdMomentum
    aux: list[SgdMomentum]


def make_optimisers(bundle: ModelBundle, cfg: TrainConfig) -> Optimisers:
    """One optimiser for extractor+primary head, one per auxiliary head."""
    opt_repr = SgdMomentum.for_layers([*bundle.extractor.layers(), bundle.primary_head], cfg.lr, cfg.momentum)
    aux = []
    for h in bundle.aux_heads:
        boost = cfg.effective_boost if h.method in CONFUSION_METHODS else 1.0
        h.layer.learning_rate_multiplier = boost
        aux.append(SgdMomentum.for_layers([h.layer], cfg.lr, cfg.momentum))
    return Optimisers(opt_repr, aux)


def _step_unique(opts) -> None:
    seen = set()
    for o in opts:
        if id(o) not in seen:
            seen.add(id(o))
            o.step()


def _as_list(opt_aux, n: int) -> list:
    if isinstance(opt_aux, (list, tuple)):
        if len(opt_aux) != n:
            raise ValueError(f"{len(opt_aux)} aux optimisers for {n} heads")
        return list(opt_aux)
    return [opt_aux] * n


def _bias_for(bias_labels, axis: str) -> np.ndarray:
    if bias_labels is None or axis not in bias_labels:
        raise ValueError(f"no bias labels supplied for axis {axis!r}")
    return np.asarray(bias_labels[axis], dtype=int)


def _aux_weights(weights: LossWeights, axis: str) -> ClassWeights | None:
    return weights.aux.get(axis)


def fit_confusion_heads(bundle: ModelBundle, x: Tensor, bias_labels, weights: LossWeights,
                        aux_opts: list, cfg: TrainConfig) -> dict[str, float]:
    """Step A: TABE/CLGR heads minimise their bias cross-entropy.

    Only the heads' optimisers step. A CLGR head's reversed gradient stays in
    the representation's ``.grad`` for the following step B.
    """
    heads = bundle.aux_heads
    conf_idx = [i for i, h in enumerate(heads) if h.method in CONFUSION_METHODS]
    if not conf_idx:
        return {}
    losses = {}
    feats = bundle.extractor(x)
    total = None
    for i in conf_idx:
        h = heads[i]
        inp = ad.grad_reverse(feats, cfg.reversal_scale) if h.method == "CLGR" else ad.detach(feats)
        loss = weighted_cross_entropy(h.layer(inp), _bias_for(bias_labels, h.axis),
                                      _aux_weights(weights, h.axis))
        losses[f"aux{i}"] = loss.item()
        total = loss if total is None else ad.add(total, loss)
    ad.backward(total)
    _step_unique(aux_opts[i] for i in conf_idx)
    for i in conf_idx:
        ad.zero_grad(heads[i].layer.parameters())
    return losses


def update_representation(bundle: ModelBundle, x: Tensor, labels, bias_labels, weights: LossWeights,
                          opt_repr: SgdMomentum, aux_opts: list, cfg: TrainConfig) -> dict[str, float]:
    """Step B: primary loss plus each head's feature-side term; LNTL heads also fit here."""
    feats = bundle.extractor(x)
    total = weighted_cross_entropy(bundle.primary_head(feats), labels, weights.primary)
    losses = {"primary": total.item()}
    lntl_opts = []
    for i, h in enumerate(bundle.aux_heads):
        if h.method in CONFUSION_METHODS:
            conf = confusion_loss(h.layer(feats, frozen=True))
            losses[f"conf{i}"] = conf.item()
            total = ad.add(total, ad.scale(conf, cfg.alpha))
        else:
            reg = neg_conditional_entropy(h.layer(feats, frozen=True), cfg.lam)
            aux = weighted_cross_entropy(h.layer(ad.grad_reverse(feats, cfg.reversal_scale)),
                                         _bias_for(bias_labels, h.axis), _aux_weights(weights, h.axis))
            losses[f"reg{i}"] = reg.item()
            losses[f"aux{i}"] = aux.item()
            total = ad.add(ad.add(total, reg), aux)
            lntl_opts.append(aux_opts[i])
    ad.backward(total)
    _step_unique([opt_repr, *lntl_opts])
    return losses


def train_step(bundle: ModelBundle, batch, labels, bias_labels, weights: LossWeights,
               opt_repr: SgdMomentum, opt_aux, cfg: TrainConfig) -> dict[str, float]:
    """One batch of the mixed schedule; each head follows its own method.

    ``opt_aux`` is one optimiser per head or a single shared one. Returns the
    loss values keyed ``primary``, ``aux{i}``, ``conf{i}``, ``reg{i}``.
    """
    aux_opts = _as_list(opt_aux, len(bundle.aux_heads))
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    ad.zero_grad(bundle.parameters())
    losses = fit_confusion_heads(bundle, x, bias_labels, weights, aux_opts, cfg)
    losses.update(update_representation(bundle, x, labels, bias_labels, weights, opt_repr, aux_opts, cfg))
    return losses


def _require_methods(bundle: ModelBundle, allowed: Sequence[str], name: str) -> None:
    bad = [h.method for h in bundle.aux_heads if h.method not in allowed]
    if bad:
        raise ValueError(f"{name} needs heads of method {tuple(allowed)}, got {bad}")


def train_step_baseline(bundle: ModelBundle, batch, labels, weights, opt: SgdMomentum) -> float:
    if bundle.aux_heads:
        raise ValueError("baseline step needs a bundle without auxiliary heads")
    lw = weights if isinstance(weights, LossWeights) else LossWeights(weights)
    return train_step(bundle, batch, labels, None, lw, opt, [], TrainConfig())["primary"]


def _sum(losses: dict[str, float], prefix: str) -> float:
    return float(sum(v for k, v in losses.items() if k.startswith(prefix)))


def train_step_lntl(bundle, batch, labels, bias_labels, weights: LossWeights,
                    opt: SgdMomentum, cfg: TrainConfig) -> tuple[float, float, float]:
    """Single combined update; ``opt`` owns extractor, primary and LNTL head parameters."""
    _require_methods(bundle, ("LNTL",), "LNTL step")
    losses = train_step(bundle, batch, labels, bias_labels, weights, opt, opt, cfg)
    return losses["primary"], _sum(losses, "aux"), _sum(losses, "reg")


def train_step_tabe(bundle, batch, labels, bias_labels, weights: LossWeights,
                    opt_repr: SgdMomentum, opt_aux, cfg: TrainConfig) -> tuple[float, float, float]:
    _require_methods(bundle, ("TABE",), "TABE step")
    losses = train_step(bundle, batch, labels, bias_labels, weights, opt_repr, opt_aux, cfg)
    return losses["primary"], _sum(losses, "aux"), _sum(losses, "conf")


def train_step_clgr(bundle, batch, labels, bias_labels, weights: LossWeights,
                    opt_repr: SgdMomentum, opt_aux, cfg: TrainConfig) -> tuple[float, float, float]:
    _require_methods(bundle, ("CLGR",), "CLGR step")
    losses = train_step(bundle, batch, labels, bias_labels, weights, opt_repr, opt_aux, cfg)
    return losses["primary"], _sum(losses, "aux"), _sum(losses, "conf")


# --------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[dict] = field(default_factory=list)

    def write_log(self, fh) -> None:
        """Newline-delimited JSON, one record per epoch."""
        for rec in self.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def loss_weights_for(dataset, bundle: ModelBundle) -> LossWeights:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        primary = ClassWeights.from_labels(dataset.labels, 2)
        aux = {h.axis: ClassWeights.from_labels(dataset.bias(h.axis), h.n_classes) for h in bundle.aux_heads}
    for w in caught:
        log.debug("class weights: %s", w.message)
    return LossWeights(primary, aux)


def train(bundle: ModelBundle, dataset, cfg: TrainConfig,
          validate: Callable[[ModelBundle], float] | None = None) -> TrainResult:
    """Fixed-epoch training; shuffling is drawn from ``cfg.seed``.

    ``validate``, when given, maps the bundle to a validation AUC logged per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    for h in bundle.aux_heads:
        b = dataset.bias(h.axis)
        if b.min() < 0 or b.max() >= h.n_classes:
            raise ValueError(f"bias labels for {h.axis!r} exceed the head's {h.n_classes} classes")
    weights = loss_weights_for(dataset, bundle)
    opts = make_optimisers(bundle, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    axes = {h.axis for h in bundle.aux_heads}
    result = TrainResult(bundle)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bias = {a: dataset.bias(a)[idx] for a in axes}
            losses = train_step(bundle, dataset.images[idx], dataset.labels[idx], bias, weights,
                                opts.repr, opts.aux, cfg)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        rec = {"epoch": epoch + 1, **{k: v / n_batches for k, v in sorted(sums.items())}}
        if validate is not None:
            rec["val_auc"] = float(validate(bundle))
        result.log.append(rec)
        log.debug("epoch %s %s", epoch + 1, rec)
    return result
