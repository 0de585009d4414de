import io
import json

import numpy as np
import pytest

from unlearn_lab import autodiff as ad
from unlearn_lab.autodiff import Tensor
from unlearn_lab.models import ExtractorConfig, HeadSpec, ModelBundle
from unlearn_lab.nn import ClassWeights, SgdMomentum, confusion_loss, weighted_cross_entropy
from unlearn_lab.synthdata import Dataset
from unlearn_lab.unlearn import (
    HeadAssignment, LossWeights, TrainConfig, fit_confusion_heads, make_optimisers, train,
    train_step, train_step_baseline, train_step_clgr, train_step_lntl, train_step_tabe,
    update_representation,
)

CFG = ExtractorConfig(image_size=10, channels=(3,), feature_dim=6)


def _data(n=16, seed=0, n_inst=3):
    rng = np.random.default_rng(seed)
    labels = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    marking = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    images = rng.random((n, 3, 10, 10))
    images[labels == 1, 0] += 0.3
    inst = rng.integers(0, n_inst, n)
    return Dataset(np.clip(images, 0, 1), labels, marking, 1 - marking, inst)


def _bundle(methods=(), axes=None, seed=0):
    axes = axes or ["marking"] * len(methods)
    return ModelBundle.build(CFG, [HeadSpec(m, a, 2) for m, a in zip(methods, axes)], seed=seed)


def _weights(d, bundle):
    return LossWeights(ClassWeights.from_labels(d.labels, 2),
                       {h.axis: ClassWeights.from_labels(d.bias(h.axis), 2) for h in bundle.aux_heads})


def _params(bundle, which):
    if which == "repr":
        return [p.data.copy() for p in bundle.representation_parameters()]
    return [p.data.copy() for h in bundle.aux_heads for p in h.layer.parameters()]


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_head_assignment_parse():
    assert HeadAssignment.parse("tabe:instrument") == HeadAssignment("TABE", "instrument")
    assert str(HeadAssignment.parse("LNTL:marking")) == "LNTL:marking"
    for bad in ("TABE", "XYZ:marking", "LNTL:"):
        with pytest.raises(ValueError):
            HeadAssignment.parse(bad)


def test_config_validation_and_boost_rule():
    assert TrainConfig(heads=("TABE:marking",)).effective_boost == 10
    assert TrainConfig(heads=("TABE:marking", "LNTL:ruler")).effective_boost == 1
    assert TrainConfig(ablate_gradient_reversal=True, mu=0.7).reversal_scale == 0
    for kw in ({"lr": 0}, {"momentum": 1.0}, {"alpha": -1}, {"epochs": -1}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_boost_multiplier_applied_to_confusion_heads_only():
    b = _bundle(("TABE", "LNTL"), ("marking", "ruler"))
    make_optimisers(b, TrainConfig(heads=("TABE:marking", "LNTL:ruler"), tabe_head_lr_boost=10))
    assert [h.layer.learning_rate_multiplier for h in b.aux_heads] == [1, 1]
    b1 = _bundle(("CLGR",))
    make_optimisers(b1, TrainConfig(heads=("CLGR:marking",), tabe_head_lr_boost=10))
    assert b1.aux_heads[0].layer.learning_rate_multiplier == 10


def test_boost_scales_first_step_exactly():
    d = _data()
    deltas = []
    for boost in (1.0, 10.0):
        b = _bundle(("TABE",))
        cfg = TrainConfig(heads=("TABE:marking",), tabe_head_lr_boost=boost, lr=0.01)
        opts = make_optimisers(b, cfg)
        before = _params(b, "aux")
        fit_confusion_heads(b, Tensor(d.images), {"marking": d.marking}, _weights(d, b), opts.aux, cfg)
        deltas.append([a - p for a, p in zip(_params(b, "aux"), before)])
    for d1, d10 in zip(*deltas):
        np.testing.assert_allclose(d10, 10 * d1, rtol=1e-12, atol=1e-18)


# -- baseline ------------------------------------------------------------------


def test_baseline_loss_decreases_on_separable_batch():
    d = _data(24)
    d.images[:] = 0.2
    d.images[d.labels == 1] = 0.8
    b = _bundle()
    opt = SgdMomentum.for_layers([*b.extractor.layers(), b.primary_head], 0.05, 0.0)
    w = ClassWeights.uniform(2)
    losses = [train_step_baseline(b, d.images, d.labels, w, opt) for _ in range(50)]
    assert all(b_ < a for a, b_ in zip(losses, losses[1:]))


def test_baseline_null_step():
    d = _data()
    b = _bundle()
    before = _params(b, "repr")
    opt = SgdMomentum(b.parameters(), 0.0, 0.0)
    train_step_baseline(b, d.images, d.labels, ClassWeights.uniform(2), opt)
    assert _same(before, _params(b, "repr"))


def test_baseline_rejects_aux_heads():
    b = _bundle(("TABE",))
    with pytest.raises(ValueError):
        train_step_baseline(b, _data().images, _data().labels, ClassWeights.uniform(2),
                            SgdMomentum(b.parameters(), 0.1))


# -- parameter partition and limits ------------------------------------------------


@pytest.mark.parametrize("method", ["TABE", "CLGR"])
def test_step_partition(method):
    d = _data()
    b = _bundle((method,))
    cfg = TrainConfig(heads=(f"{method}:marking",), lr=0.01, alpha=0.5, mu=0.5)
    opts = make_optimisers(b, cfg)
    w = _weights(d, b)
    x = Tensor(d.images)
    repr0, aux0 = _params(b, "repr"), _params(b, "aux")
    fit_confusion_heads(b, x, {"marking": d.marking}, w, opts.aux, cfg)
    assert _same(repr0, _params(b, "repr"))
    assert not _same(aux0, _params(b, "aux"))
    aux1 = _params(b, "aux")
    update_representation(b, x, d.labels, {"marking": d.marking}, w, opts.repr, opts.aux, cfg)
    assert _same(aux1, _params(b, "aux"))
    assert not _same(repr0, _params(b, "repr"))


def test_clgr_mu_zero_matches_tabe_bitwise():
    d = _data(20)
    finals = []
    for method in ("TABE", "CLGR"):
        b = _bundle((method,), seed=3)
        cfg = TrainConfig(heads=(f"{method}:marking",), lr=0.01, mu=0.0, alpha=0.4, epochs=2, batch_size=8, seed=5)
        train(b, d, cfg)
        finals.append([p.data for p in b.parameters()])
    assert _same(*finals)


@pytest.mark.parametrize("heads", [("LNTL:marking",), ("TABE:marking",), ("CLGR:marking",),
                                   ("TABE:marking", "LNTL:ruler")])
def test_zero_scales_reduce_to_baseline(heads):
    d = _data(20)
    kw = dict(lr=0.01, epochs=2, batch_size=8, seed=1, alpha=0.0, lam=0.0, mu=0.0, tabe_head_lr_boost=1)
    base = _bundle(seed=2)
    train(base, d, TrainConfig(**kw))
    axes = [h.split(":")[1] for h in heads]
    b = ModelBundle.build(CFG, [HeadSpec(h.split(":")[0], a, 2) for h, a in zip(heads, axes)], seed=2)
    train(b, d, TrainConfig(heads=heads, **kw))
    assert _same(_params(base, "repr"), _params(b, "repr"))
    # the heads themselves still learn
    fresh = ModelBundle.build(CFG, b.head_specs, seed=2)
    assert not _same(_params(fresh, "aux"), _params(b, "aux"))


def test_tabe_alpha_zero_head_learns_bias():
    d = _data(64, seed=4)
    d.images[d.marking == 1, 2] = 1.0  # a strong linear cue
    b = _bundle(("TABE",))
    train(b, d, TrainConfig(heads=("TABE:marking",), lr=0.01, alpha=0.0, epochs=15, batch_size=16))
    logits = b.forward(d.images).aux_logits[0].data
    assert np.mean(logits.argmax(1) == d.marking) > 0.6


def test_uniform_head_gives_zero_confusion_gradient():
    d = _data()
    b = _bundle(("TABE",))
    for p in b.aux_heads[0].layer.parameters():
        p.data[:] = 0.0
    feats = b.extractor(Tensor(d.images))
    conf = confusion_loss(b.aux_heads[0].layer(feats, frozen=True))
    assert conf.item() == pytest.approx(np.log(2), abs=1e-12)
    ad.backward(conf)
    assert all(p.grad is None or np.abs(p.grad).max() < 1e-12 for p in b.extractor.parameters())


def test_lntl_reversed_term_gradient():
    """The aux-CE gradient reaching the extractor is -mu times the unreversed one."""
    d = _data()
    b = _bundle(("LNTL",))
    x = Tensor(d.images)
    grads = {}
    for mu in (None, 0.7):
        ad.zero_grad(b.parameters())
        feats = b.extractor(x)
        inp = feats if mu is None else ad.grad_reverse(feats, mu)
        ad.backward(weighted_cross_entropy(b.aux_heads[0].layer(inp), d.marking))
        grads[mu] = b.extractor.fc.weight.grad.copy()
    np.testing.assert_allclose(grads[0.7], -0.7 * grads[None], rtol=1e-12, atol=1e-16)


def test_lntl_step_returns_three_losses_and_single_optimiser():
    d = _data()
    b = _bundle(("LNTL",))
    cfg = TrainConfig(heads=("LNTL:marking",), lr=0.01, lam=0.1)
    opt = SgdMomentum(b.parameters(), 0.01, 0.9)
    aux0 = _params(b, "aux")
    main, aux, reg = train_step_lntl(b, d.images, d.labels, {"marking": d.marking}, _weights(d, b), opt, cfg)
    assert main > 0 and aux > 0 and -0.1 * np.log(2) - 1e-12 <= reg <= 0
    assert not _same(aux0, _params(b, "aux"))


def test_step_wrappers_check_methods():
    d = _data()
    b = _bundle(("TABE",))
    opt = SgdMomentum(b.parameters(), 0.01)
    cfg = TrainConfig(heads=("TABE:marking",))
    with pytest.raises(ValueError):
        train_step_lntl(b, d.images, d.labels, {"marking": d.marking}, _weights(d, b), opt, cfg)
    with pytest.raises(ValueError):
        train_step_clgr(b, d.images, d.labels, {"marking": d.marking}, _weights(d, b), opt, opt, cfg)
    p, a, c = train_step_tabe(b, d.images, d.labels, {"marking": d.marking}, _weights(d, b), opt, opt, cfg)
    assert c >= np.log(2) - 1e-12


def test_missing_bias_labels_raise():
    d = _data()
    b = _bundle(("TABE",))
    opts = make_optimisers(b, TrainConfig(heads=("TABE:marking",)))
    with pytest.raises(ValueError):
        train_step(b, d.images, d.labels, {}, _weights(d, b), opts.repr, opts.aux, TrainConfig())


# -- full runs ---------------------------------------------------------------------


def test_epochs_zero_returns_initialisation():
    b = _bundle(("TABE",))
    init = _params(b, "repr") + _params(b, "aux")
    res = train(b, _data(), TrainConfig(heads=("TABE:marking",), epochs=0))
    assert res.log == []
    assert _same(init, _params(b, "repr") + _params(b, "aux"))


def test_train_is_deterministic():
    d = _data(20)
    cfg = TrainConfig(heads=("CLGR:marking",), lr=0.01, epochs=2, batch_size=6, seed=9, mu=0.3, alpha=0.5)
    runs = []
    for _ in range(2):
        b = _bundle(("CLGR",), seed=1)
        res = train(b, d, cfg)
        runs.append((_params(b, "repr") + _params(b, "aux"), res.log))
    assert _same(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_mixed_two_head_run_is_finite_and_logged():
    d = _data(24)
    b = ModelBundle.build(CFG, [HeadSpec("TABE", "instrument", 3), HeadSpec("LNTL", "ruler", 2)], seed=0)
    res = train(b, d, TrainConfig(heads=("TABE:instrument", "LNTL:ruler"), lr=0.01, epochs=3, batch_size=8),
                validate=lambda bundle: 0.5)
    assert len(res.log) == 3
    for rec in res.log:
        assert {"primary", "aux0", "conf0", "aux1", "reg1", "val_auc"} <= set(rec)
        assert all(np.isfinite(v) for v in rec.values())
    buf = io.StringIO()
    res.write_log(buf)
    assert json.loads(buf.getvalue().splitlines()[0])["epoch"] == 1


def test_train_validation_errors():
    with pytest.raises(ValueError):
        train(_bundle(), _data().subset(np.array([], dtype=int)), TrainConfig())
    d = _data()
    d.instrument[:] = 5
    b = ModelBundle.build(CFG, [HeadSpec("TABE", "instrument", 3)])
    with pytest.raises(ValueError):
        train(b, d, TrainConfig(heads=("TABE:instrument",)))
