import numpy as np
import pytest
from scipy.ndimage import binary_dilation
from hypothesis import given, settings, strategies as st

from unlearn_lab.synthdata import (
    INSTRUMENT_TINTS, Dataset, DatasetRecipe, class_weights, colour_threshold_label, generate,
    instrument_proxy_labels, render_latents, sample_latents, skew,
)


def _small(**kw):
    base = dict(n_samples=60, image_size=24, seed=5)
    base.update(kw)
    return DatasetRecipe(**base)


def test_images_in_unit_range_and_shapes():
    d = generate(_small(marking_rate=0.3, ruler_rate=0.3))
    assert d.images.shape == (60, 3, 24, 24)
    assert d.images.min() >= 0 and d.images.max() <= 1
    assert set(np.unique(d.labels)) <= {0, 1}
    assert d.instrument.min() >= 0 and d.instrument.max() < 8


def test_generate_is_deterministic():
    a, b = generate(_small(marking_rate=0.3)), generate(_small(marking_rate=0.3))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.marking, b.marking)
    c = generate(_small(marking_rate=0.3, seed=6))
    assert not np.array_equal(a.images, c.images)


def test_zero_correlation_is_empirically_uncorrelated():
    lat = sample_latents(DatasetRecipe(n_samples=10_000, marking_rate=0.3, ruler_rate=0.5, seed=1))
    for flag in (lat.marking, lat.ruler):
        assert abs(np.corrcoef(flag, lat.labels)[0, 1]) < 0.05


@pytest.mark.parametrize("rho", [0.2, 0.5])
def test_positive_correlation_is_realised(rho):
    lat = sample_latents(DatasetRecipe(n_samples=10_000, marking_rate=0.3, marking_corr=rho, seed=2))
    assert np.corrcoef(lat.marking, lat.labels)[0, 1] == pytest.approx(rho, abs=0.05)


def test_full_correlation_couples_exactly():
    lat = sample_latents(DatasetRecipe(n_samples=2000, marking_rate=None, marking_corr=1.0, seed=3))
    np.testing.assert_array_equal(lat.marking, lat.labels)


def test_infeasible_correlation_raises():
    with pytest.raises(ValueError):
        sample_latents(DatasetRecipe(n_samples=100, marking_rate=0.05, marking_corr=0.9))


def test_class_balance_matches_recipe():
    lat = sample_latents(DatasetRecipe(n_samples=10_000, malignant_fraction=0.3, seed=4))
    assert lat.labels.mean() == pytest.approx(0.3, abs=0.02)


def test_recipe_validation():
    with pytest.raises(ValueError):
        DatasetRecipe(n_instruments=1)
    with pytest.raises(ValueError):
        DatasetRecipe(marking_corr=1.5)
    with pytest.raises(ValueError):
        DatasetRecipe(dm=-1)


def test_paired_rendering_differs_only_by_artefact():
    lat = sample_latents(_small(marking_rate=0.0, ruler_rate=0.0))
    plain = render_latents(lat, 24, marking=0, ruler=0)
    marked = render_latents(lat, 24, marking=1)
    diff = np.any(plain.images != marked.images, axis=1)
    near_stroke = np.stack([binary_dilation(m, iterations=2) for m in marked.marking_mask])
    assert not np.any(diff & ~near_stroke)
    np.testing.assert_array_equal(plain.labels, marked.labels)


# -- skew -------------------------------------------------------------------------


def _flagged(n_mal_marked, n_ben_marked, n_other, size=16):
    rng = np.random.default_rng(0)
    n = n_mal_marked + n_ben_marked + n_other
    labels = np.r_[np.ones(n_mal_marked), np.zeros(n_ben_marked), rng.integers(0, 2, n_other)].astype(int)
    marking = np.r_[np.ones(n_mal_marked + n_ben_marked), np.zeros(n_other)].astype(int)
    images = rng.random((n, 3, size, size))
    return Dataset(images, labels, marking, np.zeros(n, int), np.zeros(n, int))


def test_skew_duplication_count():
    out = skew(_flagged(5, 7, 30), "marking", 20)
    assert np.sum((out.marking == 1) & (out.labels == 1)) == 105
    assert np.sum((out.marking == 1) & (out.labels == 0)) == 0


def test_skew_zero_only_removes():
    d = _flagged(5, 7, 30)
    out = skew(d, "marking", 0)
    assert len(out) == len(d) - 7


def test_skew_removal_idempotent():
    once = skew(_flagged(3, 4, 20), "marking", 0)
    twice = skew(once, "marking", 0)
    np.testing.assert_array_equal(once.images, twice.images)


def test_skew_copies_preserve_artefact_pixels():
    d = generate(_small(n_samples=200, marking_rate=0.3, ruler_rate=0.0))
    out = skew(d, "marking", 3, seed=1)
    extra = out.subset(np.arange(len(out))[-3:])
    assert all(colour_threshold_label(im, "marking") == 1 for im in extra.images)
    # brightness jitter is small
    assert np.all(np.abs(extra.images.mean(axis=(1, 2, 3))) <= 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 10))
def test_skew_counts_property(n_mm, n_bm, d):
    out = skew(_flagged(n_mm, n_bm, 5, size=4), "marking", d)
    assert np.sum((out.marking == 1) & (out.labels == 1)) == n_mm * (d + 1)
    assert not np.any((out.marking == 1) & (out.labels == 0))


def test_skew_rejects_instrument_axis():
    with pytest.raises(ValueError):
        skew(_flagged(1, 1, 1), "instrument", 2)


# -- labelling -----------------------------------------------------------------------


def test_proxy_labels_frequency_order_and_drop():
    dims = [(640, 480)] * 100 + [(1024, 768)] * 50 + [(99, 99)]
    labels, kept = instrument_proxy_labels(dims, min_class_count=5)
    assert set(labels[kept]) == {0, 1}
    assert labels[0] == 0 and labels[100] == 1 and labels[-1] == -1
    assert kept.sum() == 150


def test_proxy_labels_single_class():
    labels, kept = instrument_proxy_labels([(10, 10)] * 4)
    assert np.all(labels == 0) and kept.all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from([(1, 1), (2, 2), (3, 3), (4, 4)]), min_size=1, max_size=60),
       st.integers(1, 10), st.integers(0, 5))
def test_proxy_labels_monotone_in_threshold(dims, k, extra):
    _, lo = instrument_proxy_labels(dims, k)
    _, hi = instrument_proxy_labels(dims, k + extra)
    assert np.all(hi <= lo)


@pytest.mark.parametrize("artefact", ["marking", "ruler"])
def test_gray_image_has_no_artefact(artefact):
    assert colour_threshold_label(np.full((3, 32, 32), 0.5), artefact) == 0


@pytest.mark.parametrize("artefact", ["marking", "ruler"])
def test_detector_agrees_with_generator(artefact):
    rec = DatasetRecipe(n_samples=1000, image_size=32, marking_rate=0.5 if artefact == "marking" else 0.0,
                        ruler_rate=0.5 if artefact == "ruler" else 0.0, seed=21)
    d = generate(rec)
    pred = np.array([colour_threshold_label(im, artefact) for im in d.images])
    assert np.mean(pred == d.bias(artefact)) >= 0.95


def test_class_weight_examples():
    np.testing.assert_allclose(class_weights([0] * 50 + [1] * 50, 2).weights, [0.02, 0.02])
    np.testing.assert_allclose(class_weights([0] * 90 + [1] * 10, 2).weights, [1 / 90, 1 / 10])
    with pytest.warns(UserWarning):
        cw = class_weights([0] * 100, 2)
    np.testing.assert_allclose(cw.weights, [0.01, 1.0])


def test_instrument_is_linearly_decodable_from_pixels():
    from sklearn.linear_model import LogisticRegression

    lat = sample_latents(DatasetRecipe(n_samples=480, image_size=16, seed=8))
    d = render_latents(lat, 16)
    x = d.images.reshape(len(d), -1)
    clf = LogisticRegression(max_iter=3000).fit(x[:360], d.instrument[:360])
    assert clf.score(x[360:], d.instrument[360:]) >= 0.9
    assert len(INSTRUMENT_TINTS) == 8


def test_dataset_round_trip(tmp_path):
    d = generate(_small(marking_rate=0.3))
    d.save(tmp_path / "ds", split="test")
    back = Dataset.load(tmp_path / "ds")
    np.testing.assert_array_equal(back.images, d.images)
    np.testing.assert_array_equal(back.ruler, d.ruler)
    header = (tmp_path / "ds" / "manifest.csv").read_text().splitlines()[0]
    assert header == "id,label,marking,ruler,instrument,split"
