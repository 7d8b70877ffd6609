import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.spatial.distance import pdist

from uda_lab.datasets import (
    GLYPHS,
    _glyph,
    glyph_images,
    load_csv,
    make_dataset,
    rotate_about_centroid,
    save_csv,
    shifted_blobs,
    two_moons,
)


@pytest.mark.parametrize(
    "make",
    [lambda s: two_moons(50, seed=s), lambda s: shifted_blobs(3, 60, seed=s), lambda s: glyph_images(20, seed=s)],
)
def test_same_seed_is_bit_identical(make):
    a, b = make(4), make(4)
    for name in ("x_s", "y_s", "x_t", "y_t_eval"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.digest() == b.digest()
    assert make(5).digest() != a.digest()


def test_two_moons_defaults_and_shapes():
    pair = two_moons()
    assert pair.x_s.shape == pair.x_t.shape == (300, 2)
    assert pair.metadata["rotation_deg"] == 45.0
    assert pair.metadata["noise"] == 0.1
    assert pair.modality == "points2d"
    np.testing.assert_array_equal(pair.y_s.sum(axis=0), [150, 150])


def test_rotation_zero_gives_same_distribution():
    pair = two_moons(3000, rotation_deg=0.0, seed=1)
    for k in range(2):
        assert stats.ks_2samp(pair.x_s[:, k], pair.x_t[:, k]).pvalue > 1e-3


def test_rotation_full_turn_equals_no_rotation():
    a = two_moons(100, rotation_deg=0.0, seed=2)
    b = two_moons(100, rotation_deg=360.0, seed=2)
    np.testing.assert_allclose(b.x_t, a.x_t, atol=1e-12)
    np.testing.assert_array_equal(b.y_t_eval, a.y_t_eval)


def test_rotation_moves_the_target():
    # a 45 degree turn flips the sign of the moons' coordinate covariance
    pair = two_moons(3000, seed=1)
    assert np.cov(pair.x_s.T)[0, 1] < -0.1 < 0.1 < np.cov(pair.x_t.T)[0, 1]


@given(arrays(np.float64, (6, 2), elements=st.floats(-10, 10, allow_nan=False)), st.floats(-720, 720))
def test_property_rotation_is_rigid(x, deg):
    y = rotate_about_centroid(x, deg)
    np.testing.assert_allclose(pdist(y), pdist(x), atol=1e-9)
    np.testing.assert_allclose(y.mean(axis=0), x.mean(axis=0), atol=1e-9)


def test_two_moons_validation():
    with pytest.raises(ValueError):
        two_moons(1)
    with pytest.raises(ValueError):
        two_moons(10, noise=-0.1)


def test_blobs_zero_shift_and_label_marginals():
    pair = shifted_blobs(3, 3000, seed=0)
    np.testing.assert_array_equal(pair.y_s.sum(axis=0), pair.y_t_eval.sum(axis=0))
    for k in range(2):
        assert stats.ks_2samp(pair.x_s[:, k], pair.x_t[:, k]).pvalue > 1e-3
    shifted = shifted_blobs(3, 3000, shift_vector=[2.0, -1.0], seed=0)
    np.testing.assert_allclose(shifted.x_t.mean(axis=0) - shifted.x_s.mean(axis=0), [2.0, -1.0], atol=0.1)


def test_blobs_large_shift_sends_a_frozen_source_classifier_to_chance():
    from uda_lab.trainer import RunConfig, train

    cfg = RunConfig(
        dataset={"name": "shifted_blobs", "C": 3, "n": 300, "shift_vector": [60.0, 60.0]},
        method="source_only",
        epochs=20,
    )
    bundle, history = train(cfg)
    assert history[-1].source_acc > 0.95
    assert history[-1].target_acc == pytest.approx(1 / 3, abs=0.1)


def test_blobs_validation():
    with pytest.raises(ValueError):
        shifted_blobs(1)
    with pytest.raises(ValueError):
        shifted_blobs(3, d=2, shift_vector=[1.0, 2.0, 3.0])


def test_glyph_pixels_in_unit_range_and_shapes():
    for kind in ("brightness_bias", "additive_texture"):
        pair = glyph_images(40, shift_kind=kind, seed=1)
        assert pair.x_s.shape == (40, 256)
        for x in (pair.x_s, pair.x_t):
            assert x.min() >= 0.0 and x.max() <= 1.0
        assert pair.modality == "image"


def test_glyph_zero_brightness_bias_leaves_distribution_unchanged():
    pair = glyph_images(800, shift_kind="brightness_bias", shift_strength=0.0, seed=2)
    assert abs(pair.x_s.mean() - pair.x_t.mean()) < 0.01
    shifted = glyph_images(800, shift_kind="brightness_bias", shift_strength=0.3, seed=2)
    assert shifted.x_t.mean() - shifted.x_s.mean() > 0.2


def test_glyph_class_areas_are_ordered():
    rng = np.random.default_rng(0)
    areas = {k: np.mean([(_glyph(k, 16, rng) > 0).sum() for _ in range(1000)]) for k in GLYPHS}
    assert areas["bar"] < areas["cross"] < areas["square"] < areas["disc"]


def test_glyph_validation():
    with pytest.raises(ValueError):
        glyph_images(10, size=7)
    with pytest.raises(ValueError):
        glyph_images(10, shift_kind="fog")


def test_training_view_hides_target_labels():
    view = two_moons(20).training_view()
    assert {f.name for f in dataclasses.fields(view)} == {"x_s", "y_s", "x_t", "modality"}
    assert not hasattr(view, "y_t_eval")


def test_pairs_are_immutable():
    pair = two_moons(20)
    with pytest.raises(ValueError):
        pair.x_s[0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        pair.x_s = np.zeros((20, 2))


def test_split_is_seeded_80_20():
    pair = two_moons(50)
    train, held = pair.split(seed=3)
    assert len(train.x_s) == 40 and len(held.x_s) == 10
    again, _ = pair.split(seed=3)
    np.testing.assert_array_equal(again.x_t, train.x_t)
    rows = {tuple(r) for r in np.concatenate([train.x_s, held.x_s])}
    assert rows == {tuple(r) for r in pair.x_s}


@pytest.mark.parametrize("pair", [two_moons(15, seed=1), shifted_blobs(3, 12, d=4, seed=1), glyph_images(6, size=8, seed=1)])
def test_csv_round_trip_is_exact(tmp_path, pair):
    path = save_csv(pair, tmp_path / "data.csv")
    back = load_csv(path)
    for name in ("x_s", "y_s", "x_t", "y_t_eval"):
        np.testing.assert_array_equal(getattr(back, name), getattr(pair, name))
    assert back.modality == pair.modality
    header = path.read_text().splitlines()[0].split(",")
    assert header[-2:] == ["y", "domain"] and header[0] == "x_0"


def test_make_dataset_dispatch():
    pair = make_dataset({"name": "two_moons", "n_per_domain": 10}, seed=3)
    assert pair.digest() == two_moons(10, seed=3).digest()
    with pytest.raises(ValueError):
        make_dataset({"name": "office31"})
