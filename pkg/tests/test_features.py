import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from protoseg.features import (
    DEFAULT_ENSEMBLE,
    REFERENCE_CONFIGS,
    ColorHashExtractor,
    EmptyMask,
    EnsembleSpace,
    ExtractorError,
    FeatureMap,
    IdentityExtractor,
    cosine_sim,
    ensemble_score,
    extract,
    load_feature_map,
    make_extractor,
    masked_mean,
    save_feature_map,
)


def fmap(rows, grid):
    arr = np.asarray(rows, dtype=np.float32).reshape(grid + (-1,))
    return FeatureMap(arr, "test", grid)


def test_constant_red_image_gives_constant_rows():
    img = np.zeros((8, 8, 3), np.uint8)
    img[...] = (255, 0, 0)
    fm = extract(img, ColorHashExtractor())
    rows = fm.rows()
    assert np.array_equal(rows, np.repeat(rows[:1], len(rows), axis=0))
    assert fm.dim == 27 and fm.source_size == (8, 8)


def test_extract_is_deterministic():
    img = np.random.default_rng(0).integers(0, 256, (16, 12, 3), dtype=np.uint8)
    ex = ColorHashExtractor()
    assert np.array_equal(extract(img, ex).features, extract(img, ex).features)


def test_declared_dim_is_enforced():
    class Liar:
        space_id, dim, deterministic = "liar", 5, True

        def __call__(self, image):
            return np.zeros((2, 2, 4))

    with pytest.raises(ExtractorError):
        extract(np.zeros((2, 2, 3), np.uint8), Liar())


def test_sd_reference_emits_64_grid():
    assert REFERENCE_CONFIGS["sd"].output_grid == (64, 64)
    assert REFERENCE_CONFIGS["sd"].extra["timestep"] == 200
    assert REFERENCE_CONFIGS["sd"].extra["prompt"] == ""


def test_default_ensemble():
    assert set(DEFAULT_ENSEMBLE.members) == {"sd", "dino", "clip"}


def test_reference_extractors_need_adapters():
    with pytest.raises(ExtractorError):
        make_extractor("dino")


def test_space_ids_depend_on_config():
    assert make_extractor("colorhash").space_id != make_extractor("colorhash-p8").space_id
    assert make_extractor("colorhash").space_id == ColorHashExtractor().space_id


def test_masked_mean_all_ones_is_global_mean():
    f = np.random.default_rng(2).random((3, 4, 2)).astype(np.float32)
    vec, m = masked_mean(FeatureMap(f, "t", (3, 4)), np.ones((3, 4), bool))
    assert m == 12
    assert np.allclose(vec, f.reshape(-1, 2).astype(np.float64).mean(axis=0))


def test_masked_mean_single_pixel():
    f = np.random.default_rng(3).random((3, 3, 2)).astype(np.float32)
    mask = np.zeros((3, 3), bool)
    mask[1, 2] = True
    vec, m = masked_mean(FeatureMap(f, "t", (3, 3)), mask)
    assert m == 1 and np.array_equal(vec, f[1, 2].astype(np.float64))


def test_masked_mean_hand_example():
    vec, m = masked_mean(fmap([[1, 0], [0, 1], [1, 1]], (1, 3)), np.array([[1, 1, 0]], bool))
    assert m == 2 and np.allclose(vec, [0.5, 0.5])


def test_masked_mean_empty_after_resize():
    fm = fmap(np.ones((4, 2)), (2, 2))
    mask = np.zeros((8, 8), bool)
    mask[0, 0] = True  # vanishes at 2x2 resolution
    with pytest.raises(EmptyMask):
        masked_mean(fm, mask)


def test_cosine_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert cosine_sim(v, v) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2))
    assert cosine_sim([0, 0], [1, 0]) == 0.0


vec3 = arrays(np.float64, 3, elements=st.floats(-100, 100))


@given(vec3, vec3)
def test_cosine_is_symmetric_and_bounded(x, y):
    c = cosine_sim(x, y)
    assert c == pytest.approx(cosine_sim(y, x))
    assert -1 - 1e-12 <= c <= 1 + 1e-12


def test_singleton_ensemble_is_plain_cosine():
    x, y = np.array([1.0, 2.0]), np.array([2.0, 0.5])
    assert ensemble_score({"a": x}, {"a": y}, EnsembleSpace(("a",))) == pytest.approx(cosine_sim(x, y))


def test_two_space_mean():
    pix = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 0.0])}
    proto = {"a": np.array([2.0, 0.0]), "b": np.array([0.0, 3.0])}
    assert ensemble_score(pix, proto, EnsembleSpace(("a", "b"))) == pytest.approx(0.5)


def test_missing_ensemble_space():
    with pytest.raises(KeyError):
        ensemble_score({"a": np.ones(2)}, {"a": np.ones(2)}, EnsembleSpace(("a", "b")))


def test_ensemble_validation():
    with pytest.raises(ValueError):
        EnsembleSpace(("a", "a"))
    with pytest.raises(ValueError):
        EnsembleSpace(("a", "b"), (1.0, -1.0))


def test_feature_map_file_round_trip(tmp_path):
    fm = extract(np.random.default_rng(4).integers(0, 256, (9, 7, 3), dtype=np.uint8), ColorHashExtractor())
    save_feature_map(fm, tmp_path / "x.feat")
    again = load_feature_map(tmp_path / "x.feat")
    assert np.array_equal(again.features, fm.features)
    assert again.space_id == fm.space_id and again.source_size == fm.source_size


def test_identity_extractor_passes_features_through():
    f = np.random.default_rng(5).random((3, 3, 4)).astype(np.float32)
    assert np.array_equal(extract(f, IdentityExtractor(4)).features, f)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_masked_mean_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(1, 9, size=2))
    d = int(rng.integers(1, 5))
    f = rng.normal(size=(h, w, d)).astype(np.float32)
    mask = rng.random((h, w)) < 0.5
    mask[int(rng.integers(h)), int(rng.integers(w))] = True
    vec, m = masked_mean(FeatureMap(f, "t", (h, w)), mask)
    want, want_m = oracles.masked_mean(f, mask)
    assert m == want_m
    assert np.allclose(vec, want, rtol=1e-6, atol=1e-12)
