import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from protoseg.regions import (
    EmptyProposals,
    MaskSet,
    Provenance,
    fallback_masks,
    propose,
    select_fg_bg,
)
from protoseg.support import AttributionMap, SupportImage
from protoseg.synthetic import SyntheticGenerator, SyntheticProposer


def attr(values):
    return AttributionMap(np.asarray(values, dtype=np.float64), normalized=True)


def test_hand_example():
    a = attr([[0.9, 0.8, 0.1, 0.2]])
    m1 = np.array([[1, 1, 0, 0]], bool)
    m2 = np.array([[0, 0, 1, 1]], bool)
    out = select_fg_bg(MaskSet((m1, m2)), a)
    assert (out.fg_index, out.bg_index) == (0, 1)
    assert np.array_equal(out.fg, m1) and np.array_equal(out.bg, m2)


def test_constant_attribution_ties_to_first():
    masks = MaskSet((np.array([[1, 0]], bool), np.array([[0, 1]], bool)))
    out = select_fg_bg(masks, attr([[0.3, 0.3]]))
    assert out.fg_index == out.bg_index == 0
    assert out.degenerate


def test_single_mask_is_degenerate():
    out = select_fg_bg(MaskSet((np.array([[1, 1]], bool),)), attr([[0.3, 0.9]]))
    assert out.degenerate and out.fg_index == out.bg_index == 0


def test_all_empty_masks():
    with pytest.raises(EmptyProposals):
        select_fg_bg(MaskSet((np.zeros((2, 2), bool),)), attr(np.ones((2, 2))))


def test_empty_mask_set():
    with pytest.raises(EmptyProposals):
        MaskSet(())


def test_fallback_all_ones():
    out = fallback_masks(attr(np.ones((2, 2))))
    assert out.fg.all() and not out.bg.any()
    assert out.provenance is Provenance.FALLBACK


def test_fallback_hand_example():
    out = fallback_masks(attr([[0.9, 0.4, 0.1]]))
    assert out.fg.tolist() == [[True, False, False]]
    assert out.bg.tolist() == [[False, False, True]]


def test_fallback_threshold_order():
    with pytest.raises(ValueError):
        fallback_masks(attr([[0.5]]), 0.2, 0.5)


def _support(pixels=None):
    pixels = np.zeros((4, 4, 3), np.uint8) if pixels is None else pixels
    return SupportImage(pixels, "x", 0, 0)


def test_no_proposals_uses_fallback():
    out = propose(_support(), attr(np.eye(4)), lambda img: [])
    assert out.provenance is Provenance.FALLBACK


def test_failing_proposer_uses_fallback():
    def broken(img):
        raise RuntimeError("no components")

    out = propose(_support(), attr(np.eye(4)), broken)
    assert out.provenance is Provenance.FALLBACK
    assert np.array_equal(out.fg, np.eye(4) > 0.5)


def test_proposer_masks_are_resized_to_attribution():
    big = np.zeros((8, 8), bool)
    big[:4, :4] = True
    a = np.zeros((4, 4))
    a[:2, :2] = 1.0
    out = propose(_support(), attr(a), lambda img: [big, ~big])
    assert out.provenance is Provenance.PROPOSER
    assert out.fg.shape == (4, 4)
    assert np.array_equal(out.fg, a > 0)


def test_stub_proposer_finds_the_shape(scene):
    from protoseg.support import aggregate_attribution

    gen = SyntheticGenerator(scene)
    pixels, raw = gen.generate("A good photo of a triangle", 4)
    image = SupportImage(pixels, "triangle", 0, 4)
    out = propose(image, aggregate_attribution(raw, pixels.shape[:2]), SyntheticProposer(gen))
    _, mask, _ = gen.layout("triangle", 4)
    assert out.provenance is Provenance.PROPOSER
    assert np.array_equal(out.fg, mask)
    assert np.array_equal(out.bg, ~mask)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 9, size=2)
    k = int(rng.integers(1, 6))
    masks = [rng.random((h, w)) < rng.uniform(0.05, 0.9) for _ in range(k)]
    if not any(m.any() for m in masks):
        masks[0][0, 0] = True
    # multiples of 1/8 keep sums exact and make ties likely, exercising the tie rule
    a = np.round(rng.random((h, w)) * 8) / 8
    out = select_fg_bg(MaskSet(tuple(masks)), attr(a))
    assert (out.fg_index, out.bg_index) == oracles.select_fg_bg(masks, a)
