import hashlib

import numpy as np
import pytest
from PIL import Image

from protoseg.bank import Kind
from protoseg.explain import Evidence, Explanation, explain_pixel, render_explanation
from protoseg.features import EnsembleSpace
from protoseg.inference import SegmentOptions, segment
from protoseg.support import SupportCache
from protoseg.synthetic import render_scene


@pytest.fixture(scope="module")
def segmented(scene, small_build):
    img, labels = render_scene(scene, (128, 192), np.random.default_rng(4), max_shapes=3)
    ex = small_build["extractor"]
    opts = SegmentOptions(extractors={ex.space_id: ex}, prefilter=False)
    result = segment(img, small_build["bank"], small_build["vocab"], EnsembleSpace((ex.space_id,)), opts)
    return img, labels, result


def restricted(small_build, img, kind):
    ex = small_build["extractor"]
    opts = SegmentOptions(extractors={ex.space_id: ex}, prefilter=False, kinds=(kind,))
    return segment(img, small_build["bank"], small_build["vocab"], EnsembleSpace((ex.space_id,)), opts)


def pixels_of(result, label_value, limit=12):
    ys, xs = np.nonzero(result.labels == label_value)
    pick = np.linspace(0, len(ys) - 1, min(limit, len(ys))).astype(int)
    return list(zip(xs[pick], ys[pick]))


def test_explained_category_matches_label(segmented, small_build):
    img, _, result = segmented
    for y in range(0, img.shape[0], 16):
        for x in range(0, img.shape[1], 16):
            expl = explain_pixel(result, (x, y), small_build["bank"], small_build["cache"])
            assert expl.class_id == result.label_id(y, x)
            assert expl.ref.class_id == expl.class_id
            for ev in expl.evidence:
                assert ev.category_id == expl.ref.category_id
                assert ev.mask.any()


def test_instance_evidence_is_its_support_mask(segmented, small_build):
    img, _, _ = segmented
    result = restricted(small_build, img, Kind.INSTANCE)
    x, y = pixels_of(result, 1 + small_build["vocab"].ids.index("disk"))[0]
    expl = explain_pixel(result, (x, y), small_build["bank"], small_build["cache"])
    assert expl.ref.kind is Kind.INSTANCE
    assert len(expl.evidence) == 1
    ev = expl.evidence[0]
    assert ev.sample_index == expl.ref.index
    cache = SupportCache(small_build["cache"])
    assert np.array_equal(ev.mask, cache.load_mask("disk", ev.sample_index, "fg"))


def test_class_evidence_counts_members(segmented, small_build):
    img, _, _ = segmented
    result = restricted(small_build, img, Kind.CLASS)
    x, y = pixels_of(result, 1 + small_build["vocab"].ids.index("disk"))[0]
    expl = explain_pixel(result, (x, y), small_build["bank"], small_build["cache"])
    assert expl.ref.kind is Kind.CLASS
    assert len(expl.evidence) == len(expl.prototype.members) == 8


def test_part_evidence_disjoint_across_clusters(segmented, small_build):
    img, _, _ = segmented
    result = restricted(small_build, img, Kind.PART)
    bank, cache = small_build["bank"], small_build["cache"]
    by_cluster = {}
    for label_value in np.unique(result.labels):
        for x, y in pixels_of(result, label_value, limit=40):
            expl = explain_pixel(result, (x, y), bank, cache)
            assert expl.ref.kind is Kind.PART
            key = (expl.ref.category_id, expl.ref.polarity, expl.ref.index)
            by_cluster.setdefault(key, {ev.sample_index: ev.mask for ev in expl.evidence})
    groups = {}
    for (cat, pol, k), masks in by_cluster.items():
        groups.setdefault((cat, pol), []).append(masks)
    assert any(len(v) > 1 for v in groups.values())
    for clusters in groups.values():
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                for n in set(clusters[i]) & set(clusters[j]):
                    assert not (clusters[i][n] & clusters[j][n]).any()


def test_part_evidence_on_two_cluster_category(tmp_path):
    # a category whose foreground is always two flat colour regions
    from protoseg.features import IdentityExtractor
    from protoseg.inference import SegmentOptions
    from protoseg.pipeline import build_bank
    from protoseg.vocabulary import make_vocabulary

    class TwoTone:
        can_attribute = True

        def config_dict(self):
            return {"two": "tone"}

        def generate(self, prompt, seed):
            img = np.zeros((8, 8, 3), np.uint8)
            img[2:6, 2:4] = (200, 0, 0)
            img[2:6, 4:6] = (0, 200, 0)
            a = np.zeros((8, 8))
            a[2:6, 2:6] = 1.0
            return img, [a]

    ex = IdentityExtractor(3)
    vocab = make_vocabulary(["toy"])
    bank = build_bank(vocab, TwoTone(), None, [ex], n=2, k=2, cache_dir=tmp_path)
    img, _ = TwoTone().generate("", 0)
    opts = SegmentOptions(extractors={ex.space_id: ex}, prefilter=False, kinds=(Kind.PART,))
    result = segment(img.astype(np.float32), bank, vocab, EnsembleSpace((ex.space_id,)), opts)
    left = explain_pixel(result, (2, 3), bank, tmp_path)
    right = explain_pixel(result, (5, 3), bank, tmp_path)
    want_left = np.zeros((8, 8), bool)
    want_left[2:6, 2:4] = True
    assert left.ref.index != right.ref.index
    assert all(np.array_equal(ev.mask, want_left) for ev in left.evidence)
    assert all(np.array_equal(ev.mask, np.roll(want_left, 2, axis=1)) for ev in right.evidence)
    assert len(left.evidence) == 2


def test_missing_cache_degrades(segmented, small_build, tmp_path):
    _, _, result = segmented
    expl = explain_pixel(result, (0, 0), small_build["bank"], None)
    assert expl.degraded and not expl.evidence and expl.ref is not None
    expl = explain_pixel(result, (0, 0), small_build["bank"], tmp_path / "empty")
    assert expl.degraded


def _fake(n_evidence):
    rng = np.random.default_rng(n_evidence)
    img = rng.integers(0, 256, (40, 50, 3), dtype=np.uint8)
    ev = [Evidence("disk", i, rng.random((20, 20)) < 0.5, rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
          for i in range(n_evidence)]
    return Explanation((10, 10), "disk", None, None, ev, query_image=img, query_region=rng.random((40, 50)) < 0.3)


@pytest.mark.parametrize("n, size", [(1, (128, 384)), (4, (256, 384)), (9, (256, 384))])
def test_montage_layout(tmp_path, n, size):
    out = render_explanation(_fake(n), tmp_path / "m.png")
    with Image.open(out) as im:
        assert (im.height, im.width) == size
    assert out.with_suffix(".json").exists()


def test_render_is_byte_stable(tmp_path):
    expl = _fake(3)
    a = render_explanation(expl, tmp_path / "a.png").read_bytes()
    b = render_explanation(expl, tmp_path / "b.png").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()


def test_render_needs_evidence_or_degraded(tmp_path):
    with pytest.raises(ValueError):
        render_explanation(Explanation((0, 0), "disk", None, None), tmp_path / "x.png")
    render_explanation(Explanation((0, 0), "disk", None, None, degraded=True), tmp_path / "x.png")
