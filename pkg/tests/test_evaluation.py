import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from protoseg.evaluation import (
    ConfusionAccumulator,
    EmptyEvaluation,
    MissingCategories,
    VOCDataset,
    load_label_png,
    miou,
    run_benchmark,
    save_label_png,
)
from protoseg.features import EnsembleSpace
from protoseg.inference import SegmentOptions
from protoseg.synthetic import write_synthetic_dataset
from protoseg.vocabulary import make_vocabulary


def test_perfect_prediction_scores_one():
    gt = np.random.default_rng(0).integers(0, 4, (10, 12))
    gt[0, 0:4] = [0, 1, 2, 3]
    rep = miou([gt], [gt], 4)
    assert rep.miou == 1.0
    assert set(rep.per_class_iou.values()) == {1.0}


def test_hand_worked_counts():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 1]])
    rep = miou([pred], [gt], 2)
    assert rep.per_class_iou == {"0": 0.5, "1": pytest.approx(2 / 3)}
    assert rep.miou == pytest.approx(7 / 12)
    assert rep.pixel_counts["1"] == {"tp": 2, "fp": 1, "fn": 0}


def test_swapping_without_ignored_pixels_only_trades_fp_for_fn():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 1]])
    a, b = miou([pred], [gt], 2), miou([gt], [pred], 2)
    for name in ("0", "1"):
        assert a.pixel_counts[name]["fp"] == b.pixel_counts[name]["fn"]
    assert a.per_class_iou == b.per_class_iou


def test_argument_order_matters():
    # only ground-truth pixels carrying the ignore index are dropped
    gt = np.array([[0, 2]])
    pred = np.array([[0, 1]])
    assert miou([pred], [gt], 3, ignore_index=2).miou == 1.0
    assert miou([gt], [pred], 3, ignore_index=2).miou == pytest.approx(1 / 3)


def test_ignore_label_is_dropped():
    gt = np.array([[0, 255, 1]])
    pred = np.array([[0, 0, 1]])
    rep = miou([pred], [gt], 2)
    assert rep.miou == 1.0 and rep.pixels == 2


def test_all_ignored_is_empty():
    gt = np.full((3, 3), 255)
    with pytest.raises(EmptyEvaluation) as info:
        miou([np.zeros((3, 3), int)], [gt], 2)
    assert info.value.code == "EMPTY_EVAL"
    assert "EMPTY_EVAL" in str(info.value)


def test_absent_class_is_excluded_from_mean():
    gt = np.array([[0, 0, 1]])
    rep = miou([gt], [gt], 3)
    assert "2" not in rep.per_class_iou
    assert rep.miou == 1.0


def test_split_level_not_per_image_average():
    # image 1 is tiny and wrong, image 2 big and right
    g1, p1 = np.array([[1]]), np.array([[0]])
    g2 = np.ones((1, 9), int)
    rep = miou([p1, g2], [g1, g2], 2)
    assert rep.per_class_iou["1"] == pytest.approx(9 / 10)


def test_rejects_mismatch_and_out_of_range():
    with pytest.raises(ValueError):
        miou([np.zeros((2, 2), int)], [np.zeros((2, 3), int)], 2)
    with pytest.raises(ValueError):
        miou([np.full((2, 2), 5)], [np.zeros((2, 2), int)], 2)


@st.composite
def label_pairs(draw):
    c = draw(st.integers(1, 4))
    n = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    preds, gts = [], []
    for _ in range(n):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
        preds.append(rng.integers(0, c, shape))
        g = rng.integers(0, c, shape)
        g[rng.random(shape) < 0.15] = 255
        gts.append(g)
    return c, preds, gts


@settings(max_examples=100, deadline=None)
@given(label_pairs())
def test_matches_brute_force(data):
    c, preds, gts = data
    want = oracles.iou_per_class(preds, gts, c, ignore=255)
    if not want:
        with pytest.raises(EmptyEvaluation):
            miou(preds, gts, c)
        return
    rep = miou(preds, gts, c)
    assert rep.per_class_iou == pytest.approx({str(k): v for k, v in want.items()})
    assert rep.miou == pytest.approx(np.mean(list(want.values())))


@settings(max_examples=50, deadline=None)
@given(label_pairs(), st.randoms(use_true_random=False))
def test_order_and_merge_invariance(data, rnd):
    c, preds, gts = data
    pairs = list(zip(preds, gts))
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = ConfusionAccumulator(c)
    for p, g in pairs:
        a.add(p, g)
    halves = [ConfusionAccumulator(c), ConfusionAccumulator(c)]
    for i, (p, g) in enumerate(shuffled):
        halves[i % 2].add(p, g)
    b = halves[0].merge(halves[1])
    for name in ("tp", "fp", "fn"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.pixels == b.pixels


def test_label_png_round_trip(tmp_path):
    labels = np.random.default_rng(1).integers(0, 21, (13, 17)).astype(np.uint8)
    labels[0, 0] = 255
    path = save_label_png(labels, tmp_path / "l.png")
    assert np.array_equal(load_label_png(path), labels)


def test_label_png_rejects_rgb(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(ValueError):
        load_label_png(tmp_path / "rgb.png")


def test_report_files(tmp_path):
    rep = miou([np.array([[0, 1]])], [np.array([[0, 1]])], 2, class_names=["background", "disk"])
    rep.wall_clock = 1.5
    rep.write(tmp_path)
    body = json.loads((tmp_path / "report.json").read_text())
    assert body["miou"] == 1.0 and "wall_clock" not in json.dumps(body)
    assert "disk" in (tmp_path / "report.txt").read_text()
    assert json.loads((tmp_path / "timing.json").read_text())["wall_clock_s"] == 1.5


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory, scene):
    return VOCDataset(write_synthetic_dataset(scene, tmp_path_factory.mktemp("ds"), n_images=3,
                                              sizes=((96, 128),)))


def _opts(small_build):
    ex = small_build["extractor"]
    opts = SegmentOptions(extractors={ex.space_id: ex}, prefilter=False, shortest_side=None, windows=(96,), stride=64)
    return EnsembleSpace((ex.space_id,)), opts


def test_dataset_layout(tiny_dataset, scene):
    assert len(tiny_dataset) == 3
    assert tiny_dataset.classes == ["background"] + list(scene.classes)
    image_id, img, lab = next(iter(tiny_dataset))
    assert img.exists() and lab.exists() and image_id == "synth_0000"


def test_benchmark_on_tiny_split(tiny_dataset, small_build, tmp_path):
    ens, opts = _opts(small_build)
    rep = run_benchmark(tiny_dataset, small_build["bank"], small_build["vocab"], ens, opts, out_dir=tmp_path,
                        config_digest="abc")
    assert rep.images == 3 and 0.0 <= rep.miou <= 1.0
    assert sorted(p.name for p in (tmp_path / "predictions").iterdir()) == [f"synth_000{i}.png" for i in range(3)]
    assert json.loads((tmp_path / "report.json").read_text())["config_digest"] == "abc"


def test_benchmark_missing_category(tiny_dataset, small_build):
    ens, opts = _opts(small_build)
    vocab = make_vocabulary(["disk", "hexagon"])
    with pytest.raises(MissingCategories) as info:
        run_benchmark(tiny_dataset, small_build["bank"], vocab, ens, opts)
    assert info.value.missing == ["hexagon"]


def test_benchmark_empty_split(tmp_path, small_build):
    split = tmp_path / "ImageSets" / "Segmentation"
    split.mkdir(parents=True)
    (split / "val.txt").write_text("")
    ds = VOCDataset(tmp_path, classes=["background", "disk", "square", "triangle"])
    ens, opts = _opts(small_build)
    with pytest.raises(EmptyEvaluation):
        run_benchmark(ds, small_build["bank"], small_build["vocab"], ens, opts)
