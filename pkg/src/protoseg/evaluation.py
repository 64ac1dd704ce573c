"""Datasets, mIoU accounting and the benchmark driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .bank import PrototypeBank
from .features import EnsembleSpace
from .gridio import write_bytes
from .inference import SegmentOptions, sliding_window_segment
from .vocabulary import DEFAULT_BACKGROUND_ID, VOC_CLASSES, Vocabulary

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


class EmptyEvaluation(ValueError):
    code = "EMPTY_EVAL"

    def __init__(self, message: str = "no labelled pixels to evaluate"):
        super().__init__(f"{self.code}: {message}")


class MissingCategories(KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"bank lacks categories: {', '.join(self.missing)}")


def voc_palette() -> list[int]:
    """Standard 256-entry VOC colour map, flattened RGB."""
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette += [r, g, b]
    return palette


def save_label_png(labels: np.ndarray, path) -> Path:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label grid must be 2-D, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label values must fit in 0..255")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(voc_palette())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")
    return path


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path}: expected an index (palette or greyscale) PNG, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


@dataclass
class ConfusionAccumulator:
    """Per-class TP/FP/FN sums; ``merge`` is associative so images can be scored in any order."""

    num_classes: int
    ignore_index: Optional[int] = IGNORE_INDEX
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    pixels: int = 0
    images: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        valid = np.ones(gt.shape, dtype=bool) if self.ignore_index is None else gt != self.ignore_index
        p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
        for name, arr in (("prediction", p), ("ground truth", g)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ValueError(f"{name} holds labels outside 0..{self.num_classes - 1}")
        conf = np.bincount(g * self.num_classes + p, minlength=self.num_classes ** 2)
        conf = conf.reshape(self.num_classes, self.num_classes)
        diag = np.diag(conf)
        self.tp += diag
        self.fp += conf.sum(axis=0) - diag
        self.fn += conf.sum(axis=1) - diag
        self.pixels += int(valid.sum())
        self.images += 1

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators over different class counts")
        return ConfusionAccumulator(self.num_classes, self.ignore_index, self.tp + other.tp, self.fp + other.fp,
                                    self.fn + other.fn, self.pixels + other.pixels, self.images + other.images)

    def report(self, class_names: Optional[Sequence[str]] = None, config_digest: str = "") -> "EvalReport":
        if self.pixels == 0:
            raise EmptyEvaluation()
        names = list(class_names) if class_names is not None else [str(i) for i in range(self.num_classes)]
        union = self.tp + self.fp + self.fn
        per_class = {}
        for i, name in enumerate(names):
            if union[i] > 0:
                per_class[name] = float(self.tp[i] / union[i])
        counts = {name: {"tp": int(self.tp[i]), "fp": int(self.fp[i]), "fn": int(self.fn[i])}
                  for i, name in enumerate(names)}
        return EvalReport(per_class, float(np.mean(list(per_class.values()))), counts, self.pixels, self.images,
                          config_digest)


@dataclass
class EvalReport:
    per_class_iou: dict[str, float]
    miou: float
    pixel_counts: dict[str, dict[str, int]]
    pixels: int
    images: int
    config_digest: str = ""
    wall_clock: Optional[float] = field(default=None, compare=False)

    def to_dict(self) -> dict:
        # wall-clock is kept out so the report stays byte-stable across runs
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "pixel_counts": self.pixel_counts,
            "pixels": self.pixels,
            "images": self.images,
            "config_digest": self.config_digest,
        }

    def to_text(self) -> str:
        width = max([len(n) for n in self.pixel_counts] + [5])
        lines = [f"{'class':<{width}}  {'IoU':>8}  {'TP':>10}  {'FP':>10}  {'FN':>10}"]
        for name, c in self.pixel_counts.items():
            iou = self.per_class_iou.get(name)
            shown = "-" if iou is None else f"{iou:.4f}"
            lines.append(f"{name:<{width}}  {shown:>8}  {c['tp']:>10}  {c['fp']:>10}  {c['fn']:>10}")
        lines += ["", f"mIoU           {self.miou:.4f}", f"images         {self.images}",
                  f"pixels         {self.pixels}", f"config digest  {self.config_digest}"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_bytes(out_dir / "report.json", (json.dumps(self.to_dict(), indent=2) + "\n").encode())
        write_bytes(out_dir / "report.txt", self.to_text().encode())
        if self.wall_clock is not None:
            write_bytes(out_dir / "timing.json", (json.dumps({"wall_clock_s": self.wall_clock}) + "\n").encode())
        return out_dir / "report.json"


def miou(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], num_classes: int,
         ignore_index: Optional[int] = IGNORE_INDEX, class_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Split-level mIoU: TP/FP/FN are summed over all images before dividing."""
    acc = ConfusionAccumulator(num_classes, ignore_index)
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth grids")
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc.report(class_names)


class VOCDataset:
    """VOC-style layout: ``JPEGImages/``, ``SegmentationClass/``, ``ImageSets/Segmentation/<split>.txt``.

    Class names come from ``classes.json`` when present, otherwise the 21 VOC classes.
    """

    def __init__(self, root, split: str = "val", classes: Optional[Sequence[str]] = None,
                 ignore_index: int = IGNORE_INDEX, name: Optional[str] = None):
        self.root = Path(root)
        self.split = split
        meta = self.root / "classes.json"
        if classes is None and meta.exists():
            data = json.loads(meta.read_text())
            classes = data["classes"]
            ignore_index = data.get("ignore_index", ignore_index)
        self.classes = list(classes) if classes is not None else list(VOC_CLASSES)
        self.ignore_index = ignore_index
        self.name = name or self.root.name
        split_file = self.root / "ImageSets" / "Segmentation" / f"{split}.txt"
        if not split_file.exists():
            raise FileNotFoundError(f"split file {split_file} not found")
        self.ids = [ln.strip() for ln in split_file.read_text().splitlines() if ln.strip()]

    def __len__(self) -> int:
        return len(self.ids)

    def image_path(self, image_id: str) -> Path:
        for ext in (".jpg", ".png", ".jpeg"):
            p = self.root / "JPEGImages" / f"{image_id}{ext}"
            if p.exists():
                return p
        raise FileNotFoundError(f"no image for {image_id!r} under {self.root / 'JPEGImages'}")

    def label_path(self, image_id: str) -> Path:
        return self.root / "SegmentationClass" / f"{image_id}.png"

    def __iter__(self) -> Iterator[tuple[str, Path, Path]]:
        for image_id in self.ids:
            yield image_id, self.image_path(image_id), self.label_path(image_id)

    def vocabulary(self, global_seed: int = 0) -> Vocabulary:
        from .vocabulary import make_vocabulary

        names = [c for c in self.classes if c != DEFAULT_BACKGROUND_ID]
        return make_vocabulary(names, global_seed)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def run_benchmark(dataset: VOCDataset, bank: PrototypeBank, vocab: Vocabulary, ensemble: EnsembleSpace,
                  options: SegmentOptions, out_dir=None, config_digest: str = "",
                  save_predictions: bool = True) -> EvalReport:
    """Segment every image with sliding windows and score against ground truth."""
    missing = [c for c in vocab.ids if c not in bank]
    if missing:
        raise MissingCategories(missing)
    if len(dataset) == 0:
        raise EmptyEvaluation("dataset has no images")
    index = {name: i for i, name in enumerate(dataset.classes)}
    start = time.perf_counter()
    acc = ConfusionAccumulator(len(dataset.classes), dataset.ignore_index)
    out_dir = Path(out_dir) if out_dir is not None else None
    for image_id, image_path, label_path in dataset:
        result = sliding_window_segment(load_image(image_path), bank, vocab, ensemble, options)
        to_dataset = np.asarray([index[c] for c in result.class_entries], dtype=np.uint8)
        pred = to_dataset[result.labels]
        acc.add(pred, load_label_png(label_path))
        if out_dir is not None and save_predictions:
            save_label_png(pred, out_dir / "predictions" / f"{image_id}.png")
    report = acc.report(dataset.classes, config_digest)
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        report.write(out_dir)
    logger.info("mIoU %.4f over %d images", report.miou, report.images)
    return report
