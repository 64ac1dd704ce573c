"""Tracing segmentation decisions back to support-set regions."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .bank import Kind, Polarity, Prototype, PrototypeBank
from .features import load_feature_map
from .gridio import resize_nearest, write_bytes
from .inference import NO_PROTOTYPE, PrototypeRef, SegmentationResult
from .kmeans import assign
from .support import SupportCache

logger = logging.getLogger(__name__)

PANEL = 128
COLUMNS = 3
MAX_PANELS = 6
CROP = 96
TINT = np.array([255, 0, 255], dtype=np.float64)


@dataclass
class Evidence:
    category_id: str
    sample_index: int
    mask: np.ndarray
    image: Optional[np.ndarray] = None
    mask_file: Optional[str] = None


@dataclass
class Explanation:
    pixel: tuple[int, int]
    class_id: str
    ref: Optional[PrototypeRef]
    prototype: Optional[Prototype]
    evidence: list[Evidence] = field(default_factory=list)
    degraded: bool = False
    query_image: Optional[np.ndarray] = None
    query_region: Optional[np.ndarray] = None

    def sidecar(self) -> dict:
        return {
            "pixel": list(self.pixel),
            "class_id": self.class_id,
            "prototype": None if self.ref is None else self.ref.to_dict(),
            "degraded": self.degraded,
            "evidence": [
                {"category_id": e.category_id, "sample_index": e.sample_index,
                 "pixels": int(e.mask.sum()), "mask_file": e.mask_file}
                for e in self.evidence
            ],
        }


def _find_prototype(bank: PrototypeBank, ref: PrototypeRef, space: str) -> Optional[Prototype]:
    for p in bank.prototypes(ref.category_id, space, ref.polarity, ref.kind):
        if p.key[2] == ref.index:
            return p
    return None


def part_membership(bank: PrototypeBank, cache: SupportCache, category_id: str, polarity: Polarity,
                    sample_index: int, space: str) -> Optional[np.ndarray]:
    """Cluster label per support pixel (-1 outside the polarity mask), at support resolution."""
    parts = bank.prototypes(category_id, space, polarity, Kind.PART)
    path = cache.feature_path(category_id, space, sample_index)
    if not parts or not path.exists():
        return None
    fm = load_feature_map(path)
    mask = cache.load_mask(category_id, sample_index, polarity.value)
    small = resize_nearest(mask, fm.grid)
    labels = np.full(fm.grid, -1, dtype=np.int64)
    if small.any():
        centroids = np.stack([p.vector for p in parts]).astype(np.float64)
        nearest, _ = assign(fm.features[small].astype(np.float64), centroids)
        labels[small] = np.asarray([p.cluster for p in parts])[nearest]
    return resize_nearest(labels, mask.shape)


def explain_pixel(result: SegmentationResult, pixel: tuple[int, int], bank: PrototypeBank,
                  support_cache=None, image: Optional[np.ndarray] = None) -> Explanation:
    """Support-set evidence for the prototype that decided pixel ``(x, y)``."""
    x, y = pixel
    class_id = result.label_id(y, x)
    idx = int(result.winner[y, x])
    region = None if idx == NO_PROTOTYPE else result.winner == idx
    if idx == NO_PROTOTYPE:
        return Explanation(pixel, class_id, None, None, degraded=True, query_image=image)
    ref = result.refs[idx]
    info = bank.info(ref.category_id) if ref.category_id in bank else {}
    space = info.get("part_anchor") or bank.spaces(ref.category_id)[0]
    proto = _find_prototype(bank, ref, space)
    expl = Explanation(pixel, class_id, ref, proto, query_image=image, query_region=region)
    if support_cache is None or proto is None:
        expl.degraded = True
        return expl
    cache = support_cache if isinstance(support_cache, SupportCache) else SupportCache(support_cache)
    pol = ref.polarity.value
    try:
        if ref.kind is Kind.INSTANCE:
            samples = [ref.index]
        elif ref.kind is Kind.CLASS:
            samples = list(proto.members)
        else:
            samples = cache.sample_indices(ref.category_id)
        for n in samples:
            if ref.kind is Kind.PART:
                labels = part_membership(bank, cache, ref.category_id, ref.polarity, n, space)
                if labels is None:
                    raise FileNotFoundError(f"no cached features for sample {n}")
                mask = labels == ref.index
                mask_file = None
            else:
                mask = cache.load_mask(ref.category_id, n, pol)
                mask_file = str(cache.mask_path(ref.category_id, n, pol))
            if mask.any():
                expl.evidence.append(Evidence(ref.category_id, n, mask, cache.load_image(ref.category_id, n),
                                              mask_file))
    except (OSError, ValueError) as exc:
        logger.warning("support cache incomplete for %s (%s); explanation degraded", ref.category_id, exc)
        expl.evidence.clear()
        expl.degraded = True
    return expl


def _panel(image: Optional[np.ndarray], mask: Optional[np.ndarray] = None) -> np.ndarray:
    if image is None:
        return np.full((PANEL, PANEL, 3), 128, dtype=np.uint8)
    img = np.asarray(image)[..., :3].astype(np.float64)
    if mask is not None:
        m = mask[..., None].astype(np.float64)
        img = img * (1 - 0.5 * m) + TINT * 0.5 * m
    small = Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8)).resize((PANEL, PANEL), Image.NEAREST)
    return np.asarray(small)


def _query_crop(image: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    x, y = pixel
    h, w = image.shape[:2]
    half = CROP // 2
    y0 = int(np.clip(y - half, 0, max(0, h - CROP)))
    x0 = int(np.clip(x - half, 0, max(0, w - CROP)))
    crop = np.asarray(image)[y0:y0 + CROP, x0:x0 + CROP, :3].copy()
    cy, cx = y - y0, x - x0
    crop[max(0, cy - 1):cy + 2, :] = (255, 0, 0)
    crop[:, max(0, cx - 1):cx + 2] = (255, 0, 0)
    return crop


def render_explanation(expl: Explanation, out_path) -> Path:
    """Montage of query crop, winning region and up to four support overlays (3 columns)."""
    if not expl.evidence and not expl.degraded:
        raise ValueError("explanation has no evidence and is not marked degraded")
    panels = [
        _panel(None if expl.query_image is None else _query_crop(expl.query_image, expl.pixel)),
        _panel(expl.query_image, expl.query_region),
    ]
    for ev in expl.evidence[:MAX_PANELS - 2]:
        panels.append(_panel(ev.image, ev.mask))
    rows = -(-len(panels) // COLUMNS)
    cols = min(COLUMNS, len(panels))
    canvas = np.full((rows * PANEL, cols * PANEL, 3), 255, dtype=np.uint8)
    for i, p in enumerate(panels):
        r, c = divmod(i, COLUMNS)
        canvas[r * PANEL:(r + 1) * PANEL, c * PANEL:(c + 1) * PANEL] = p
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out_path, format="PNG")
    write_bytes(out_path.with_suffix(".json"), (json.dumps(expl.sidecar(), indent=2, sort_keys=True) + "\n").encode())
    return out_path
