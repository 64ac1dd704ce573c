"""Segmenting images against a prototype bank."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .bank import Kind, Polarity, PrototypeBank
from .features import EnsembleSpace, extract, unit_rows
from .gridio import resize_bilinear, resize_nearest
from .vocabulary import Vocabulary, expand_with_background

logger = logging.getLogger(__name__)

DEFAULT_ETA = 10
DEFAULT_WINDOWS = (448, 336)
DEFAULT_STRIDE = 224
SHORTEST_SIDE = 448
NO_BG_THRESHOLD = 0.75
NO_PROTOTYPE = -1


class MissingPrototypes(KeyError):
    pass


class PrefilterScorer(Protocol):
    deterministic: bool

    def __call__(self, image: np.ndarray, prompts: Sequence[str]) -> np.ndarray: ...


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def combination_prompts(texts: Sequence[str]) -> list[tuple[tuple[int, ...], str]]:
    """Every non-empty subset of ``texts`` as an ``"a and b and ..."`` prompt.

    Subsets are listed by increasing bitmask, so ties resolve to the earliest.
    """
    out = []
    for mask in range(1, 2 ** len(texts)):
        members = tuple(i for i in range(len(texts)) if mask >> i & 1)
        out.append((members, " and ".join(texts[i] for i in members)))
    return out


def prefilter(image: np.ndarray, vocab: Vocabulary, scorer: Optional[PrefilterScorer],
              eta: int = DEFAULT_ETA) -> list[str]:
    """Multi-label category pre-filtering; returns kept category ids in vocabulary order."""
    if eta < 1:
        raise ValueError("eta must be >= 1")
    ids = vocab.ids
    if scorer is None:
        return ids
    texts = [c.query_text for c in vocab.categories]
    try:
        single = np.asarray(scorer(image, texts), dtype=np.float64)
        if single.shape != (len(ids),) or not np.isfinite(single).all():
            raise ValueError(f"scorer returned {single.shape} scores for {len(ids)} prompts")
        if len(ids) == 1:
            return ids
        probs = softmax(single)
        survivors = [i for i in range(len(ids)) if probs[i] > 1.0 / len(ids)]
        if not survivors:
            survivors = [i for i in range(len(ids)) if probs[i] == probs.max()]
        if len(survivors) > eta:
            survivors = sorted(sorted(survivors, key=lambda i: -probs[i])[:eta])
        combos = combination_prompts([texts[i] for i in survivors])
        combo_scores = np.asarray(scorer(image, [p for _, p in combos]), dtype=np.float64)
        if combo_scores.shape != (len(combos),) or not np.isfinite(combo_scores).all():
            raise ValueError("scorer returned malformed combination scores")
        best = combos[int(np.argmax(combo_scores))][0]
        return [ids[survivors[i]] for i in best]
    except Exception as exc:
        logger.warning("category pre-filter disabled for this image: %s", exc)
        return ids


@dataclass(frozen=True)
class PrototypeRef:
    class_id: str
    category_id: str
    polarity: Polarity
    kind: Kind
    index: Optional[int]

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "category_id": self.category_id, "polarity": self.polarity.value,
                "kind": self.kind.value, "index": self.index}


@dataclass
class PrototypePools:
    """Flattened prototypes of every competing class, aligned across spaces."""

    class_ids: list[str]
    refs: list[PrototypeRef]
    owner: np.ndarray
    vectors: dict[str, np.ndarray]
    threshold_background: Optional[float] = None


def build_pools(bank: PrototypeBank, vocab: Vocabulary, kept: Sequence[str], spaces: Sequence[str],
                use_bg_prototypes: bool = True, fg_threshold: float = NO_BG_THRESHOLD,
                bg_pool: str = "kept", kinds: Optional[Sequence[Kind]] = None) -> PrototypePools:
    kinds = set(kinds or Kind)
    if bg_pool not in ("kept", "all"):
        raise ValueError("bg_pool must be 'kept' or 'all'")
    needed = list(kept) + ([c for c in vocab.ids if c not in kept] if use_bg_prototypes and bg_pool == "all" else [])
    missing = [c for c in needed if c not in bank or any(s not in bank.spaces(c) for s in spaces)]
    if missing:
        raise MissingPrototypes(f"bank lacks prototypes for {missing} in spaces {list(spaces)}")

    def aligned(cat, polarity):
        per_space = [{p.key: p for p in bank.prototypes(cat, s, polarity) if p.kind in kinds} for s in spaces]
        keys = [k for k in per_space[0] if all(k in d for d in per_space[1:])]
        return keys, per_space

    bg = vocab.background_id
    class_ids = [bg] + [c for c in vocab.ids if c in kept]
    refs, owner = [], []
    vectors = {s: [] for s in spaces}

    def add(class_index, cat, polarity):
        keys, per_space = aligned(cat, polarity)
        for key in keys:
            p0 = per_space[0][key]
            refs.append(PrototypeRef(class_ids[class_index], cat, polarity, p0.kind, key[2]))
            owner.append(class_index)
            for s, d in zip(spaces, per_space):
                vectors[s].append(d[key].vector)

    for ci, cat in enumerate(class_ids[1:], start=1):
        add(ci, cat, Polarity.FG)
    threshold = None
    if use_bg_prototypes:
        sources = class_ids[1:] if bg_pool == "kept" else vocab.ids
        for cat in sources:
            add(0, cat, Polarity.BG)
        if not any(o == 0 for o in owner):
            logger.warning("no background prototypes available; background class omitted")
    else:
        threshold = fg_threshold
    return PrototypePools(
        class_ids,
        refs,
        np.asarray(owner, dtype=np.int64),
        {s: (np.stack(v).astype(np.float64) if v else np.zeros((0, 1))) for s, v in vectors.items()},
        threshold,
    )


@dataclass
class SegmentOptions:
    extractors: Mapping[str, object]
    scorer: Optional[PrefilterScorer] = None
    prefilter: bool = True
    eta: int = DEFAULT_ETA
    use_bg_prototypes: bool = True
    fg_threshold: float = NO_BG_THRESHOLD
    bg_pool: str = "kept"
    kinds: Optional[tuple[Kind, ...]] = None
    windows: tuple[int, ...] = DEFAULT_WINDOWS
    stride: int = DEFAULT_STRIDE
    shortest_side: Optional[int] = SHORTEST_SIDE


@dataclass
class SegmentationResult:
    labels: np.ndarray                 # H x W indices into the background-expanded vocabulary
    scores: dict[str, np.ndarray]      # competing class id -> H x W score map
    winner: np.ndarray                 # H x W index into ``refs`` (NO_PROTOTYPE where none)
    refs: list[PrototypeRef]
    kept_classes: list[str]
    class_entries: list[str]           # label index -> class id

    def label_id(self, y: int, x: int) -> str:
        return self.class_entries[int(self.labels[y, x])]


def score_grid(feature_maps: Mapping[str, np.ndarray], pools: PrototypePools,
               weights: Mapping[str, float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-class max ensemble similarity and the argmax prototype, on the finest feature grid.

    Returns ``(scores, winners)`` of shape (n_classes, h, w).
    """
    spaces = list(weights)
    grid = max((feature_maps[s].shape[:2] for s in spaces), key=lambda g: g[0] * g[1])
    n_protos = len(pools.refs)
    total = np.zeros(grid + (n_protos,), dtype=np.float64)
    if n_protos:
        for s in spaces:
            fm = feature_maps[s]
            h, w, d = fm.shape
            sims = (unit_rows(fm.reshape(-1, d)) @ unit_rows(pools.vectors[s]).T).reshape(h, w, n_protos)
            if (h, w) != grid:
                sims = resize_bilinear(sims, grid)
            total += weights[s] * sims
    n_classes = len(pools.class_ids)
    scores = np.full((n_classes,) + grid, -np.inf)
    winners = np.full((n_classes,) + grid, NO_PROTOTYPE, dtype=np.int64)
    for ci in range(n_classes):
        idx = np.flatnonzero(pools.owner == ci)
        if len(idx) == 0:
            continue
        local = total[..., idx]
        best = local.argmax(axis=-1)
        scores[ci] = np.take_along_axis(local, best[..., None], axis=-1)[..., 0]
        winners[ci] = idx[best]
    if pools.threshold_background is not None:
        scores[0] = pools.threshold_background
    return scores, winners


def window_scores(window: np.ndarray, pools: PrototypePools, options: SegmentOptions,
                  ensemble: EnsembleSpace) -> tuple[np.ndarray, np.ndarray]:
    """Class scores (bilinear) and winners (nearest) at the window's pixel resolution."""
    weights = ensemble.normalized()
    feats = {s: extract(window, options.extractors[s]).features for s in ensemble.members}
    scores, winners = score_grid(feats, pools, weights)
    size = window.shape[:2]
    finite = np.isfinite(scores)
    up = np.moveaxis(resize_bilinear(np.moveaxis(np.where(finite, scores, 0.0), 0, -1), size), -1, 0)
    # classes with no prototypes stay at -inf
    up[~finite.all(axis=(1, 2))] = -np.inf
    win = np.moveaxis(resize_nearest(np.moveaxis(winners, 0, -1), size), -1, 0)
    return up, win


def decide(scores: np.ndarray) -> np.ndarray:
    """Argmax over classes; first maximum wins, i.e. background, then lower index."""
    return scores.argmax(axis=0)


def _class_indices(vocab: Vocabulary, pools: PrototypePools) -> tuple[np.ndarray, list[str]]:
    entries = expand_with_background(vocab).entries if not vocab.expanded else vocab.entries
    return np.asarray([entries.index(c) for c in pools.class_ids], dtype=np.int64), entries


def _finish(scores, winners, pools, vocab, kept) -> SegmentationResult:
    local = decide(scores)
    mapping, entries = _class_indices(vocab, pools)
    winner = np.take_along_axis(winners, local[None], axis=0)[0]
    return SegmentationResult(
        labels=mapping[local],
        scores={c: scores[i] for i, c in enumerate(pools.class_ids)},
        winner=winner,
        refs=pools.refs,
        kept_classes=list(kept),
        class_entries=entries,
    )


def _prepare(image, bank, vocab, ensemble, options):
    vocab = _base(vocab)
    kept = prefilter(image, vocab, options.scorer, options.eta) if options.prefilter else vocab.ids
    pools = build_pools(bank, vocab, kept, ensemble.members, options.use_bg_prototypes,
                        options.fg_threshold, options.bg_pool, options.kinds)
    return vocab, kept, pools


def _base(vocab: Vocabulary) -> Vocabulary:
    return replace(vocab, expanded=False) if vocab.expanded else vocab


def segment(image: np.ndarray, bank: PrototypeBank, vocab: Vocabulary, ensemble: EnsembleSpace,
            options: SegmentOptions) -> SegmentationResult:
    """Single-pass nearest-prototype segmentation of the whole image."""
    vocab, kept, pools = _prepare(image, bank, vocab, ensemble, options)
    scores, winners = window_scores(np.asarray(image), pools, options, ensemble)
    return _finish(scores, winners, pools, vocab, kept)


def tile_positions(length: int, window: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is clamped to the edge."""
    if length <= window:
        return [0]
    pos = list(range(0, length - window + 1, stride))
    if pos[-1] + window < length:
        pos.append(length - window)
    return pos


def resize_shortest_side(image: np.ndarray, target: int) -> np.ndarray:
    h, w = image.shape[:2]
    scale = target / min(h, w)
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    if size == (h, w):
        return image
    if image.dtype == np.uint8 and image.ndim == 3 and image.shape[2] == 3:
        return np.asarray(Image.fromarray(image).resize((size[1], size[0]), Image.BILINEAR))
    return resize_bilinear(image, size).astype(image.dtype)


def sliding_window_segment(image: np.ndarray, bank: PrototypeBank, vocab: Vocabulary, ensemble: EnsembleSpace,
                           options: SegmentOptions, windows: Optional[Sequence[int]] = None,
                           stride: Optional[int] = None) -> SegmentationResult:
    """Multi-scale sliding-window segmentation with per-pixel mean of class scores."""
    windows = tuple(windows or options.windows)
    stride = stride or options.stride
    if stride > min(windows):
        raise ValueError("stride must not exceed the smallest window")
    image = np.asarray(image)
    original = image.shape[:2]
    work = resize_shortest_side(image, options.shortest_side) if options.shortest_side else image
    vocab, kept, pools = _prepare(work, bank, vocab, ensemble, options)
    h, w = work.shape[:2]
    if max(h, w) <= min(windows):
        windows = (min(windows),)

    n_classes = len(pools.class_ids)
    total = np.zeros((n_classes, h, w))
    count = np.zeros((h, w))
    best = np.full((n_classes, h, w), -np.inf)
    best_winner = np.full((n_classes, h, w), NO_PROTOTYPE, dtype=np.int64)
    for size in windows:
        wh, ww = min(size, h), min(size, w)
        for y in tile_positions(h, size, stride):
            for x in tile_positions(w, size, stride):
                scores, winners = window_scores(work[y:y + wh, x:x + ww], pools, options, ensemble)
                region = (slice(None), slice(y, y + wh), slice(x, x + ww))
                total[region] += scores
                count[region[1:]] += 1
                better = scores > best[region]
                best[region] = np.where(better, scores, best[region])
                best_winner[region] = np.where(better, winners, best_winner[region])
    mean = total / count
    if work.shape[:2] != original:
        finite = np.isfinite(mean).all(axis=(1, 2))
        mean = np.moveaxis(resize_bilinear(np.moveaxis(np.where(np.isfinite(mean), mean, 0.0), 0, -1), original), -1, 0)
        mean[~finite] = -np.inf
        best_winner = np.moveaxis(resize_nearest(np.moveaxis(best_winner, 0, -1), original), -1, 0)
    return _finish(mean, best_winner, pools, vocab, kept)


def pamr_hook(result: SegmentationResult, image: np.ndarray,
              refiner: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None) -> SegmentationResult:
    """Optional external label refinement; identity without a refiner."""
    if refiner is None:
        return result
    labels = np.asarray(refiner(result.labels, image))
    if labels.shape != result.labels.shape:
        raise ValueError(f"refiner returned shape {labels.shape}, expected {result.labels.shape}")
    return replace(result, labels=labels.astype(result.labels.dtype))
