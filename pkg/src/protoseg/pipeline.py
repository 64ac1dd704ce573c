"""End-to-end bank construction: sample supports, pick regions, distil prototypes."""

from __future__ import annotations

import logging
from typing import Optional, Sequence

from .bank import DEFAULT_K, PrototypeBank, build_category
from .features import extract, save_feature_map
from .regions import BG_THRESHOLD, FG_THRESHOLD, Provenance, propose
from .support import DEFAULT_N_SUPPORT, SupportCache, config_hash, sample_support_set
from .vocabulary import DEFAULT_TEMPLATE, Category, Vocabulary

logger = logging.getLogger(__name__)


def build_category_from_generator(category: Category, generator, proposer, extractors: Sequence,
                                  n: int = DEFAULT_N_SUPPORT, k: int = DEFAULT_K, cache_dir=None,
                                  template: str = DEFAULT_TEMPLATE):
    pairs = sample_support_set(category, n, generator, cache_dir, template)
    cache = SupportCache(cache_dir) if cache_dir is not None else None
    triples = []
    fallbacks = 0
    for image, attribution in pairs:
        masks = propose(image, attribution, proposer, FG_THRESHOLD, BG_THRESHOLD)
        fallbacks += masks.provenance is Provenance.FALLBACK
        triples.append((image, attribution, masks))
        if cache is not None:
            cache.store_masks(category.id, image.sample_index, masks.fg, masks.bg, masks.provenance.value)
    features = {}
    for ex in extractors:
        maps = [extract(img.pixels, ex) for img, _, _ in triples]
        features[ex.space_id] = maps
        if cache is not None:
            for (img, _, _), fm in zip(triples, maps):
                save_feature_map(fm, cache.feature_path(category.id, ex.space_id, img.sample_index))
    protos = build_category(category, triples, extractors, k, features=features)
    info = {
        "n_support": n,
        "k_parts": k,
        "seed": category.seed,
        "part_anchor": extractors[0].space_id,
        "fallback_masks": int(fallbacks),
    }
    return protos, info


def build_bank(vocab: Vocabulary, generator, proposer, extractors: Sequence, n: int = DEFAULT_N_SUPPORT,
               k: int = DEFAULT_K, cache_dir=None, bank: Optional[PrototypeBank] = None,
               template: str = DEFAULT_TEMPLATE) -> PrototypeBank:
    """Add every category of ``vocab`` missing from ``bank`` (a new bank by default)."""
    meta = {
        "n_support": n,
        "k_parts": k,
        "fallback_thresholds": {"fg": FG_THRESHOLD, "bg": BG_THRESHOLD},
        "generator_config_hash": config_hash({**generator.config_dict(), "template": template}),
        "extractors": {ex.space_id: getattr(ex, "config", {}) for ex in extractors},
    }
    out = PrototypeBank(meta) if bank is None else bank.merge(PrototypeBank(meta))
    for category in vocab.categories:
        if category.id in out:
            continue
        logger.info("building prototypes for %s", category.id)
        protos, info = build_category_from_generator(category, generator, proposer, extractors, n, k,
                                                     cache_dir, template)
        out.add_category(category.id, protos, info)
    return out
