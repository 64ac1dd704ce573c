"""Foreground/background mask selection for support images."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .gridio import resize_nearest
from .support import AttributionMap, SupportImage

logger = logging.getLogger(__name__)

FG_THRESHOLD = 0.5
BG_THRESHOLD = 0.2


class Provenance(str, enum.Enum):
    PROPOSER = "proposer"
    FALLBACK = "fallback"


class EmptyProposals(ValueError):
    """Every candidate mask is empty."""


@dataclass(frozen=True)
class MaskSet:
    masks: tuple[np.ndarray, ...]
    includes_background_proposal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(np.asarray(m, dtype=bool) for m in self.masks))
        if len(self.masks) == 0:
            raise EmptyProposals("mask set is empty")


@dataclass(frozen=True)
class FgBgMasks:
    fg: np.ndarray
    bg: np.ndarray
    provenance: Provenance
    fg_index: Optional[int] = None
    bg_index: Optional[int] = None

    @property
    def degenerate(self) -> bool:
        return self.provenance is Provenance.PROPOSER and self.fg_index == self.bg_index


def mean_attribution(mask: np.ndarray, attribution: np.ndarray) -> float:
    m = mask.astype(np.float64).ravel()
    return float(m @ attribution.astype(np.float64).ravel() / (m @ m))


def select_fg_bg(masks: MaskSet, attribution: AttributionMap) -> FgBgMasks:
    """Highest / lowest mean attribution mask; ties go to the lowest index."""
    values = np.asarray(attribution.values)
    scores = []
    for i, mask in enumerate(masks.masks):
        if mask.shape != values.shape:
            raise ValueError(f"mask {i} has shape {mask.shape}, attribution {values.shape}")
        if mask.any():
            scores.append((i, mean_attribution(mask, values)))
    if not scores:
        raise EmptyProposals("all proposal masks are empty")
    fg_i = max(scores, key=lambda s: (s[1], -s[0]))[0]
    bg_i = min(scores, key=lambda s: (s[1], s[0]))[0]
    return FgBgMasks(masks.masks[fg_i], masks.masks[bg_i], Provenance.PROPOSER, fg_i, bg_i)


def fallback_masks(attribution: AttributionMap, fg_thresh: float = FG_THRESHOLD,
                   bg_thresh: float = BG_THRESHOLD) -> FgBgMasks:
    if not 0 <= bg_thresh < fg_thresh <= 1:
        raise ValueError(f"need 0 <= bg_thresh < fg_thresh <= 1, got {bg_thresh}, {fg_thresh}")
    values = np.asarray(attribution.values)
    return FgBgMasks(values > fg_thresh, values < bg_thresh, Provenance.FALLBACK)


Proposer = Callable[[SupportImage], Sequence[np.ndarray]]


def propose(image: SupportImage, attribution: AttributionMap, proposer: Optional[Proposer],
            fg_thresh: float = FG_THRESHOLD, bg_thresh: float = BG_THRESHOLD) -> FgBgMasks:
    """Run the proposer and pick fg/bg masks; any failure falls back to thresholds."""
    if proposer is None:
        return fallback_masks(attribution, fg_thresh, bg_thresh)
    try:
        raw = list(proposer(image))
        size = attribution.shape
        masks = MaskSet(tuple(resize_nearest(np.asarray(m, dtype=bool), size) for m in raw))
        if len(masks.masks) < 2:
            raise EmptyProposals("single proposal cannot separate foreground from background")
        chosen = select_fg_bg(masks, attribution)
        if chosen.degenerate:
            raise EmptyProposals("foreground and background selected the same mask")
        return chosen
    except Exception as exc:
        logger.info("proposals unusable for %s #%d (%s); using attribution thresholds",
                    image.category_id, image.sample_index, exc)
        return fallback_masks(attribution, fg_thresh, bg_thresh)
