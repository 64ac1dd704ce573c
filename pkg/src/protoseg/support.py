"""Support-set sampling: N generated images per category plus attribution maps."""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .gridio import (
    ChecksumError,
    decode_grid,
    decode_mask,
    encode_grid,
    encode_mask,
    resize_bilinear,
    sha256_bytes,
    write_bytes,
)
from .vocabulary import DEFAULT_TEMPLATE, Category, make_prompt

logger = logging.getLogger(__name__)

DEFAULT_N_SUPPORT = 64
CACHE_VERSION = 1


@dataclass(frozen=True)
class SupportImage:
    pixels: np.ndarray
    category_id: str
    sample_index: int
    seed_used: int

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"support pixels must be HxWx3 uint8, got {self.pixels.shape} {self.pixels.dtype}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ValueError("support image is empty")


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class GeneratorAdapter(Protocol):
    can_attribute: bool

    def config_dict(self) -> dict: ...

    def generate(self, prompt: str, seed: int) -> tuple[np.ndarray, list[np.ndarray]]: ...


class SamplingError(RuntimeError):
    pass


def normalize_attribution(values: np.ndarray) -> AttributionMap:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return AttributionMap(np.zeros(values.shape, dtype=np.float32), normalized=True)
    return AttributionMap(((values - lo) / (hi - lo)).astype(np.float32), normalized=True)


def aggregate_attribution(raw_layers: Sequence[np.ndarray], target_size: tuple[int, int]) -> AttributionMap:
    """Resize every attention grid to ``target_size``, sum and min-max normalize."""
    if len(raw_layers) == 0:
        raise ValueError("aggregate_attribution needs at least one grid")
    total = np.zeros(target_size, dtype=np.float64)
    for grid in raw_layers:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ValueError(f"attention grids must be 2-D, got {grid.shape}")
        if (grid < 0).any():
            raise ValueError("attention grids must be non-negative")
        total += resize_bilinear(grid, target_size)
    return normalize_attribution(total)


def sample_seed(category_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([category_seed, index]).generate_state(1)[0])


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.array(im.convert("RGB"))


class SupportCache:
    """One directory per category: ``{idx:03d}.png``, ``{idx:03d}.attr`` and ``manifest.json``."""

    def __init__(self, root):
        self.root = Path(root)

    def category_dir(self, category_id: str) -> Path:
        return self.root / _safe_name(category_id)

    def manifest_path(self, category_id: str) -> Path:
        return self.category_dir(category_id) / "manifest.json"

    def read_manifest(self, category_id: str) -> Optional[dict]:
        path = self.manifest_path(category_id)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            return None

    def load(self, category: Category, n: int, adapter_hash: str):
        """Cached pairs, or None when missing, stale or corrupt."""
        manifest = self.read_manifest(category.id)
        key = {"category_id": category.id, "n": n, "seed": category.seed, "adapter_config_hash": adapter_hash}
        if manifest is None or any(manifest.get(k) != v for k, v in key.items()):
            return None
        if manifest.get("version") != CACHE_VERSION:
            return None
        out = []
        cdir = self.category_dir(category.id)
        try:
            for rec in manifest["samples"]:
                img_bytes = (cdir / rec["image"]).read_bytes()
                attr_bytes = (cdir / rec["attribution"]).read_bytes()
                if sha256_bytes(img_bytes) != rec["image_sha256"] or sha256_bytes(attr_bytes) != rec["attribution_sha256"]:
                    raise ChecksumError(f"checksum mismatch for sample {rec['index']}")
                image = SupportImage(decode_png(img_bytes), category.id, rec["index"], rec["seed"])
                out.append((image, AttributionMap(decode_grid(attr_bytes), normalized=True)))
        except (OSError, KeyError, ChecksumError, ValueError) as exc:
            logger.warning("support cache for %r unusable (%s); regenerating", category.id, exc)
            return None
        return out

    def store(self, category: Category, n: int, adapter_hash: str, pairs) -> None:
        cdir = self.category_dir(category.id)
        samples = []
        for image, attribution in pairs:
            img_bytes = encode_png(image.pixels)
            attr_bytes = encode_grid(attribution.values)
            stem = f"{image.sample_index:03d}"
            write_bytes(cdir / f"{stem}.png", img_bytes)
            write_bytes(cdir / f"{stem}.attr", attr_bytes)
            samples.append({
                "index": image.sample_index,
                "seed": image.seed_used,
                "image": f"{stem}.png",
                "image_sha256": sha256_bytes(img_bytes),
                "attribution": f"{stem}.attr",
                "attribution_sha256": sha256_bytes(attr_bytes),
            })
        manifest = {
            "version": CACHE_VERSION,
            "category_id": category.id,
            "n": n,
            "seed": category.seed,
            "adapter_config_hash": adapter_hash,
            "samples": samples,
        }
        write_bytes(self.manifest_path(category.id), (json.dumps(manifest, indent=2) + "\n").encode())

    def store_masks(self, category_id: str, sample_index: int, fg, bg, provenance: str) -> None:
        mdir = self.category_dir(category_id) / "masks"
        stem = f"{sample_index:03d}"
        write_bytes(mdir / f"{stem}_fg.mask", encode_mask(fg))
        write_bytes(mdir / f"{stem}_bg.mask", encode_mask(bg))
        write_bytes(mdir / f"{stem}.json", (json.dumps({"provenance": provenance}) + "\n").encode())

    def mask_path(self, category_id: str, sample_index: int, polarity: str) -> Path:
        return self.category_dir(category_id) / "masks" / f"{sample_index:03d}_{polarity}.mask"

    def load_mask(self, category_id: str, sample_index: int, polarity: str) -> np.ndarray:
        return decode_mask(self.mask_path(category_id, sample_index, polarity).read_bytes())

    def load_image(self, category_id: str, sample_index: int) -> np.ndarray:
        return decode_png((self.category_dir(category_id) / f"{sample_index:03d}.png").read_bytes())

    def sample_indices(self, category_id: str) -> list[int]:
        manifest = self.read_manifest(category_id)
        return [] if manifest is None else [rec["index"] for rec in manifest["samples"]]

    def feature_path(self, category_id: str, space_id: str, sample_index: int) -> Path:
        return self.category_dir(category_id) / "features" / _safe_name(space_id) / f"{sample_index:03d}.feat"


def _safe_name(category_id: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in category_id)
    if keep != category_id:
        keep += "-" + hashlib.sha256(category_id.encode()).hexdigest()[:8]
    return keep


def sample_support_set(
    category: Category,
    n: int,
    adapter: GeneratorAdapter,
    cache_dir=None,
    template: str = DEFAULT_TEMPLATE,
):
    """Generate (or load from cache) ``n`` support images with normalized attribution maps."""
    if n < 1:
        raise ValueError("support set size must be >= 1")
    if not getattr(adapter, "can_attribute", False):
        raise ValueError("generator adapter cannot produce attribution maps")
    adapter_hash = config_hash({**adapter.config_dict(), "template": template})
    cache = SupportCache(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cached = cache.load(category, n, adapter_hash)
        if cached is not None:
            return cached

    prompt = make_prompt(category, template)
    pairs = []
    for index in range(n):
        seed = sample_seed(category.seed, index)
        try:
            pixels, raw = adapter.generate(prompt, seed)
        except Exception as exc:
            raise SamplingError(f"generator failed for category {category.id!r}, sample {index} (seed {seed})") from exc
        pixels = np.asarray(pixels, dtype=np.uint8)
        image = SupportImage(pixels, category.id, index, seed)
        pairs.append((image, aggregate_attribution(raw, pixels.shape[:2])))
    if cache is not None:
        cache.store(category, n, adapter_hash, pairs)
        # round-trip through float32 storage so cold and warm calls agree exactly
        return cache.load(category, n, adapter_hash)
    return pairs
