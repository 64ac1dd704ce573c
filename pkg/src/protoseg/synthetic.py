"""Desk-scale test doubles: a shape/texture world with exact ground truth.

Each category is one flat-coloured shape (disk, square or triangle) that is
rendered over one of a few blotchy two-tone background textures. The
generator emits attention-like grids derived from the true shape mask, the
proposer recovers the true layout from the generator, and the scorer detects
shape colours, so every stage upstream of matching is controlled exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .gridio import resize_bilinear

logger = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle")

Color = tuple[int, int, int]

DEFAULT_TEXTURES: dict[str, tuple[Color, Color]] = {
    "rust": ((175, 70, 55), (150, 55, 45)),
    "grass": ((60, 140, 60), (95, 170, 75)),
    "denim": ((60, 80, 170), (80, 95, 185)),
    "sand": ((205, 185, 140), (190, 170, 125)),
    "straw": ((205, 180, 80), (190, 165, 70)),
    "asphalt": ((95, 95, 100), (75, 75, 80)),
}


@dataclass(frozen=True)
class ShapeClass:
    shape: str
    color: Color
    backgrounds: tuple[str, ...]
    # shape radius as a fraction of the shorter image side
    size: tuple[float, float] = (0.22, 0.36)


@dataclass(frozen=True)
class SceneSpec:
    classes: Mapping[str, ShapeClass]
    textures: Mapping[str, tuple[Color, Color]] = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    support_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        for name, cls in self.classes.items():
            if cls.shape not in SHAPES:
                raise ValueError(f"category {name!r}: unknown shape {cls.shape!r}")
            for bg in cls.backgrounds:
                if bg not in self.textures:
                    raise ValueError(f"category {name!r}: unknown background texture {bg!r}")
            if not cls.backgrounds:
                raise ValueError(f"category {name!r}: needs at least one background texture")

    def to_dict(self) -> dict:
        return {
            "classes": {
                k: {"shape": v.shape, "color": list(v.color), "backgrounds": list(v.backgrounds),
                    "size": list(v.size)}
                for k, v in self.classes.items()
            },
            "textures": {k: [list(a), list(b)] for k, (a, b) in self.textures.items()},
            "support_size": list(self.support_size),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SceneSpec":
        classes = {
            k: ShapeClass(v["shape"], tuple(v["color"]), tuple(v["backgrounds"]),
                          tuple(v.get("size", (0.22, 0.36))))
            for k, v in data["classes"].items()
        }
        textures = {k: (tuple(a), tuple(b)) for k, (a, b) in data.get("textures", DEFAULT_TEXTURES).items()}
        return cls(classes, textures, tuple(data.get("support_size", (128, 128))))


def default_scene() -> SceneSpec:
    return SceneSpec(
        {
            "disk": ShapeClass("disk", (220, 40, 40), ("rust", "grass")),
            "square": ShapeClass("square", (40, 60, 220), ("denim", "sand")),
            "triangle": ShapeClass("triangle", (230, 210, 40), ("straw", "asphalt")),
        }
    )


def render_texture(colors: tuple[Color, Color], size: tuple[int, int], rng: np.random.Generator,
                   blotch: int = 16) -> np.ndarray:
    h, w = size
    coarse = rng.random((h // blotch + 2, w // blotch + 2))
    t = resize_bilinear(coarse, (h + 2 * blotch, w + 2 * blotch))[blotch:blotch + h, blotch:blotch + w]
    c1 = np.asarray(colors[0], dtype=np.float64)
    c2 = np.asarray(colors[1], dtype=np.float64)
    img = c1 + (c2 - c1) * t[..., None]
    img += rng.integers(-4, 5, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def shape_mask(shape: str, size: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy += 0.5
    xx += 0.5
    cy, cx = center
    if shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if shape == "square":
        return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    if shape == "triangle":
        angles = np.deg2rad([-90.0, 30.0, 150.0])
        vx = cx + radius * np.cos(angles)
        vy = cy + radius * np.sin(angles)
        inside = np.ones((h, w), dtype=bool)
        for i in range(3):
            x0, y0, x1, y1 = vx[i], vy[i], vx[(i + 1) % 3], vy[(i + 1) % 3]
            # vertices are clockwise on screen (y down); interior on the non-negative side
            inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def paint(img: np.ndarray, mask: np.ndarray, color: Color, rng: np.random.Generator) -> None:
    noise = rng.integers(-3, 4, size=(int(mask.sum()), 3))
    img[mask] = np.clip(np.asarray(color) + noise, 0, 255).astype(np.uint8)


def soft_attribution(mask: np.ndarray, decay: float) -> np.ndarray:
    """1 inside the mask, exp(-distance/decay) outside."""
    if not mask.any():
        return np.zeros(mask.shape)
    dist = ndimage.distance_transform_edt(~mask)
    return np.exp(-dist / max(decay, 1e-6))


@dataclass(frozen=True)
class GeneratorConfig:
    guidance_scale: float = 8.0
    steps: int = 30
    sampler_name: str = "dpm-solver"
    batch_size: int = 16


class SyntheticGenerator:
    """Generator adapter: renders one shape of the prompted category per seed."""

    can_attribute = True

    def __init__(self, spec: SceneSpec, template: str = "A good photo of a <c>"):
        self.spec = spec
        self.template = template
        self.config = GeneratorConfig(sampler_name="synthetic")

    def config_dict(self) -> dict:
        return {"adapter": "synthetic", "scene": self.spec.to_dict(), **self.config.__dict__}

    def category_for_prompt(self, prompt: str) -> str:
        names = [k for k in self.spec.classes if prompt == k or prompt.endswith(" " + k)]
        if not names:
            raise KeyError(f"prompt {prompt!r} names no category of the synthetic scene")
        return max(names, key=len)

    def layout(self, category: str, seed: int):
        """Deterministic (pixels, mask, radius) for a category and seed."""
        if category not in self.spec.classes:
            raise KeyError(f"unknown synthetic category {category!r}")
        cls = self.spec.classes[category]
        rng = np.random.default_rng([seed, 0x5EED])
        h, w = self.spec.support_size
        bg = cls.backgrounds[int(rng.integers(len(cls.backgrounds)))]
        img = render_texture(self.spec.textures[bg], (h, w), rng)
        side = min(h, w)
        radius = float(rng.uniform(*cls.size)) * side
        margin = radius + 1.0
        cy = float(rng.uniform(margin, h - margin))
        cx = float(rng.uniform(margin, w - margin))
        mask = shape_mask(cls.shape, (h, w), (cy, cx), radius)
        paint(img, mask, cls.color, rng)
        return img, mask, radius

    def generate(self, prompt: str, seed: int):
        """Returns (pixels HxWx3 uint8, list of raw non-negative attention grids)."""
        category = self.category_for_prompt(prompt)
        img, mask, radius = self.layout(category, seed)
        soft = soft_attribution(mask, decay=0.15 * radius)
        h, w = mask.shape
        # coarse-to-fine grids, mimicking cross-attention at several UNet resolutions
        raw = [resize_bilinear(soft, (max(1, h // f), max(1, w // f))) for f in (8, 4, 2)]
        return img, raw


def synthetic_generator(spec: SceneSpec) -> SyntheticGenerator:
    return SyntheticGenerator(spec)


class SyntheticProposer:
    """Mask proposer returning the true shape and its complement."""

    def __init__(self, generator: SyntheticGenerator, extra_masks: int = 0):
        self.generator = generator
        self.extra_masks = extra_masks

    def __call__(self, image) -> list[np.ndarray]:
        _, mask, _ = self.generator.layout(image.category_id, image.seed_used)
        masks = [mask, ~mask]
        rng = np.random.default_rng([image.seed_used, 0xB0C5])
        h, w = mask.shape
        for _ in range(self.extra_masks):
            y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
            box = np.zeros_like(mask)
            box[y0:y0 + h // 4, x0:x0 + w // 4] = True
            masks.append(box)
        return masks


class ColorPresenceScorer:
    """Image-text scorer stub: a category scores high when its shape colour is visible.

    Every prompt (single or ``"a and b"``) scores ``scale * sum(2 * presence - 1)``
    over its members, so the best subset is exactly the set of visible categories.
    """

    deterministic = True

    def __init__(self, spec: SceneSpec, tolerance: int = 20, min_fraction: float = 0.002,
                 scale: float = 10.0):
        self.spec = spec
        self.tolerance = tolerance
        self.min_fraction = min_fraction
        self.scale = scale

    def presence(self, image: np.ndarray) -> dict[str, float]:
        img = np.asarray(image)[..., :3].astype(np.int16)
        out = {}
        for name, cls in self.spec.classes.items():
            close = np.abs(img - np.asarray(cls.color, dtype=np.int16)).max(axis=-1) <= self.tolerance
            out[name] = float(min(1.0, close.mean() / self.min_fraction))
        return out

    def __call__(self, image: np.ndarray, prompts: Sequence[str]) -> np.ndarray:
        present = self.presence(image)
        scores = []
        for prompt in prompts:
            members = prompt.split(" and ")
            unknown = [m for m in members if m not in present]
            if unknown:
                raise KeyError(f"scorer does not know {unknown}")
            scores.append(self.scale * sum(2.0 * present[m] - 1.0 for m in members))
        return np.asarray(scores, dtype=np.float64)


def render_scene(spec: SceneSpec, size: tuple[int, int], rng: np.random.Generator,
                 max_shapes: int = 3, size_range: tuple[float, float] = (0.12, 0.22)):
    """One test image: 1..max_shapes distinct categories on a contextual background.

    Returns (pixels, labels) with label 0 for background and i+1 for the i-th
    category of ``spec.classes``.
    """
    names = list(spec.classes)
    h, w = size
    count = int(rng.integers(1, min(max_shapes, len(names)) + 1))
    chosen = sorted(rng.choice(len(names), size=count, replace=False).tolist())
    # backgrounds follow the context of one of the depicted categories
    host = spec.classes[names[chosen[int(rng.integers(count))]]]
    bg = host.backgrounds[int(rng.integers(len(host.backgrounds)))]
    img = render_texture(spec.textures[bg], size, rng)
    labels = np.zeros(size, dtype=np.uint8)
    placed: list[tuple[float, float, float]] = []
    side = min(h, w)
    for idx in chosen:
        cls = spec.classes[names[idx]]
        for _ in range(200):
            r = float(rng.uniform(*size_range)) * side
            cy = float(rng.uniform(r + 1, h - r - 1))
            cx = float(rng.uniform(r + 1, w - r - 1))
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 8) ** 2 for py, px, pr in placed):
                break
        else:
            continue
        placed.append((cy, cx, r))
        mask = shape_mask(cls.shape, size, (cy, cx), r)
        paint(img, mask, cls.color, rng)
        labels[mask] = idx + 1
    return img, labels


def write_synthetic_dataset(spec: SceneSpec, root, n_images: int = 50, seed: int = 0,
                            sizes: Sequence[tuple[int, int]] = ((448, 448), (448, 560), (448, 672))) -> Path:
    """Write a VOC-layout dataset (PNG images, palette label PNGs, val split file)."""
    from .evaluation import save_label_png

    root = Path(root)
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)
    (root / "SegmentationClass").mkdir(parents=True, exist_ok=True)
    (root / "ImageSets" / "Segmentation").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        size = tuple(sizes[int(rng.integers(len(sizes)))])
        img, labels = render_scene(spec, size, rng)
        name = f"synth_{i:04d}"
        Image.fromarray(img).save(root / "JPEGImages" / f"{name}.png")
        save_label_png(labels, root / "SegmentationClass" / f"{name}.png")
        ids.append(name)
    (root / "ImageSets" / "Segmentation" / "val.txt").write_text("\n".join(ids) + "\n")
    classes = ["background"] + list(spec.classes)
    (root / "classes.json").write_text(json.dumps({"classes": classes, "ignore_index": 255}, indent=2) + "\n")
    return root
