"""Dense feature extraction contract, cosine scoring and score-level ensembles."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .gridio import decode_feature_map, encode_feature_map, resize_nearest, write_bytes


class EmptyMask(ValueError):
    """Mask has no on-pixels at feature resolution."""


class ExtractorError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    features: np.ndarray  # H' x W' x D
    space_id: str
    source_size: tuple[int, int]

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[:2]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def rows(self) -> np.ndarray:
        return self.features.reshape(-1, self.dim)


class ExtractorAdapter(Protocol):
    space_id: str
    dim: int
    deterministic: bool

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


def space_id_for(name: str, config: Mapping) -> str:
    blob = json.dumps(dict(config), sort_keys=True, separators=(",", ":")).encode()
    return f"{name}-{hashlib.sha256(blob).hexdigest()[:10]}"


def extract(image: np.ndarray, adapter: ExtractorAdapter) -> FeatureMap:
    image = np.asarray(image)
    if image.size == 0 or image.ndim != 3:
        raise ValueError(f"expected a non-empty HxWxC image, got shape {image.shape}")
    try:
        feats = np.asarray(adapter(image), dtype=np.float32)
    except Exception as exc:
        raise ExtractorError(f"extractor {adapter.space_id} failed") from exc
    if feats.ndim != 3 or feats.shape[2] != adapter.dim:
        raise ExtractorError(
            f"extractor {adapter.space_id} declared D={adapter.dim} but emitted shape {feats.shape}"
        )
    if not np.isfinite(feats).all():
        raise ExtractorError(f"extractor {adapter.space_id} emitted non-finite features")
    return FeatureMap(feats, adapter.space_id, tuple(image.shape[:2]))


def masked_mean(features: FeatureMap, mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Mean feature under ``mask`` (nearest-resized to the feature grid) and its pixel count."""
    small = resize_nearest(np.asarray(mask, dtype=bool), features.grid)
    m = int(small.sum())
    if m == 0:
        raise EmptyMask("mask is empty at feature resolution")
    flat = small.ravel().astype(np.float64)
    return (flat @ features.rows().astype(np.float64)) / m, m


def cosine_sim(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0
    return float(x @ y / (nx * ny))


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` (N x D) and ``b`` (P x D); zero rows give 0."""
    return unit_rows(a) @ unit_rows(b).T


@dataclass(frozen=True)
class EnsembleSpace:
    members: tuple[str, ...]
    weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member space")
        if len(set(self.members)) != len(self.members):
            raise ValueError("ensemble members must be distinct")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if len(w) != len(self.members) or any(v <= 0 for v in w):
                raise ValueError("ensemble weights must be positive, one per member")
            object.__setattr__(self, "weights", w)

    def normalized(self) -> dict[str, float]:
        w = np.ones(len(self.members)) if self.weights is None else np.asarray(self.weights)
        w = w / w.sum()
        return dict(zip(self.members, w.tolist()))


def ensemble_score(pixel_features: Mapping[str, np.ndarray], prototypes: Mapping[str, np.ndarray],
                   ensemble: EnsembleSpace) -> float:
    """Weighted mean of per-space cosine similarities."""
    missing = [s for s in ensemble.members if s not in pixel_features or s not in prototypes]
    if missing:
        raise KeyError(f"ensemble spaces missing from inputs: {missing}")
    weights = ensemble.normalized()
    return float(sum(weights[s] * cosine_sim(pixel_features[s], prototypes[s]) for s in ensemble.members))


class ColorHashExtractor:
    """Patch-mean colour embedded with Gaussian bumps on a fixed colour lattice.

    Nearby colours get high cosine similarity, distant colours low, which is
    what the synthetic benchmark needs from a feature space. ``jitter_seed``
    perturbs the lattice to derive distinct but comparable spaces.
    """

    deterministic = True

    def __init__(self, patch: int = 4, levels: int = 3, sigma: float = 0.3,
                 jitter_seed: Optional[int] = None, jitter: float = 0.08):
        self.patch = patch
        self.levels = levels
        self.sigma = sigma
        grid = np.linspace(0.0, 1.0, levels)
        anchors = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
        if jitter_seed is not None:
            anchors = anchors + np.random.default_rng(jitter_seed).normal(0, jitter, anchors.shape)
        self.anchors = anchors
        self.dim = len(anchors)
        self.config = {"patch": patch, "levels": levels, "sigma": sigma,
                       "jitter_seed": jitter_seed, "jitter": jitter if jitter_seed is not None else 0.0}
        self.space_id = space_id_for("colorhash", self.config)

    def embed_colors(self, colors: np.ndarray) -> np.ndarray:
        d2 = ((colors[..., None, :] - self.anchors) ** 2).sum(-1)
        return np.exp(-d2 / (2 * self.sigma**2))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)[..., :3] / 255.0
        h, w = img.shape[:2]
        p = self.patch
        gh, gw = -(-h // p), -(-w // p)
        padded = np.pad(img, ((0, gh * p - h), (0, gw * p - w), (0, 0)), mode="edge")
        means = padded.reshape(gh, p, gw, p, 3).mean(axis=(1, 3))
        return self.embed_colors(means).astype(np.float32)


class IdentityExtractor:
    """Treats the input array itself as an H x W x D feature grid."""

    deterministic = True

    def __init__(self, dim: int, name: str = "identity"):
        self.dim = dim
        self.space_id = space_id_for(name, {"dim": dim})

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float32)


@dataclass(frozen=True)
class ExtractorConfig:
    """Declarative description of a backbone feature extractor."""

    name: str
    model: str
    facet: str
    layers: tuple[str, ...]
    output_grid: Optional[tuple[int, int]] = None
    concat_heads: bool = True
    extra: Mapping = field(default_factory=dict)

    @property
    def space_id(self) -> str:
        cfg = asdict(self)
        cfg["extra"] = dict(self.extra)
        return space_id_for(self.name, cfg)


REFERENCE_CONFIGS: dict[str, ExtractorConfig] = {
    "dino": ExtractorConfig("dino", "dino_vitb8", "keys", ("last",)),
    "mae": ExtractorConfig("mae", "mae_vitl16_448", "keys", ("encoder.last",), extra={"masking": False}),
    "clip": ExtractorConfig("clip", "clip_vitb16", "keys", ("second_to_last",)),
    "sd": ExtractorConfig(
        "sd",
        "stable-diffusion-v1-5",
        "queries",
        ("down.0.attn.0", "up.1.attn.0", "up.1.attn.1", "up.1.attn.2",
         "up.2.attn.0", "up.2.attn.1", "up.2.attn.2", "up.3.attn.2"),
        output_grid=(64, 64),
        extra={"timestep": 200, "prompt": "", "upsample": "bilinear", "combine": "concat"},
    ),
}

DEFAULT_ENSEMBLE = EnsembleSpace(("sd", "dino", "clip"))


def make_extractor(name: str):
    """Extractors available without model weights, by CLI name."""
    if name == "colorhash":
        return ColorHashExtractor()
    if name.startswith("colorhash-p"):
        return ColorHashExtractor(patch=int(name[len("colorhash-p"):]))
    if name.startswith("colorhash-j"):
        return ColorHashExtractor(jitter_seed=int(name[len("colorhash-j"):]))
    if name in REFERENCE_CONFIGS:
        raise ExtractorError(
            f"{name!r} needs pretrained weights; wrap the backbone in an ExtractorAdapter "
            f"(see REFERENCE_CONFIGS[{name!r}])"
        )
    raise KeyError(f"unknown extractor {name!r}")


def save_feature_map(fm: FeatureMap, path) -> None:
    path = Path(path)
    write_bytes(path, encode_feature_map(fm.features))
    sidecar = {"space_id": fm.space_id, "source_size": list(fm.source_size)}
    write_bytes(path.with_suffix(path.suffix + ".json"), (json.dumps(sidecar, sort_keys=True) + "\n").encode())


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    feats = decode_feature_map(path.read_bytes())
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return FeatureMap(feats, sidecar["space_id"], tuple(sidecar["source_size"]))
