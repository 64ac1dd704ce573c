"""Per-category prototype sets: building, stuff filtering and on-disk storage.

On disk a bank is a directory::

    manifest.json                       "# sha256 <hex>" line, then the JSON body
    vectors/<cat>__<space>__<fg|bg>.bin 24-byte header + count x D float32

Vector file header, six little-endian uint32: magic, count, D, polarity
(0 = fg, 1 = bg), kind flags (1 class, 2 instance, 4 part), CRC32 of the
first 20 header bytes followed by the payload.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .features import EmptyMask, FeatureMap, cosine_matrix, extract, masked_mean
from .gridio import ChecksumError, resize_nearest, write_bytes
from .kmeans import kmeans
from .vocabulary import Category, Tag, Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_K = 32
STUFF_THRESHOLD = 0.85
FORMAT_NAME = "protoseg-bank"
FORMAT_VERSION = 1
MAGIC = 0x42545250  # b"PRTB"
VECTOR_HEADER = struct.Struct("<6I")


class Polarity(str, enum.Enum):
    FG = "fg"
    BG = "bg"


class Kind(str, enum.Enum):
    CLASS = "class"
    INSTANCE = "instance"
    PART = "part"


_KIND_FLAG = {Kind.CLASS: 1, Kind.INSTANCE: 2, Kind.PART: 4}


class BankError(ValueError):
    pass


@dataclass(frozen=True)
class Prototype:
    vector: np.ndarray
    space_id: str
    polarity: Polarity
    kind: Kind
    category_id: str
    sample_index: Optional[int] = None
    cluster: Optional[int] = None
    pixel_count: int = 0
    # CLASS prototypes: the support samples whose instances were averaged
    members: tuple[int, ...] = ()

    @property
    def key(self) -> tuple:
        """Identity shared by corresponding prototypes across feature spaces."""
        index = self.sample_index if self.kind is Kind.INSTANCE else self.cluster
        return (self.polarity.value, self.kind.value, index)

    def provenance(self) -> dict:
        return {
            "kind": self.kind.value,
            "sample_index": self.sample_index,
            "cluster": self.cluster,
            "pixel_count": self.pixel_count,
            "members": list(self.members),
        }


class PrototypeBank:
    """Append-only mapping category -> space_id -> list of prototypes."""

    def __init__(self, meta: Optional[Mapping] = None):
        self._protos: dict[str, dict[str, list[Prototype]]] = {}
        self._info: dict[str, dict] = {}
        self.meta: dict = dict(meta or {})

    def add_category(self, category_id: str, by_space: Mapping[str, Sequence[Prototype]],
                     info: Optional[Mapping] = None) -> None:
        if category_id in self._protos:
            raise BankError(f"category {category_id!r} already in bank")
        for space, protos in by_space.items():
            for p in protos:
                if p.category_id != category_id or p.space_id != space:
                    raise BankError(f"prototype filed under wrong category/space: {p.category_id}/{p.space_id}")
                if not np.isfinite(p.vector).all():
                    raise BankError("non-finite prototype vector")
        self._protos[category_id] = {s: sorted(v, key=_build_order) for s, v in sorted(by_space.items())}
        self._info[category_id] = dict(info or {})

    @property
    def categories(self) -> list[str]:
        return sorted(self._protos)

    def __contains__(self, category_id: str) -> bool:
        return category_id in self._protos

    def spaces(self, category_id: Optional[str] = None) -> list[str]:
        if category_id is not None:
            return list(self._protos[category_id])
        return sorted({s for d in self._protos.values() for s in d})

    def info(self, category_id: str) -> dict:
        return dict(self._info[category_id])

    def prototypes(self, category_id: str, space_id: str, polarity: Optional[Polarity] = None,
                   kind: Optional[Kind] = None) -> list[Prototype]:
        protos = self._protos.get(category_id, {}).get(space_id, [])
        return [p for p in protos
                if (polarity is None or p.polarity is polarity) and (kind is None or p.kind is kind)]

    def count(self) -> int:
        return sum(len(v) for d in self._protos.values() for v in d.values())

    def category_digest(self, category_id: str) -> str:
        h = hashlib.sha256()
        h.update(category_id.encode())
        for space, protos in self._protos[category_id].items():
            h.update(space.encode())
            for p in protos:
                h.update(json.dumps([p.polarity.value, p.provenance()], sort_keys=True).encode())
                h.update(np.ascontiguousarray(p.vector, dtype="<f4").tobytes())
        return h.hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256()
        for cat in self.categories:
            h.update(self.category_digest(cat).encode())
        return h.hexdigest()

    def merge(self, other: "PrototypeBank") -> "PrototypeBank":
        out = PrototypeBank({**other.meta, **self.meta})
        for bank in (self, other):
            for cat in bank.categories:
                if cat in out:
                    if out.category_digest(cat) != bank.category_digest(cat):
                        raise BankError(f"conflicting prototypes for category {cat!r}")
                    continue
                out.add_category(cat, bank._protos[cat], bank._info[cat])
        return out

    def with_category(self, category_id: str, by_space, info=None) -> "PrototypeBank":
        out = self.merge(PrototypeBank())
        out.add_category(category_id, by_space, info)
        return out


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_category(
    category: Category,
    support: Sequence,
    extractors: Sequence,
    k: int = DEFAULT_K,
    seed: Optional[int] = None,
    features: Optional[Mapping[str, Sequence[FeatureMap]]] = None,
) -> dict[str, list[Prototype]]:
    """Instance, class and part prototypes for both polarities in every space.

    ``support`` holds ``(SupportImage, AttributionMap, FgBgMasks)`` triples.
    Parts are clustered in the first extractor's space; other spaces reuse
    that cluster membership so part prototypes correspond across spaces.
    """
    if not support:
        raise ValueError(f"empty support set for {category.id!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not extractors:
        raise ValueError("need at least one extractor")
    seed = category.seed if seed is None else seed
    if features is None:
        features = {ex.space_id: [extract(img.pixels, ex) for img, _, _ in support] for ex in extractors}
    spaces = [ex.space_id for ex in extractors]
    anchor = spaces[0]
    out: dict[str, list[Prototype]] = {s: [] for s in spaces}

    for pol_index, polarity in enumerate((Polarity.FG, Polarity.BG)):
        masks = [getattr(m, polarity.value) for _, _, m in support]
        samples = [img.sample_index for img, _, _ in support]

        for space in spaces:
            instances, exact = [], []
            for n, (mask, fm) in enumerate(zip(masks, features[space])):
                try:
                    vec, m = masked_mean(fm, mask)
                except EmptyMask:
                    continue
                exact.append(vec)
                instances.append(Prototype(vec.astype(np.float32), space, polarity, Kind.INSTANCE,
                                           category.id, sample_index=samples[n], pixel_count=m))
            if not instances:
                logger.warning("%s: no usable %s regions in space %s", category.id, polarity.value, space)
                continue
            weights = np.array([p.pixel_count for p in instances], dtype=np.float64)
            # average the float64 means; rounding first loses precision on near-cancelling components
            stacked = np.stack(exact)
            class_vec = (weights @ stacked) / weights.sum()
            out[space].append(Prototype(class_vec.astype(np.float32), space, polarity, Kind.CLASS, category.id,
                                        pixel_count=int(weights.sum()),
                                        members=tuple(p.sample_index for p in instances)))
            out[space].extend(instances)

        # parts: one joint clustering over all masked pixels of this polarity
        grids, rows, owners = [], [], []
        for n, (mask, fm) in enumerate(zip(masks, features[anchor])):
            small = resize_nearest(np.asarray(mask, dtype=bool), fm.grid)
            grids.append(small)
            if small.any():
                rows.append(fm.features[small].astype(np.float64))
                owners.append(n)
        if not rows:
            continue
        result = kmeans(np.concatenate(rows), k, seed=derive_seed(seed, pol_index))
        label_grids = []
        offset = 0
        for n, small in enumerate(grids):
            lab = np.full(small.shape, -1, dtype=np.int64)
            count = int(small.sum())
            lab[small] = result.labels[offset:offset + count]
            offset += count
            label_grids.append(lab)
        sizes = np.bincount(result.labels, minlength=result.k)
        for j, centroid in enumerate(result.centroids):
            out[anchor].append(Prototype(centroid.astype(np.float32), anchor, polarity, Kind.PART, category.id,
                                         cluster=j, pixel_count=int(sizes[j])))
        for space in spaces[1:]:
            sums, counts = None, np.zeros(result.k, dtype=np.int64)
            for n, (mask, fm) in enumerate(zip(masks, features[space])):
                lab = resize_nearest(label_grids[n], fm.grid)
                own = resize_nearest(np.asarray(mask, dtype=bool), fm.grid) & (lab >= 0)
                if not own.any():
                    continue
                if sums is None:
                    sums = np.zeros((result.k, fm.dim))
                np.add.at(sums, lab[own], fm.features[own].astype(np.float64))
                counts += np.bincount(lab[own], minlength=result.k)
            for j in np.flatnonzero(counts):
                out[space].append(Prototype((sums[j] / counts[j]).astype(np.float32), space, polarity, Kind.PART,
                                            category.id, cluster=int(j), pixel_count=int(counts[j])))
    return out


def stuff_filter(bank: PrototypeBank, vocab: Vocabulary, threshold: float = STUFF_THRESHOLD) -> PrototypeBank:
    """Drop stuff-class backgrounds and thing backgrounds that look like stuff foregrounds."""
    if not 0 < threshold <= 1:
        raise ValueError("stuff threshold must lie in (0, 1]")
    in_vocab = [c for c in vocab.categories if c.id in bank]
    stuff = [c.id for c in in_vocab if c.tag is Tag.STUFF]
    if not stuff:
        return bank
    out = PrototypeBank({**bank.meta, "stuff_filter": {"threshold": threshold, "stuff": sorted(stuff),
                                                       "vocabulary": sorted(c.id for c in in_vocab)}})
    vocab_ids = {c.id for c in in_vocab}
    for cat in bank.categories:
        by_space = {}
        for space in bank.spaces(cat):
            protos = bank.prototypes(cat, space)
            if cat not in vocab_ids:
                by_space[space] = protos
            elif cat in stuff:
                by_space[space] = [p for p in protos if p.polarity is Polarity.FG]
            else:
                stuff_fg = [p.vector for s in stuff for p in bank.prototypes(s, space, Polarity.FG)]
                if not stuff_fg:
                    by_space[space] = protos
                    continue
                kept = []
                for p in protos:
                    if p.polarity is Polarity.BG:
                        sims = cosine_matrix(p.vector[None].astype(np.float64), np.stack(stuff_fg))
                        if sims.max() > threshold:
                            continue
                    kept.append(p)
                by_space[space] = kept
        out.add_category(cat, by_space, bank.info(cat))
    return out


def _safe(name: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
    if keep != name:
        keep += "-" + hashlib.sha256(name.encode()).hexdigest()[:8]
    return keep


def _encode_vectors(protos: Sequence[Prototype], polarity: Polarity, dim: int) -> bytes:
    payload = b"".join(np.ascontiguousarray(p.vector, dtype="<f4").tobytes() for p in protos)
    flags = 0
    for p in protos:
        flags |= _KIND_FLAG[p.kind]
    head = struct.pack("<5I", MAGIC, len(protos), dim, 0 if polarity is Polarity.FG else 1, flags)
    return head + struct.pack("<I", zlib.crc32(head + payload)) + payload


def _decode_vectors(data: bytes, name: str) -> tuple[np.ndarray, int, int]:
    if len(data) < VECTOR_HEADER.size:
        raise ChecksumError(f"{name}: truncated header")
    magic, count, dim, polarity, flags, crc = VECTOR_HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ChecksumError(f"{name}: bad magic")
    payload = data[VECTOR_HEADER.size:]
    if zlib.crc32(data[:20] + payload) != crc:
        raise ChecksumError(f"{name}: checksum mismatch")
    if len(payload) != 4 * count * dim:
        raise ChecksumError(f"{name}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32), polarity, flags


def save_bank(bank: PrototypeBank, path) -> Path:
    path = Path(path)
    (path / "vectors").mkdir(parents=True, exist_ok=True)
    categories = {}
    for cat in bank.categories:
        files = []
        h = hashlib.sha256()
        for space in bank.spaces(cat):
            protos = bank.prototypes(cat, space)
            dim = protos[0].vector.shape[0] if protos else 0
            for polarity in Polarity:
                subset = [p for p in protos if p.polarity is polarity]
                fname = f"{_safe(cat)}__{_safe(space)}__{polarity.value}.bin"
                data = _encode_vectors(subset, polarity, dim)
                write_bytes(path / "vectors" / fname, data)
                h.update(data)
                files.append({"space": space, "polarity": polarity.value, "file": fname,
                              "rows": [p.provenance() for p in subset]})
        categories[cat] = {"info": bank.info(cat), "files": files, "sha256": h.hexdigest(),
                           "digest": bank.category_digest(cat)}
    body = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "builder_version": __version__,
        "meta": bank.meta,
        "spaces": bank.spaces(),
        "categories": categories,
    }
    blob = (json.dumps(body, indent=1, sort_keys=True) + "\n").encode()
    write_bytes(path / "manifest.json", f"# sha256 {hashlib.sha256(blob).hexdigest()}\n".encode() + blob)
    return path


def _read_manifest(path: Path) -> dict:
    try:
        raw = (path / "manifest.json").read_bytes()
    except OSError as exc:
        raise BankError(f"no bank manifest in {path}") from exc
    head, sep, blob = raw.partition(b"\n")
    if not sep or not head.startswith(b"# sha256 "):
        raise ChecksumError(f"{path}: manifest header missing")
    if hashlib.sha256(blob).hexdigest().encode() != head[len(b"# sha256 "):]:
        raise ChecksumError(f"{path}: manifest checksum mismatch")
    try:
        body = json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"{path}: manifest unreadable") from exc
    if body.get("format") != FORMAT_NAME:
        raise BankError(f"{path}: not a prototype bank")
    if body.get("version") != FORMAT_VERSION:
        raise BankError(
            f"{path}: bank format version {body.get('version')} is not supported "
            f"(this build reads version {FORMAT_VERSION}); rebuild the bank"
        )
    return body


def _load_one(path: Path) -> PrototypeBank:
    body = _read_manifest(path)
    bank = PrototypeBank(body.get("meta", {}))
    for cat, entry in sorted(body["categories"].items()):
        h = hashlib.sha256()
        blobs = []
        for f in entry["files"]:
            try:
                blobs.append((path / "vectors" / f["file"]).read_bytes())
            except OSError as exc:
                raise BankError(f"missing vector file {f['file']}") from exc
            h.update(blobs[-1])
        # verify before decoding so a damaged header cannot masquerade as another error
        if h.hexdigest() != entry["sha256"]:
            raise ChecksumError(f"category {cat!r}: file checksum mismatch")
        by_space: dict[str, list[Prototype]] = {}
        for f, data in zip(entry["files"], blobs):
            vectors, pol_code, _ = _decode_vectors(data, f["file"])
            polarity = Polarity(f["polarity"])
            if pol_code != (0 if polarity is Polarity.FG else 1) or len(vectors) != len(f["rows"]):
                raise ChecksumError(f"{f['file']}: header disagrees with manifest")
            protos = by_space.setdefault(f["space"], [])
            for vec, row in zip(vectors, f["rows"]):
                protos.append(Prototype(vec, f["space"], polarity, Kind(row["kind"]), cat,
                                        sample_index=row["sample_index"], cluster=row["cluster"],
                                        pixel_count=row["pixel_count"], members=tuple(row["members"])))
        bank.add_category(cat, by_space, entry.get("info"))
        if bank.category_digest(cat) != entry["digest"]:
            raise ChecksumError(f"category {cat!r}: digest mismatch")
    return bank


def _build_order(p: Prototype):
    kind_rank = {Kind.CLASS: 0, Kind.INSTANCE: 1, Kind.PART: 2}[p.kind]
    pol_rank = 0 if p.polarity is Polarity.FG else 1
    index = p.sample_index if p.kind is Kind.INSTANCE else (p.cluster or 0)
    return (pol_rank, kind_rank, index)


def load_bank(*paths) -> PrototypeBank:
    """Load one or more bank directories; several are merged into one bank."""
    if not paths:
        raise ValueError("load_bank needs at least one path")
    bank = _load_one(Path(paths[0]))
    for p in paths[1:]:
        bank = bank.merge(_load_one(Path(p)))
    return bank
