"""Categories, vocabularies, thing/stuff tagging and prompt templating."""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import yaml

logger = logging.getLogger(__name__)

PLACEHOLDER = "<c>"
DEFAULT_TEMPLATE = "A good photo of a <c>"
DEFAULT_BACKGROUND_ID = "background"


class Tag(str, enum.Enum):
    THING = "thing"
    STUFF = "stuff"


class TableSource(str, enum.Enum):
    BUILTIN = "builtin"
    USER = "user"


def normalize_key(name: str) -> str:
    return " ".join(name.casefold().split())


def category_seed(global_seed: int, category_id: str) -> int:
    """Stable 32-bit seed for a category, independent of vocabulary order."""
    digest = hashlib.sha256(f"{global_seed}:{category_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class Category:
    id: str
    query_text: str
    tag: Tag = Tag.THING
    seed: int = 0
    # True when the tag was given explicitly by the user (vocabulary file);
    # builtin tables will not override it.
    pinned: bool = False

    def __post_init__(self):
        if not self.id:
            raise ValueError("category id must be non-empty")
        if not self.query_text or not self.query_text.strip():
            raise ValueError(f"category {self.id!r} has empty query_text")
        if self.seed < 0 or self.seed >= 2**32:
            raise ValueError(f"category {self.id!r}: seed must be an unsigned 32-bit integer")


@dataclass(frozen=True)
class Vocabulary:
    categories: tuple[Category, ...]
    background_id: str = DEFAULT_BACKGROUND_ID
    expanded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(self.categories) < 1:
            raise ValueError("a vocabulary needs at least one category")
        ids = [c.id for c in self.categories]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate category ids in {ids}")
        if self.background_id in ids:
            raise ValueError(f"background id {self.background_id!r} collides with a category id")

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.categories]

    @property
    def entries(self) -> list[str]:
        """Class ids in label order; background first once expanded."""
        if self.expanded:
            return [self.background_id] + self.ids
        return self.ids

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, category_id: str) -> Category:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(category_id)

    def index_of(self, class_id: str) -> int:
        return self.entries.index(class_id)

    def subset(self, ids: Iterable[str]) -> "Vocabulary":
        keep = set(ids)
        return replace(self, categories=tuple(c for c in self.categories if c.id in keep))


@dataclass(frozen=True)
class ThingStuffTable:
    entries: Mapping[str, Tag] = field(default_factory=dict)
    source: TableSource = TableSource.USER

    def __post_init__(self):
        object.__setattr__(
            self, "entries", {normalize_key(k): Tag(v) for k, v in dict(self.entries).items()}
        )

    def get(self, name: str) -> Optional[Tag]:
        return self.entries.get(normalize_key(name))

    def lookup(self, name: str) -> Tag:
        tag = self.get(name)
        if tag is None:
            logger.warning("no thing/stuff entry for %r, defaulting to thing", name)
            return Tag.THING
        return tag


def make_prompt(category: Union[Category, str], template: str = DEFAULT_TEMPLATE) -> str:
    if template.count(PLACEHOLDER) != 1:
        raise ValueError(
            f"template must contain exactly one {PLACEHOLDER!r} placeholder: {template!r}"
        )
    text = category.query_text if isinstance(category, Category) else category
    return template.replace(PLACEHOLDER, text)


def tag_vocabulary(
    vocab: Vocabulary,
    table: ThingStuffTable,
    override: Optional[ThingStuffTable] = None,
) -> Vocabulary:
    """Assign thing/stuff tags.

    Precedence: ``override`` (or ``table`` when it is a USER table), then tags
    pinned in the vocabulary file, then the builtin table, then THING.
    """
    tables = [t for t in (override, table) if t is not None]
    user = [t for t in tables if t.source is TableSource.USER]
    builtin = [t for t in tables if t.source is TableSource.BUILTIN]

    def resolve(c: Category) -> Tag:
        for t in user:
            tag = t.get(c.query_text) or t.get(c.id)
            if tag is not None:
                return tag
        if c.pinned:
            return c.tag
        for t in builtin:
            tag = t.get(c.query_text) or t.get(c.id)
            if tag is not None:
                return tag
        logger.warning("no thing/stuff entry for %r, defaulting to thing", c.query_text)
        return Tag.THING

    return replace(vocab, categories=tuple(replace(c, tag=resolve(c)) for c in vocab.categories))


def expand_with_background(vocab: Vocabulary) -> Vocabulary:
    if vocab.expanded:
        raise ValueError("vocabulary already contains the background class")
    return replace(vocab, expanded=True)


def make_vocabulary(
    names: Sequence[str],
    global_seed: int = 0,
    background_id: str = DEFAULT_BACKGROUND_ID,
) -> Vocabulary:
    """Vocabulary from plain query strings; ids are the strings themselves."""
    return Vocabulary(
        tuple(Category(n, n, seed=category_seed(global_seed, n)) for n in names),
        background_id=background_id,
    )


def _parse_entries(data) -> tuple[list[dict], str]:
    background_id = DEFAULT_BACKGROUND_ID
    if isinstance(data, dict):
        background_id = data.get("background_id", DEFAULT_BACKGROUND_ID)
        data = data.get("categories")
    if not isinstance(data, list):
        raise ValueError("vocabulary file must be a list of categories or a mapping with 'categories'")
    rows = []
    for item in data:
        if isinstance(item, str):
            item = {"id": item}
        if not isinstance(item, dict) or not ("id" in item or "query_text" in item):
            raise ValueError(f"malformed vocabulary entry: {item!r}")
        rows.append(item)
    return rows, background_id


def load_vocabulary(path: Union[str, Path], global_seed: int = 0) -> Vocabulary:
    """Read a YAML/JSON vocabulary file of ``{id, query_text, tag?, seed?}`` entries."""
    with open(path, "r", encoding="utf-8") as f:
        rows, background_id = _parse_entries(yaml.safe_load(f))
    cats = []
    for row in rows:
        cid = str(row.get("id", row.get("query_text")))
        text = str(row.get("query_text", cid))
        tag = row.get("tag")
        seed = row.get("seed")
        cats.append(
            Category(
                cid,
                text,
                tag=Tag(tag) if tag else Tag.THING,
                seed=int(seed) if seed is not None else category_seed(global_seed, cid),
                pinned=tag is not None,
            )
        )
    return Vocabulary(tuple(cats), background_id=background_id)


def save_vocabulary(vocab: Vocabulary, path: Union[str, Path]) -> None:
    rows = [
        {"id": c.id, "query_text": c.query_text, "tag": c.tag.value, "seed": c.seed}
        for c in vocab.categories
    ]
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"background_id": vocab.background_id, "categories": rows}, f, sort_keys=False)


def load_table(path: Union[str, Path], source: TableSource = TableSource.USER) -> ThingStuffTable:
    with open(path, "r", encoding="utf-8") as f:
        rows, _ = _parse_entries(yaml.safe_load(f))
    entries = {}
    for row in rows:
        if "tag" not in row:
            raise ValueError(f"thing/stuff entry without tag: {row!r}")
        entries[str(row.get("query_text", row.get("id")))] = Tag(row["tag"])
    return ThingStuffTable(entries, source)


def builtin_table() -> ThingStuffTable:
    ref = resources.files("protoseg") / "data" / "thing_stuff.yaml"
    with ref.open("r", encoding="utf-8") as f:
        rows, _ = _parse_entries(yaml.safe_load(f))
    return ThingStuffTable(
        {str(r.get("query_text", r.get("id"))): Tag(r["tag"]) for r in rows},
        TableSource.BUILTIN,
    )


def voc_vocabulary(global_seed: int = 0) -> Vocabulary:
    return make_vocabulary(VOC_CLASSES, global_seed)


VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
