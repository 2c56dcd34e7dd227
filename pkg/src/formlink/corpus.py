"""Form documents: data model, JSON (de)serialization, validation, tokenization.

The wire format is the XFUND-style dataset file::

    {"lang": ..., "version": "0.1", "split": ..., "documents": [
        {"id": ..., "cells": [{"box": [x0, y0, x1, y1], "text": ..., "label": ...,
                               "id": ..., "linking": [[head, tail], ...]}, ...],
         "img": {"fname": ..., "width": ..., "height": ...}}]}

Links are read from cells and from an optional document-level
``"relations"`` list; they are always written back on the cells.
"""

from __future__ import annotations

import json
import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
DEFAULT_MAX_LEN = 512


class CorpusError(Exception):
    """Base class for dataset loading failures."""


class DatasetParseError(CorpusError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(CorpusError):
    pass


class ReferentialError(CorpusError):
    pass


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class Cell:
    id: int
    text: str
    bbox: BBox
    label: str
    visual_region: tuple[int, int, int, int] | None = None


@dataclass(frozen=True)
class Relation:
    head_id: int
    tail_id: int


@dataclass(frozen=True)
class PageImage:
    fname: str
    width: int
    height: int


@dataclass(frozen=True)
class Document:
    id: str
    cells: tuple[Cell, ...]
    relations: tuple[Relation, ...]
    img: PageImage
    lang: str = "en"
    split: str = "train"

    def cell_by_id(self) -> dict[int, Cell]:
        return {c.id: c for c in self.cells}


@dataclass(frozen=True)
class LabelSet:
    names: tuple[str, ...]
    head_capable: frozenset[str]
    tail_capable: frozenset[str]
    outside: str

    def __post_init__(self):
        if not self.names or len(set(self.names)) != len(self.names):
            raise ValueError("label names must be non-empty and unique")
        if self.outside not in self.names:
            raise ValueError(f"outside label {self.outside!r} not in {self.names}")
        unknown = (self.head_capable | self.tail_capable) - set(self.names)
        if unknown:
            raise ValueError(f"capability sets reference unknown labels {sorted(unknown)}")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def resolve(self, raw: str) -> str | None:
        up = raw.upper()
        return up if up in self.names else None

    @property
    def bio_tags(self) -> tuple[str, ...]:
        """O first, then B-X, I-X for every non-outside label in order."""
        tags = ["O"]
        for name in self.names:
            if name != self.outside:
                tags += [f"B-{name}", f"I-{name}"]
        return tuple(tags)

    def bio_to_label_matrix(self) -> np.ndarray:
        """(num_tags, num_labels) 0/1 matrix summing B-X and I-X into X, O into outside."""
        tags = self.bio_tags
        m = np.zeros((len(tags), len(self.names)))
        for t, tag in enumerate(tags):
            name = self.outside if tag == "O" else tag[2:]
            m[t, self.index(name)] = 1.0
        return m


XFUND_LABELS = LabelSet(
    names=("HEADER", "QUESTION", "ANSWER", "OTHER"),
    head_capable=frozenset({"QUESTION"}),
    tail_capable=frozenset({"ANSWER"}),
    outside="OTHER",
)

INDFORM_LABELS = LabelSet(
    names=("SINGLE", "QUESTION", "ANSWER", "ANSWERNUM", "OTHER"),
    head_capable=frozenset({"QUESTION"}),
    tail_capable=frozenset({"ANSWER", "ANSWERNUM"}),
    outside="OTHER",
)

LABEL_SETS = {"xfund": XFUND_LABELS, "indform": INDFORM_LABELS}


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    where: str
    index: int
    reason: str


def validate(doc: Document, labels: LabelSet) -> list[Violation]:
    out: list[Violation] = []
    if doc.img.width <= 0 or doc.img.height <= 0:
        out.append(Violation("BadPageSize", "img", 0, f"page {doc.img.width}x{doc.img.height}"))
    seen: dict[int, int] = {}
    prev = -1
    for i, cell in enumerate(doc.cells):
        if cell.id < 0:
            out.append(Violation("NegativeId", "cell", i, f"id {cell.id}"))
        if cell.id in seen:
            out.append(Violation("DuplicateId", "cell", i, f"id {cell.id} repeats cell {seen[cell.id]}"))
        seen.setdefault(cell.id, i)
        if cell.id <= prev:
            out.append(Violation("Unordered", "cell", i, f"id {cell.id} after {prev}"))
        prev = max(prev, cell.id)
        if cell.label not in labels.names:
            out.append(Violation("UnknownLabel", "cell", i, f"label {cell.label!r}"))
        b = cell.bbox
        if b.x0 > b.x1 or b.y0 > b.y1:
            out.append(Violation("InvertedBox", "cell", i, f"box {b.as_list()}"))
    by_id = doc.cell_by_id()
    for r, rel in enumerate(doc.relations):
        if rel.head_id == rel.tail_id:
            out.append(Violation("SelfLink", "relation", r, f"({rel.head_id}, {rel.tail_id})"))
        missing = [i for i in (rel.head_id, rel.tail_id) if i not in by_id]
        if missing:
            out.append(Violation("DanglingId", "relation", r, f"unknown cell id(s) {missing}"))
            continue
        head, tail = by_id[rel.head_id], by_id[rel.tail_id]
        if head.label not in labels.head_capable:
            out.append(Violation("HeadCapability", "relation", r, f"head label {head.label}"))
        if tail.label not in labels.tail_capable:
            out.append(Violation("TailCapability", "relation", r, f"tail label {tail.label}"))
    return out


# ---------------------------------------------------------------------------
# JSON wire format


def _int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise SchemaError(f"{what}: expected integer, got {value!r}")
    return int(value)


def parse_dataset(
    raw: bytes | str, labels: LabelSet = XFUND_LABELS, strict: bool = True, check: bool = True
) -> list[Document]:
    """Decode a dataset file into validated documents.

    With ``strict=False`` relations that violate head/tail capability are
    dropped with a warning instead of failing the load (useful for corpora
    such as FUNSD that also link headers).  ``check=False`` skips validation
    and keeps cells in file order, so callers can list every violation.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetParseError("invalid UTF-8", exc.start) from None
    else:
        text = raw
    try:
        top = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(top, dict) or not isinstance(top.get("documents"), list):
        raise SchemaError("top level must be an object with a 'documents' list")
    lang = top.get("lang", "en")
    split = top.get("split", "train")
    docs = []
    for d_idx, d in enumerate(top["documents"]):
        docs.append(_parse_document(d, d_idx, lang, split, labels, strict, check))
    return docs


def _parse_document(d, d_idx, lang, split, labels, strict, check=True) -> Document:
    if not isinstance(d, dict):
        raise SchemaError(f"document {d_idx}: expected object")
    doc_id = str(d.get("id", d_idx))
    img = d.get("img")
    if not isinstance(img, dict):
        raise SchemaError(f"document {doc_id}: missing 'img'")
    page = PageImage(
        fname=str(img.get("fname", "")),
        width=_int(img.get("width"), f"document {doc_id} img.width"),
        height=_int(img.get("height"), f"document {doc_id} img.height"),
    )
    cells = []
    pairs: list[tuple[int, int]] = []
    for c_idx, c in enumerate(d.get("cells", d.get("document", []))):
        where = f"document {doc_id} cell {c_idx}"
        box = c.get("box")
        if not isinstance(box, list) or len(box) != 4:
            raise SchemaError(f"{where}: 'box' must be a list of four integers")
        name = labels.resolve(str(c.get("label", "")))
        if name is None:
            raise SchemaError(f"{where}: unknown label {c.get('label')!r}")
        cells.append(
            Cell(
                id=_int(c.get("id"), f"{where} id"),
                text=str(c.get("text", "")),
                bbox=BBox(*(_int(v, f"{where} box") for v in box)),
                label=name,
            )
        )
        for link in c.get("linking", []):
            if len(link) != 2:
                raise SchemaError(f"{where}: linking entries are [head, tail] pairs")
            pairs.append((_int(link[0], where), _int(link[1], where)))
    for link in d.get("relations", []):
        if isinstance(link, dict):
            link = (link.get("head_id", link.get("head")), link.get("tail_id", link.get("tail")))
        pairs.append((_int(link[0], f"document {doc_id} relation"), _int(link[1], f"document {doc_id} relation")))
    relations = tuple(Relation(h, t) for h, t in sorted(set(pairs)))
    if not check:
        return Document(doc_id, tuple(cells), relations, page, lang=lang, split=split)
    cells.sort(key=lambda c: c.id)
    doc = Document(doc_id, tuple(cells), relations, page, lang=lang, split=split)

    problems = validate(doc, labels)
    dangling = [v for v in problems if v.code == "DanglingId"]
    if dangling:
        raise ReferentialError(f"document {doc_id}: relation {dangling[0].index} {dangling[0].reason}")
    capability = [v for v in problems if v.code in ("HeadCapability", "TailCapability")]
    if capability and not strict:
        bad = {v.index for v in capability}
        logger.warning("document %s: dropping %d relation(s) with incapable endpoints", doc_id, len(bad))
        doc = Document(
            doc_id,
            doc.cells,
            tuple(r for i, r in enumerate(relations) if i not in bad),
            page,
            lang=lang,
            split=split,
        )
        problems = validate(doc, labels)
    if problems:
        v = problems[0]
        raise SchemaError(f"document {doc_id}: {v.code} at {v.where} {v.index}: {v.reason}")
    return doc


def serialize_dataset(
    docs: Sequence[Document], lang: str | None = None, split: str | None = None
) -> bytes:
    """Canonical encoding: fixed key order, two-space indent, UTF-8, trailing newline."""
    lang = lang if lang is not None else (docs[0].lang if docs else "en")
    split = split if split is not None else (docs[0].split if docs else "train")
    payload = {
        "lang": lang,
        "version": "0.1",
        "split": split,
        "documents": [_document_json(d) for d in docs],
    }
    return (json.dumps(payload, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def _document_json(doc: Document) -> dict:
    links: dict[int, list[list[int]]] = {c.id: [] for c in doc.cells}
    for rel in doc.relations:
        links[rel.head_id].append([rel.head_id, rel.tail_id])
        links[rel.tail_id].append([rel.head_id, rel.tail_id])
    return {
        "id": doc.id,
        "cells": [
            {
                "box": c.bbox.as_list(),
                "text": c.text,
                "label": c.label.lower(),
                "id": c.id,
                "linking": links[c.id],
            }
            for c in doc.cells
        ],
        "img": {"fname": doc.img.fname, "width": doc.img.width, "height": doc.img.height},
    }


# ---------------------------------------------------------------------------
# geometry


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def normalize_bbox(b: BBox, page_w: int, page_h: int) -> tuple[int, int, int, int]:
    """Page-relative (x, y, w, h) bucketed to integers in 0..1000."""
    if page_w <= 0 or page_h <= 0:
        raise ValueError(f"page dimensions must be positive, got {page_w}x{page_h}")
    raw = (
        _round_half_up(1000 * b.x0 / page_w),
        _round_half_up(1000 * b.y0 / page_h),
        _round_half_up(1000 * (b.x1 - b.x0) / page_w),
        _round_half_up(1000 * (b.y1 - b.y0) / page_h),
    )
    out = tuple(min(1000, max(0, v)) for v in raw)
    if out != raw:
        logger.info("normalize_bbox: clamped %s to %s", raw, out)
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# tokenization


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)


def split_text(text: str) -> list[str]:
    """Whitespace split, then per-character split of any non-ASCII piece."""
    out = []
    for piece in text.split():
        if piece.isascii():
            out.append(piece)
        else:
            out.extend(ch for ch in piece if not unicodedata.category(ch).startswith("Z"))
    return out


def build_vocab(docs: Iterable[Document], min_count: int = 1) -> Vocab:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for doc in docs:
        for cell in doc.cells:
            counts.update(split_text(cell.text))
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIAL_TOKENS) + kept)


@dataclass
class TokenizedDocument:
    doc_id: str
    token_ids: np.ndarray  # (T,)
    texts: list[str]
    cell_index: np.ndarray  # (T,) position of the owning cell in ``cell_ids``
    tags: np.ndarray  # (T,) BIO tag ids
    boxes: np.ndarray  # (T, 4) normalised x, y, w, h
    positions: np.ndarray  # (T,)
    cell_ids: tuple[int, ...]
    cell_labels: np.ndarray  # (n_cells,) gold label ids
    relations: tuple[tuple[int, int], ...]  # (head position, tail position) into cell_ids

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def token_cell_ids(self) -> np.ndarray:
        return np.asarray(self.cell_ids, dtype=np.int64)[self.cell_index]

    def cell_token_mask(self) -> np.ndarray:
        """(n_cells, T) boolean membership matrix."""
        n = len(self.cell_ids)
        mask = np.zeros((n, len(self)), dtype=bool)
        mask[self.cell_index, np.arange(len(self))] = True
        return mask

    def cell_token_counts(self) -> np.ndarray:
        return np.bincount(self.cell_index, minlength=len(self.cell_ids))


def tokenize(
    doc: Document, vocab: Vocab, labels: LabelSet = XFUND_LABELS, max_len: int = DEFAULT_MAX_LEN
) -> TokenizedDocument:
    tag_index = {t: i for i, t in enumerate(labels.bio_tags)}
    ids, texts, owner, tags, boxes = [], [], [], [], []
    dropped = 0
    for pos, cell in enumerate(doc.cells):
        pieces = split_text(cell.text)
        if len(ids) + len(pieces) > max_len:
            dropped = len(doc.cells) - pos
            break
        box = normalize_bbox(cell.bbox, doc.img.width, doc.img.height)
        for k, piece in enumerate(pieces):
            ids.append(vocab.lookup(piece))
            texts.append(piece)
            owner.append(pos)
            boxes.append(box)
            if cell.label == labels.outside:
                tags.append(tag_index["O"])
            else:
                tags.append(tag_index[("B-" if k == 0 else "I-") + cell.label])
    if dropped:
        logger.warning("document %s: truncated at %d tokens, %d cell(s) dropped", doc.id, max_len, dropped)
    pos_of = {c.id: i for i, c in enumerate(doc.cells)}
    n = len(ids)
    return TokenizedDocument(
        doc_id=doc.id,
        token_ids=np.asarray(ids, dtype=np.int64),
        texts=texts,
        cell_index=np.asarray(owner, dtype=np.int64),
        tags=np.asarray(tags, dtype=np.int64),
        boxes=np.asarray(boxes, dtype=np.int64).reshape(n, 4),
        positions=np.arange(n, dtype=np.int64),
        cell_ids=tuple(c.id for c in doc.cells),
        cell_labels=np.asarray([labels.index(c.label) for c in doc.cells], dtype=np.int64),
        relations=tuple((pos_of[r.head_id], pos_of[r.tail_id]) for r in doc.relations),
    )


def bio_well_formed(tags: Sequence[str]) -> bool:
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            return False
        prev = tag
    return True
