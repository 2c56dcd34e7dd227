"""Deterministic synthetic key-value forms.

Each page is a grid.  An optional header occupies the first row; every
question/answer field gets its own row with the question in column 0 and its
answer(s) in the following columns; leftover rows may hold free-standing
cells of the outside class.  Cell ids follow reading order (row-major).

Randomness comes exclusively from numpy's PCG64 bit generator.  Document
``i`` draws from ``PCG64(SeedSequence([seed, i]))`` so documents can be
produced independently and in any order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    LABEL_SETS,
    BBox,
    Cell,
    Document,
    LabelSet,
    PageImage,
    Relation,
    validate,
)

QUESTION_WORDS = [
    "Name", "Surname", "Date", "Birth", "Address", "Phone", "Email", "Company",
    "Title", "Department", "Amount", "Account", "City", "Country", "Signature",
    "Employee", "Reference", "Gender", "Nationality", "Postcode", "Fax", "Total",
    "姓名", "电话", "地址", "日期", "单位", "职务",
]
ANSWER_WORDS = [
    "john", "smith", "maria", "chen", "wang", "li", "london", "paris", "acme",
    "ltd", "corp", "street", "road", "manager", "engineer", "yes", "no", "female",
    "male", "blue", "green", "north", "south", "1987-03-02", "2021-11-30",
    "42", "1300", "98.5", "张", "伟", "北", "京",
]
HEADER_WORDS = ["APPLICATION", "FORM", "REGISTRATION", "RECORD", "SURVEY", "REPORT", "申请表", "登记"]
OTHER_WORDS = ["page", "of", "note:", "see", "reverse", "office", "use", "only", "rev.", "v2"]
NUMBER_WORDS = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]


class GenerationError(ValueError):
    pass


def default_pools(labels: LabelSet) -> dict[str, list[str]]:
    pools = {}
    for name in labels.names:
        if name == "QUESTION":
            pools[name] = QUESTION_WORDS
        elif name == "ANSWER":
            pools[name] = ANSWER_WORDS
        elif name in ("HEADER", "SINGLE"):
            pools[name] = HEADER_WORDS
        elif name == "ANSWERNUM":
            pools[name] = NUMBER_WORDS
        else:
            pools[name] = OTHER_WORDS
    return pools


@dataclass
class SynSpec:
    seed: int = 7
    num_docs: int = 200
    rows: tuple[int, int] = (6, 9)
    cols: tuple[int, int] = (3, 4)
    fields: tuple[int, int] = (3, 5)
    other_cells: tuple[int, int] = (0, 2)
    header_prob: float = 0.8
    one_to_many_frac: float = 0.1
    answernum_frac: float = 0.2
    page_size: tuple[int, int] = (850, 1100)
    label_set: str = "xfund"
    split: str = "train"
    lang: str = "en"
    pools: dict[str, list[str]] | None = field(default=None)

    def __post_init__(self):
        if self.num_docs < 1:
            raise ValueError("num_docs must be >= 1")
        for name in ("header_prob", "one_to_many_frac", "answernum_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("rows", "cols", "fields", "other_cells"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range, got {(lo, hi)}")
        if self.label_set not in LABEL_SETS:
            raise ValueError(f"unknown label set {self.label_set!r}")
        if self.pools is None:
            self.pools = default_pools(self.labels)
        if any(not p for p in self.pools.values()):
            raise ValueError("text pools must be non-empty")

    @property
    def labels(self) -> LabelSet:
        return LABEL_SETS[self.label_set]


def _role(labels: LabelSet, role: str) -> str:
    if role == "head":
        return "QUESTION"
    if role == "tail":
        return "ANSWER"
    if role == "title":
        return "HEADER" if "HEADER" in labels.names else "SINGLE"
    return labels.outside


def _text(rng: np.random.Generator, pool: list[str], lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return " ".join(pool[int(i)] for i in rng.integers(0, len(pool), size=n))


def _generate_one(spec: SynSpec, index: int) -> Document:
    labels = spec.labels
    pools = spec.pools
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index])))
    n_rows = int(rng.integers(spec.rows[0], spec.rows[1] + 1))
    n_cols = int(rng.integers(spec.cols[0], spec.cols[1] + 1))
    n_fields = int(rng.integers(spec.fields[0], spec.fields[1] + 1))
    n_other = int(rng.integers(spec.other_cells[0], spec.other_cells[1] + 1))
    has_header = bool(rng.random() < spec.header_prob)

    if n_fields and n_cols < 2:
        raise GenerationError(f"document {index}: {n_cols} column(s) cannot hold a question and its answer")
    needed_rows = n_fields + int(has_header)
    if needed_rows > n_rows:
        raise GenerationError(f"document {index}: {needed_rows} rows requested on a {n_rows}-row grid")
    n_other = min(n_other, n_rows - needed_rows)

    # which rows hold what; header fixed on top, the rest shuffled
    body = ["field"] * n_fields + ["other"] * n_other
    rng.shuffle(body)
    layout = (["title"] if has_header else []) + body

    page_w, page_h = spec.page_size
    row_h = page_h // n_rows
    col_w = page_w // n_cols
    cells: list[Cell] = []
    relations: list[Relation] = []

    def place(row: int, col: int, span: int, label: str, text: str) -> int:
        cid = len(cells)
        x0 = col * col_w + int(rng.integers(4, 12))
        x1 = (col + span) * col_w - int(rng.integers(4, 12))
        y0 = row * row_h + int(rng.integers(4, max(5, row_h // 4)))
        y1 = y0 + max(8, row_h // 2)
        cells.append(Cell(cid, text, BBox(x0, y0, x1, min(y1, (row + 1) * row_h - 1)), label))
        return cid

    for row, kind in enumerate(layout):
        if kind == "title":
            label = _role(labels, "title")
            place(row, 0, n_cols, label, _text(rng, pools[label], 1, 3))
        elif kind == "other":
            col = int(rng.integers(0, n_cols))
            label = labels.outside
            place(row, col, 1, label, _text(rng, pools[label], 1, 2))
        else:
            multi = rng.random() < spec.one_to_many_frac
            if multi and n_cols < 3:
                raise GenerationError(f"document {index}: one-to-many field needs >= 3 columns, grid has {n_cols}")
            k = int(rng.integers(2, n_cols)) if multi else 1
            q = place(row, 0, 1, "QUESTION", _text(rng, pools["QUESTION"], 1, 2))
            span = 1 if k > 1 else n_cols - 1
            for j in range(k):
                label = "ANSWER"
                if "ANSWERNUM" in labels.names and rng.random() < spec.answernum_frac:
                    label = "ANSWERNUM"
                a = place(row, 1 + j, span, label, _text(rng, pools[label], 1, 3))
                relations.append(Relation(q, a))

    img = PageImage(f"syn_{spec.seed}_{index:05d}.png", page_w, page_h)
    doc = Document(f"syn-{spec.seed}-{index:05d}", tuple(cells), tuple(relations), img, spec.lang, spec.split)
    problems = validate(doc, labels)
    if problems:
        raise GenerationError(f"document {index}: generated invalid document: {problems[0]}")
    return doc


def generate(spec: SynSpec) -> list[Document]:
    """Generate ``spec.num_docs`` documents; identical specs give identical output."""
    lo_needed = spec.fields[0] * 2 + (1 if spec.header_prob >= 1.0 else 0)
    if lo_needed > spec.rows[1] * spec.cols[1]:
        raise GenerationError(
            f"at least {lo_needed} cells requested but a {spec.rows[1]}x{spec.cols[1]} grid holds {spec.rows[1] * spec.cols[1]}"
        )
    return [_generate_one(spec, i) for i in range(spec.num_docs)]


MULTIPLICITY_BUCKETS = ("one-to-one", "one-to-two", "one-to-three", "one-to-many")


@dataclass
class CorpusStats:
    label_counts: dict[str, int]
    multiplicity: dict[str, int]  # relations bucketed by their head's out-degree
    num_docs: int
    num_relations: int


def corpus_stats(docs, labels: LabelSet | None = None) -> CorpusStats:
    names = labels.names if labels is not None else None
    counts: Counter[str] = Counter()
    hist = {b: 0 for b in MULTIPLICITY_BUCKETS}
    n_rel = 0
    for doc in docs:
        counts.update(c.label for c in doc.cells)
        degree = Counter(r.head_id for r in doc.relations)
        for rel in doc.relations:
            k = degree[rel.head_id]
            hist[MULTIPLICITY_BUCKETS[min(k, 4) - 1]] += 1
            n_rel += 1
    if names is None:
        names = tuple(sorted(counts))
    label_counts = {n: counts.get(n, 0) for n in names}
    return CorpusStats(label_counts, hist, len(docs), n_rel)


def one_to_many_fraction(docs) -> float:
    """Share of head cells linked to more than one tail."""
    heads = multi = 0
    for doc in docs:
        degree = Counter(r.head_id for r in doc.relations)
        heads += len(degree)
        multi += sum(1 for k in degree.values() if k > 1)
    return multi / heads if heads else 0.0
