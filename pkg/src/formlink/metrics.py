"""Cell accuracy, relation precision/recall/F1 and BIO span micro-F1.

Conventions for empty denominators: precision is 1 with no predictions,
recall is 1 with no gold items, F1 is 1 when both sets are empty and 0 when
precision + recall is 0.  Cell accuracy over zero cells is 1 and flagged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Sequence

logger = logging.getLogger(__name__)


@dataclass
class PRF:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def prf_from_counts(tp: int, fp: int, fn: int) -> PRF:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    if tp + fp == 0 and tp + fn == 0:
        f1 = 1.0
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return PRF(tp, fp, fn, precision, recall, f1)


def re_prf1(pred: Iterable[Hashable], gold: Iterable[Hashable]) -> PRF:
    """Set-based relation scores; pairs should carry a document key to scope them."""
    pred, gold = set(pred), set(gold)
    return prf_from_counts(len(pred & gold), len(pred - gold), len(gold - pred))


@dataclass
class CellAccuracy:
    accuracy: float
    ccd: int
    tcc: int
    degenerate: bool = False


def cell_accuracy(pred: Sequence, gold: Sequence) -> CellAccuracy:
    """Correct cells over total cells; a ``None`` prediction never counts as correct."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold cells")
    tcc = len(gold)
    ccd = sum(1 for p, g in zip(pred, gold) if p is not None and p == g)
    if tcc == 0:
        return CellAccuracy(1.0, 0, 0, degenerate=True)
    return CellAccuracy(ccd / tcc, ccd, tcc)


def extract_spans(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """Maximal ``B-X (I-X)*`` runs as (start, end exclusive, X).

    An ``I-X`` that does not continue an open X span starts a new span.
    """
    spans = []
    start, cls = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag.startswith("I-") and cls == tag[2:]:
            continue
        if cls is not None:
            spans.append((start, i, cls))
            start, cls = None, None
        if tag.startswith("B-"):
            start, cls = i, tag[2:]
        elif tag.startswith("I-"):
            logger.debug("bio: %s at %d without a matching B- tag", tag, i)
            start, cls = i, tag[2:]
    return spans


def bio_micro_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> PRF:
    tp = fp = fn = 0
    for p, g in zip(pred, gold, strict=True):
        if len(p) != len(g):
            raise ValueError("predicted and gold tag sequences must align")
        ps, gs = set(extract_spans(p)), set(extract_spans(g))
        tp += len(ps & gs)
        fp += len(ps - gs)
        fn += len(gs - ps)
    return prf_from_counts(tp, fp, fn)


def per_label_prf(pred: Sequence, gold: Sequence, names: Sequence[str]) -> dict[str, PRF]:
    out = {}
    for name in names:
        tp = sum(1 for p, g in zip(pred, gold) if p == name and g == name)
        fp = sum(1 for p, g in zip(pred, gold) if p == name and g != name)
        fn = sum(1 for p, g in zip(pred, gold) if p != name and g == name)
        out[name] = prf_from_counts(tp, fp, fn)
    return out


@dataclass
class MetricsReport:
    cell_accuracy: float
    ccd: int
    tcc: int
    degenerate: bool
    bio_micro_f1: PRF
    per_label: dict[str, PRF]
    re: PRF
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ser": {
                "cell_accuracy": self.cell_accuracy,
                "ccd": self.ccd,
                "tcc": self.tcc,
                "degenerate": self.degenerate,
                "bio_micro_f1": asdict(self.bio_micro_f1),
                "per_label": {k: asdict(v) for k, v in self.per_label.items()},
            },
            "re": asdict(self.re),
            "extra": self.extra,
        }

    def to_json(self) -> str:
        """Canonical JSON: insertion-ordered keys as above, two-space indent."""
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        ser = d["ser"]
        return cls(
            cell_accuracy=ser["cell_accuracy"],
            ccd=ser["ccd"],
            tcc=ser["tcc"],
            degenerate=ser["degenerate"],
            bio_micro_f1=PRF(**ser["bio_micro_f1"]),
            per_label={k: PRF(**v) for k, v in ser["per_label"].items()},
            re=PRF(**d["re"]),
            extra=d.get("extra", {}),
        )


def evaluate(docs, tdocs, predictions, labels, threshold: float = 0.5) -> MetricsReport:
    """Score document predictions against the gold documents they came from."""
    pred_cells, gold_cells = [], []
    pred_pairs, gold_pairs = set(), set()
    pred_tags, gold_tags = [], []
    bio = labels.bio_tags
    tok_total = tok_correct = 0
    for doc, tdoc, p in zip(docs, tdocs, predictions, strict=True):
        if p.doc_id != doc.id:
            raise ValueError(f"prediction for {p.doc_id!r} does not match document {doc.id!r}")
        gold_cells += [c.label for c in doc.cells]
        pred_cells += list(p.labels)
        gold_pairs |= {(doc.id, r.head_id, r.tail_id) for r in doc.relations}
        pred_pairs |= {(doc.id, h, t) for h, t in p.predicted_pairs(threshold)}
        gold_tags.append([bio[t] for t in tdoc.tags])
        pred_tags.append([bio[t] for t in p.token_tags])
        tok_total += len(tdoc)
        tok_correct += sum(1 for a, b in zip(p.token_tags, tdoc.tags) if a == b)
    ca = cell_accuracy(pred_cells, gold_cells)
    return MetricsReport(
        cell_accuracy=ca.accuracy,
        ccd=ca.ccd,
        tcc=ca.tcc,
        degenerate=ca.degenerate,
        bio_micro_f1=bio_micro_f1(pred_tags, gold_tags),
        per_label=per_label_prf(pred_cells, gold_cells, labels.names),
        re=re_prf1(pred_pairs, gold_pairs),
        extra={"re_threshold": threshold, "token_accuracy": tok_correct / tok_total if tok_total else 1.0},
    )
