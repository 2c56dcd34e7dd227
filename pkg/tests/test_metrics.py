import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from formlink import corpus
from formlink.corpus import XFUND_LABELS
from formlink.metrics import (
    MetricsReport,
    bio_micro_f1,
    cell_accuracy,
    evaluate,
    extract_spans,
    per_label_prf,
    prf_from_counts,
    re_prf1,
)
from formlink.model import DocPrediction

from conftest import FIXTURES


def brute_f1(pred, gold):
    pred, gold = set(pred), set(gold)
    tp = sum(1 for x in pred if x in gold)
    p = tp / len(pred) if pred else 1.0
    r = tp / len(gold) if gold else 1.0
    if not pred and not gold:
        return 1.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


class TestCellAccuracy:
    def test_nine_of_ten(self):
        gold = ["QUESTION"] * 10
        ca = cell_accuracy(["QUESTION"] * 9 + ["ANSWER"], gold)
        assert (ca.accuracy, ca.ccd, ca.tcc, ca.degenerate) == (0.9, 9, 10, False)

    def test_empty(self):
        ca = cell_accuracy([], [])
        assert ca.accuracy == 1.0 and ca.degenerate

    def test_none_never_correct(self):
        assert cell_accuracy([None, "A"], ["A", "A"]).accuracy == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cell_accuracy(["A"], [])


class TestRelationScores:
    def test_two_thirds(self):
        prf = re_prf1({("d", 0, 1), ("d", 2, 3), ("d", 4, 5)}, {("d", 0, 1), ("d", 2, 3), ("d", 6, 7)})
        assert (prf.tp, prf.fp, prf.fn) == (2, 1, 1)
        assert prf.precision == pytest.approx(2 / 3) and prf.recall == pytest.approx(2 / 3)
        assert prf.f1 == pytest.approx(2 / 3)

    def test_empty_prediction(self):
        prf = re_prf1(set(), {(0, 1)})
        assert (prf.precision, prf.recall, prf.f1) == (1.0, 0.0, 0.0)

    def test_both_empty(self):
        assert re_prf1([], []).f1 == 1.0

    def test_document_scoping(self):
        assert re_prf1({("a", 0, 1)}, {("b", 0, 1)}).tp == 0

    @settings(max_examples=200, deadline=None)
    @given(st.sets(st.tuples(st.integers(0, 4), st.integers(0, 4))), st.sets(st.tuples(st.integers(0, 4), st.integers(0, 4))))
    def test_matches_brute_force(self, pred, gold):
        prf = re_prf1(pred, gold)
        assert prf.f1 == pytest.approx(brute_f1(pred, gold), abs=1e-12)
        assert min(prf.precision, prf.recall) - 1e-12 <= prf.f1 <= max(prf.precision, prf.recall) + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=5))
    def test_micro_counts_add(self, parts):
        total = prf_from_counts(*map(sum, zip(*parts)))
        pooled_pred, pooled_gold = set(), set()
        for k, (tp, fp, fn) in enumerate(parts):
            pooled_pred |= {(k, "tp", i) for i in range(tp)} | {(k, "fp", i) for i in range(fp)}
            pooled_gold |= {(k, "tp", i) for i in range(tp)} | {(k, "fn", i) for i in range(fn)}
        assert re_prf1(pooled_pred, pooled_gold) == total


class TestBio:
    def test_spans(self):
        assert extract_spans(["B-Q", "I-Q", "O", "B-A", "B-A", "I-A"]) == [(0, 2, "Q"), (3, 4, "A"), (4, 6, "A")]

    def test_orphan_inside_starts_span(self):
        assert extract_spans(["O", "I-Q", "I-Q", "I-A"]) == [(1, 3, "Q"), (3, 4, "A")]

    def test_partial_span_scores_zero(self):
        assert bio_micro_f1([["B-Q", "O"]], [["B-Q", "I-Q"]]).f1 == 0.0

    def test_exact(self):
        assert bio_micro_f1([["B-Q", "I-Q", "B-A"]], [["B-Q", "I-Q", "B-A"]]).f1 == 1.0

    def test_misaligned(self):
        with pytest.raises(ValueError):
            bio_micro_f1([["O"]], [["O", "O"]])


def test_per_label():
    out = per_label_prf(["Q", "Q", "A"], ["Q", "A", "A"], ["Q", "A", "O"])
    assert (out["Q"].tp, out["Q"].fp, out["Q"].fn) == (1, 1, 0)
    assert (out["A"].tp, out["A"].fp, out["A"].fn) == (1, 0, 1)
    assert out["O"].f1 == 1.0


class TestEvaluate:
    def setup_method(self):
        self.doc = corpus.parse_dataset((FIXTURES / "funsd_style.json").read_text())[0]
        self.td = corpus.tokenize(self.doc, corpus.build_vocab([self.doc]))

    def perfect(self, **over):
        d = self.doc
        kw = dict(
            doc_id=d.id,
            cell_ids=tuple(c.id for c in d.cells),
            labels=[c.label for c in d.cells],
            confidence=[1.0] * len(d.cells),
            relations=[(r.head_id, r.tail_id, 0.9) for r in d.relations],
            token_tags=list(self.td.tags),
        )
        kw.update(over)
        return DocPrediction(**kw)

    def test_perfect(self):
        rep = evaluate([self.doc], [self.td], [self.perfect()], XFUND_LABELS)
        assert rep.cell_accuracy == 1.0 and rep.re.f1 == 1.0 and rep.bio_micro_f1.f1 == 1.0
        assert rep.extra["token_accuracy"] == 1.0

    def test_threshold_is_strict(self):
        rels = [(r.head_id, r.tail_id, 0.5) for r in self.doc.relations]
        rep = evaluate([self.doc], [self.td], [self.perfect(relations=rels)], XFUND_LABELS)
        assert rep.re.tp == 0 and rep.re.precision == 1.0 and rep.re.recall == 0.0

    def test_mismatched_document(self):
        with pytest.raises(ValueError):
            evaluate([self.doc], [self.td], [self.perfect(doc_id="other")], XFUND_LABELS)

    def test_report_round_trip(self):
        rep = evaluate([self.doc], [self.td], [self.perfect()], XFUND_LABELS)
        text = rep.to_json()
        again = MetricsReport.from_dict(json.loads(text))
        assert again == rep and again.to_json() == text
        assert list(json.loads(text)) == ["ser", "re", "extra"]
