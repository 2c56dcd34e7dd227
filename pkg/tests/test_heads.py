import logging
import math
from fractions import Fraction

import numpy as np
import pytest

from formlink import autodiff as ad
from formlink import corpus
from formlink.corpus import INDFORM_LABELS, XFUND_LABELS
from formlink.heads import (
    HeadConfig,
    JointHeads,
    SoftLabelSchedule,
    alpha,
    bilstm_decode,
    blend_label_embedding,
    candidate_pairs,
    entity_vectors,
    joint_loss,
    pair_scores,
    pair_targets,
    ser_forward,
    soft_label_embedding,
)

from conftest import make_doc


def heads(d_model=8, labels=XFUND_LABELS, seed=0, **cfg):
    store = ad.ParameterStore(np.float64, seed=seed)
    cfg.setdefault("d_label", 4)
    cfg.setdefault("d_biaff", 6)
    cfg.setdefault("dropout", 0.0)
    return JointHeads(d_model, labels, HeadConfig(**cfg), store), store


def seven_token_doc():
    doc = make_doc(
        [
            (0, "Full Name", "QUESTION", (0, 0, 10, 10)),
            (1, "Jane Q Doe", "ANSWER", (20, 0, 40, 10)),
            (2, "page two", "OTHER", (0, 50, 10, 60)),
        ],
        [(0, 1)],
    )
    vocab = corpus.build_vocab([doc])
    return doc, corpus.tokenize(doc, vocab)


class TestSer:
    def test_shapes(self):
        _, td = seven_token_doc()
        h, _ = heads()
        out = ser_forward(ad.constant(np.random.default_rng(0).normal(size=(7, 8))), td, h)
        assert out.token_logits.shape == (7, 7)
        assert out.predictions.shape == (3,)
        assert out.cell_logits.shape == (3, 4)

    def test_identical_rows_give_mapped_token_logits(self):
        _, td = seven_token_doc()
        h, _ = heads()
        row = np.random.default_rng(1).normal(size=8)
        out = ser_forward(ad.constant(np.tile(row, (7, 1))), td, h)
        tok = out.token_logits.data[0]
        np.testing.assert_array_equal(out.cell_logits.data[0], tok @ XFUND_LABELS.bio_to_label_matrix())

    def test_forced_b_question(self):
        _, td = seven_token_doc()
        h, store = heads()
        store["heads.ser.mlp.w"].data[...] = 0.0
        store["heads.ser.mlp.b"].data[...] = 0.0
        store["heads.ser.mlp.b"].data[XFUND_LABELS.bio_tags.index("B-QUESTION")] = 10.0
        out = ser_forward(ad.constant(np.random.default_rng(2).normal(size=(7, 8))), td, h)
        assert [XFUND_LABELS.names[p] for p in out.predictions] == ["QUESTION"] * 3

    def test_empty_cell_is_unclassified(self, caplog):
        doc = make_doc([(0, "a", "QUESTION", (0, 0, 1, 1)), (1, "", "ANSWER", (0, 0, 1, 1))])
        td = corpus.tokenize(doc, corpus.build_vocab([doc]))
        h, _ = heads()
        with caplog.at_level(logging.WARNING):
            out = ser_forward(ad.constant(np.ones((1, 8))), td, h)
        assert out.predictions.tolist()[1] == -1 and "without tokens" in caplog.text

    def test_row_mismatch(self):
        _, td = seven_token_doc()
        h, _ = heads()
        with pytest.raises(ad.ShapeError):
            ser_forward(ad.constant(np.ones((6, 8))), td, h)


class TestSoftLabel:
    def test_uniform_logits(self):
        table = np.random.default_rng(0).normal(size=(4, 5))
        out = soft_label_embedding(np.zeros((1, 4)), table)
        np.testing.assert_allclose(out[0], table.mean(axis=0) / 4, atol=1e-15)

    def test_saturated(self):
        table = np.random.default_rng(0).normal(size=(4, 5))
        out = soft_label_embedding(np.array([[1e6, -1e6, -1e6, -1e6]]), table)
        np.testing.assert_allclose(out[0], table[0] / 4, atol=1e-9)

    def test_single_class(self):
        table = np.random.default_rng(0).normal(size=(1, 5))
        out = soft_label_embedding(np.array([[3.0]]), table)
        np.testing.assert_array_equal(out[0], table[0])

    def test_tensor_route_matches_array_route(self):
        r = np.random.default_rng(3)
        logits, table = r.normal(size=(3, 4)), r.normal(size=(4, 6))
        t = soft_label_embedding(ad.constant(logits), ad.Parameter("t", table))
        np.testing.assert_allclose(t.data, soft_label_embedding(logits, table), atol=1e-15)

    def test_unfaithful_skips_division(self):
        table = np.random.default_rng(0).normal(size=(4, 5))
        a = soft_label_embedding(np.zeros((1, 4)), table, faithful=False)
        np.testing.assert_allclose(a[0], table.mean(axis=0), atol=1e-15)

    def test_label_count_mismatch(self):
        with pytest.raises(ad.ShapeError):
            soft_label_embedding(np.zeros((1, 3)), np.zeros((4, 2)))


class TestSchedule:
    S = SoftLabelSchedule(30, 10)

    def test_boundary(self):
        assert alpha(30, self.S) == 0.0

    def test_midpoint(self):
        assert alpha(35, self.S) == 0.5

    def test_cap(self):
        assert alpha(100, self.S) == 1.0

    def test_before_start(self):
        assert alpha(0, self.S) == 0.0

    def test_disabled(self):
        assert alpha(100, SoftLabelSchedule(30, 10, enabled=False)) == 0.0

    def test_non_decreasing_and_beta(self):
        vals = [alpha(ep, self.S) for ep in range(101)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert all(v == 1.0 for v in vals[40:])
        assert all(v + (1 - v) == 1.0 for v in vals)

    def test_exact_rational_values(self):
        for ep in range(101):
            expected = min(Fraction(1), max(Fraction(0), Fraction(ep - 30, 10)))
            assert alpha(ep, self.S) == float(expected)

    @pytest.mark.parametrize("kwargs", [dict(ep_start=-1), dict(ep_warm=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SoftLabelSchedule(**kwargs)


class TestBlend:
    r = np.random.default_rng(9)
    hl, sl = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    S = SoftLabelSchedule(30, 10)

    def test_hard_branch_bitwise(self):
        for ep in (0, 10, 30):
            assert blend_label_embedding(self.hl, self.sl, ep, self.S) is self.hl
        assert blend_label_embedding(self.hl, self.sl, None, self.S) is self.hl
        assert blend_label_embedding(self.hl, self.sl, 90, SoftLabelSchedule(30, 10, False)) is self.hl

    def test_alpha_one(self):
        np.testing.assert_array_equal(blend_label_embedding(self.hl, self.sl, 40, self.S), self.sl)

    def test_midpoint(self):
        np.testing.assert_allclose(blend_label_embedding(self.hl, self.sl, 35, self.S), (self.hl + self.sl) / 2, atol=1e-15)

    def test_on_segment(self):
        for ep in range(31, 41):
            le = blend_label_embedding(self.hl, self.sl, ep, self.S)
            lo, hi = np.minimum(self.hl, self.sl), np.maximum(self.hl, self.sl)
            assert (le >= lo - 1e-15).all() and (le <= hi + 1e-15).all()

    def test_tensor_route(self):
        t = blend_label_embedding(ad.constant(self.hl), ad.constant(self.sl), 33, self.S)
        np.testing.assert_allclose(t.data, blend_label_embedding(self.hl, self.sl, 33, self.S), atol=1e-15)


class TestEntities:
    def test_one_token_cell_pools_to_its_row(self):
        doc = make_doc([(0, "a", "QUESTION", (0, 0, 1, 1)), (1, "b c", "ANSWER", (0, 0, 1, 1))])
        td = corpus.tokenize(doc, corpus.build_vocab([doc]))
        h, _ = heads()
        H = ad.constant(np.random.default_rng(0).normal(size=(3, 8)))
        le = h.hard_label_embedding(td.cell_labels)
        e = entity_vectors(H, td, le, h)
        np.testing.assert_array_equal(e.data[0, :8], h.re_hidden(H).data[0])
        np.testing.assert_array_equal(e.data[:, 8:], le.data)

    def test_dimension(self):
        _, td = seven_token_doc()
        h, _ = heads(d_model=64, d_label=32)
        e = entity_vectors(ad.constant(np.zeros((7, 64))), td, h.hard_label_embedding(td.cell_labels), h)
        assert e.shape == (3, 96)

    def test_duplicate_cells_identical(self):
        doc = make_doc([(0, "x y", "QUESTION", (0, 0, 5, 5)), (1, "x y", "QUESTION", (0, 0, 5, 5))])
        td = corpus.tokenize(doc, corpus.build_vocab([doc]))
        h, _ = heads()
        row = np.random.default_rng(0).normal(size=(2, 8))
        H = ad.constant(np.vstack([row, row]))
        e = entity_vectors(H, td, h.hard_label_embedding(td.cell_labels), h).data
        assert np.array_equal(e[0], e[1])

    def test_duplicating_tokens_keeps_mean(self):
        h, _ = heads()
        base = make_doc([(0, "a b", "QUESTION", (0, 0, 1, 1))])
        dup = make_doc([(0, "a b a b", "QUESTION", (0, 0, 1, 1))])
        vocab = corpus.build_vocab([dup])
        rows = np.random.default_rng(0).normal(size=(2, 8))
        e1 = entity_vectors(ad.constant(rows), corpus.tokenize(base, vocab), h.hard_label_embedding([1]), h)
        e2 = entity_vectors(ad.constant(np.vstack([rows, rows])), corpus.tokenize(dup, vocab), h.hard_label_embedding([1]), h)
        np.testing.assert_allclose(e1.data, e2.data, atol=1e-15)


class TestDecoder:
    def test_single_entity(self):
        h, _ = heads()
        out = bilstm_decode(ad.constant(np.ones((1, 12))), h)
        assert out.shape == (1, 8)

    def test_empty(self):
        h, _ = heads()
        assert bilstm_decode(ad.constant(np.zeros((0, 12))), h).shape == (0, 8)

    def test_zero_weights(self):
        h, store = heads()
        for name in store.names():
            if ".lstm." in name:
                store[name].data[...] = 0.0
        out = bilstm_decode(ad.constant(np.random.default_rng(0).normal(size=(4, 12))), h)
        assert not out.data.any()

    def test_reversal_swaps_directions(self):
        h, store = heads()
        x = np.random.default_rng(0).normal(size=(5, 12))
        out = bilstm_decode(ad.constant(x), h).data
        for part in ("w_ih", "w_hh", "b"):
            f, b = store[f"heads.lstm.fwd.{part}"], store[f"heads.lstm.bwd.{part}"]
            f.data, b.data = b.data.copy(), f.data.copy()
        rev = bilstm_decode(ad.constant(x[::-1].copy()), h).data
        half = 4
        np.testing.assert_allclose(rev[:, :half], out[::-1, half:], atol=1e-14)
        np.testing.assert_allclose(rev[:, half:], out[::-1, :half], atol=1e-14)

    def test_batched_runs_match_single_documents(self):
        h, _ = heads()
        r = np.random.default_rng(4)
        a, b = r.normal(size=(3, 12)), r.normal(size=(5, 12))
        packed = h.decode(ad.constant(np.vstack([a, b])), [3, 5]).data
        np.testing.assert_allclose(packed[:3], bilstm_decode(ad.constant(a), h).data, atol=1e-14)
        np.testing.assert_allclose(packed[3:], bilstm_decode(ad.constant(b), h).data, atol=1e-14)

    def test_no_decoder_passthrough(self):
        h, store = heads(use_decoder=False)
        x = ad.constant(np.ones((2, 12)))
        assert h.decode(x, [2]) is x
        assert not any(".lstm." in n for n in store.names())


class TestPairs:
    def test_candidates(self):
        assert candidate_pairs(["QUESTION", "ANSWER", "QUESTION", "OTHER"], XFUND_LABELS) == [(0, 1), (2, 1)]

    def test_no_heads(self):
        assert candidate_pairs(["ANSWER", "OTHER"], XFUND_LABELS) == []

    def test_answernum_tails(self):
        assert candidate_pairs(["QUESTION", "ANSWER", "ANSWERNUM"], INDFORM_LABELS) == [(0, 1), (0, 2)]

    def test_zero_biaffine(self):
        h, store = heads()
        for n in ("U", "W", "b"):
            store[f"heads.biaffine.{n}"].data[...] = 0.0
        scores = pair_scores(ad.constant(np.random.default_rng(0).normal(size=(3, 8))), ["QUESTION", "ANSWER", "ANSWER"], h)
        assert not scores.logits.data.any()
        np.testing.assert_array_equal(scores.probabilities(), [0.5, 0.5])

    def test_scalar_biaffine(self):
        h, store = heads(d_biaff=1)
        store["heads.biaffine.U"].data[...] = np.array([0.0, 1.0]).reshape(1, 2, 1)
        store["heads.biaffine.W"].data[...] = 0.0
        store["heads.biaffine.b"].data[...] = 0.0
        out = h.biaffine(ad.constant([[2.0]]), ad.constant([[3.0]]))
        assert out.data.tolist() == [[0.0, 6.0]]

    def test_biaffine_matches_einsum(self):
        h, store = heads()
        r = np.random.default_rng(5)
        hh, ht = r.normal(size=(4, 6)), r.normal(size=(4, 6))
        U, W, b = (store[f"heads.biaffine.{n}"].data for n in ("U", "W", "b"))
        ref = np.einsum("pi,icj,pj->pc", hh, U, ht) + np.concatenate([hh, ht], 1) @ W.T + b
        np.testing.assert_allclose(h.biaffine(ad.constant(hh), ad.constant(ht)).data, ref, atol=1e-12)

    def test_bilinear_superposition(self):
        h, store = heads()
        store["heads.biaffine.W"].data[...] = 0.0
        store["heads.biaffine.b"].data[...] = 0.0
        r = np.random.default_rng(6)
        a, b, t = r.normal(size=(1, 6)), r.normal(size=(1, 6)), r.normal(size=(1, 6))
        s = lambda x, y: h.biaffine(ad.constant(x), ad.constant(y)).data
        np.testing.assert_allclose(s(2 * a + 3 * b, t), 2 * s(a, t) + 3 * s(b, t), atol=1e-9)
        np.testing.assert_allclose(s(t, 2 * a - b), 2 * s(t, a) - s(t, b), atol=1e-9)

    def test_order_independence(self):
        h, _ = heads()
        d = ad.constant(np.random.default_rng(7).normal(size=(4, 8)))
        fwd = h.score_pairs(d, np.array([0, 0, 2]), np.array([1, 3, 1])).data
        rev = h.score_pairs(d, np.array([2, 0, 0]), np.array([1, 3, 1])).data
        np.testing.assert_allclose(rev, fwd[[2, 1, 0]], atol=1e-15)

    def test_targets_warn_on_unreachable_gold(self, caplog):
        with caplog.at_level(logging.WARNING):
            t = pair_targets([(0, 1), (2, 1)], [(0, 1), (1, 0)], "d")
        assert t.tolist() == [1, 0] and "outside the candidate set" in caplog.text


class TestJointLoss:
    def test_uniform(self):
        out = joint_loss(ad.constant(np.zeros((5, 7))), np.zeros(5, int), ad.constant(np.zeros((3, 2))), np.array([1, 0, 0]))
        ser, rel, total = out.values()
        assert abs(ser - math.log(7)) < 1e-12 and abs(rel - math.log(2)) < 1e-12
        assert abs(total - (math.log(7) + math.log(2))) < 1e-9

    def test_saturated(self):
        tags = np.array([0, 3, 4])
        logits = np.full((3, 7), -50.0)
        logits[np.arange(3), tags] = 50.0
        pl = np.array([[50.0, -50.0], [-50.0, 50.0]])
        out = joint_loss(ad.constant(logits), tags, ad.constant(pl), np.array([0, 1]))
        assert out.values()[2] < 1e-3

    def test_single_addition(self):
        r = np.random.default_rng(0)
        out = joint_loss(ad.constant(r.normal(size=(4, 7))), np.array([0, 1, 2, 3]), ad.constant(r.normal(size=(2, 2))), np.array([0, 1]))
        assert float(out.total.data) == float(out.loss_ser.data + out.loss_re.data)

    def test_no_pairs(self):
        out = joint_loss(ad.constant(np.zeros((2, 7))), np.zeros(2, int), ad.constant(np.zeros((0, 2))), np.zeros(0, int))
        assert out.values()[1] == 0.0

    def test_padding_masked(self):
        z = np.random.default_rng(0).normal(size=(4, 7))
        full = joint_loss(ad.constant(z[:2]), np.array([1, 2]), ad.constant(np.zeros((0, 2))), np.zeros(0, int))
        padded = joint_loss(ad.constant(z), np.array([1, 2, 0, 0]), ad.constant(np.zeros((0, 2))), np.zeros(0, int), token_weight=np.array([1, 1, 0, 0]))
        assert full.values()[0] == pytest.approx(padded.values()[0], abs=1e-15)


def test_parameter_shapes():
    h, store = heads(d_model=64, d_label=32, d_biaff=64)
    assert store["heads.label_emb"].shape == (4, 32)
    assert store["heads.biaffine.U"].shape == (64, 2, 64)
    assert store["heads.biaffine.W"].shape == (2, 128)
    assert store["heads.lstm.fwd.w_ih"].shape == (128, 96)
    bias = store["heads.lstm.fwd.b"].data
    assert bias[32:64].tolist() == [1.0] * 32 and not bias[:32].any() and not bias[64:].any()
