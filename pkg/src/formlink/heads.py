"""Entity classification and relation heads on top of token hidden states.

SER: ``H_ser = tanh(Dense_ser(H))``, token BIO logits ``MLP_ser(H_ser)``;
cells are classified by averaging their token logits and folding the BIO
channels into label space.

RE: ``H_re = tanh(Dense_re(H))`` is mean-pooled per cell and concatenated
with a label embedding, unified by a bidirectional LSTM over cells in reading
order, projected by separate head/tail MLPs and scored pairwise by a biaffine
form producing (no-relation, relation) logits.

During training the label embedding starts as a lookup of the gold label and
is blended toward a softmax-weighted mixture of the label table driven by the
live SER logits, with weight ``alpha`` ramping linearly after ``ep_start``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import LabelSet, TokenizedDocument

logger = logging.getLogger(__name__)


@dataclass
class HeadConfig:
    d_label: int = 32
    d_biaff: int = 64
    use_decoder: bool = True
    faithful_eq10: bool = True  # divide the soft label embedding by the label count
    dropout: float = 0.1


@dataclass(frozen=True)
class SoftLabelSchedule:
    ep_start: int = 30
    ep_warm: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.ep_start < 0 or self.ep_warm < 1:
            raise ValueError(f"need ep_start >= 0 and ep_warm >= 1, got {self.ep_start}, {self.ep_warm}")


def alpha(ep: float, s: SoftLabelSchedule) -> float:
    """Soft-label weight: ``clamp(min(1, (ep - ep_start) / ep_warm), 0, 1)``; 0 when disabled."""
    if not s.enabled:
        return 0.0
    return min(1.0, max(0.0, min(1.0, (ep - s.ep_start) / s.ep_warm)))


def blend_label_embedding(le_hl, le_sl, ep: float | None, s: SoftLabelSchedule):
    """``le_hl`` while ``ep <= ep_start`` (or disabled), else ``a*le_sl + (1-a)*le_hl``.

    Works on numpy arrays or tensors.  ``ep=None`` means inference: hard only.
    """
    if ep is None or not s.enabled or ep <= s.ep_start:
        return le_hl
    a = alpha(ep, s)
    b = 1.0 - a
    if isinstance(le_hl, ad.Tensor) or isinstance(le_sl, ad.Tensor):
        hl = le_hl if isinstance(le_hl, ad.Tensor) else ad.constant(le_hl)
        sl = le_sl if isinstance(le_sl, ad.Tensor) else ad.constant(le_sl)
        return ad.scale(sl, a) + ad.scale(hl, b)
    return a * np.asarray(le_sl) + b * np.asarray(le_hl)


def candidate_pairs(label_names: Sequence[str], labels: LabelSet) -> list[tuple[int, int]]:
    """All ordered (i, j), i != j, with i head-capable and j tail-capable."""
    heads = [i for i, n in enumerate(label_names) if n in labels.head_capable]
    tails = [j for j, n in enumerate(label_names) if n in labels.tail_capable]
    return [(i, j) for i in heads for j in tails if i != j]


@dataclass
class SerOutput:
    token_logits: ad.Tensor  # (T, num_tags)
    cell_logits: ad.Tensor  # (n_cells, num_labels)
    predictions: np.ndarray  # (n_cells,) label ids, -1 for cells without tokens
    classified: np.ndarray  # (n_cells,) bool

    def __post_init__(self):
        ok = self.classified
        if ok.any():
            assert np.array_equal(self.cell_logits.data[ok].argmax(axis=1), self.predictions[ok])


@dataclass
class PairScores:
    pairs: list[tuple[int, int]]  # positions into the document's cells
    logits: ad.Tensor  # (P, 2)

    def probabilities(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True))[:, 1] if len(self.pairs) else np.zeros(0)


@dataclass
class LossBreakdown:
    loss_ser: ad.Tensor
    loss_re: ad.Tensor
    total: ad.Tensor

    def values(self) -> tuple[float, float, float]:
        return float(self.loss_ser.data), float(self.loss_re.data), float(self.total.data)


class JointHeads:
    """Parameters and kernels for both task heads."""

    def __init__(self, d_model: int, labels: LabelSet, config: HeadConfig, store: ad.ParameterStore, prefix: str = "heads"):
        if d_model % 2:
            raise ValueError("d_model must be even for the bidirectional decoder")
        self.d_model = d_model
        self.labels = labels
        self.config = config
        self.store = store
        self.prefix = prefix
        self.bio_to_label = labels.bio_to_label_matrix().astype(store.dtype)
        n_tags, n_labels = len(labels.bio_tags), len(labels.names)
        d, k, p = d_model, config.d_biaff, prefix
        store.uniform(f"{p}.ser.dense.w", (d, d))
        store.zeros(f"{p}.ser.dense.b", (d,))
        store.uniform(f"{p}.ser.mlp.w", (n_tags, d))
        store.zeros(f"{p}.ser.mlp.b", (n_tags,))
        store.uniform(f"{p}.re.dense.w", (d, d))
        store.zeros(f"{p}.re.dense.b", (d,))
        store.uniform(f"{p}.label_emb", (n_labels, config.d_label))
        d_in = d + config.d_label
        if config.use_decoder:
            hidden = d // 2
            for direction in ("fwd", "bwd"):
                store.uniform(f"{p}.lstm.{direction}.w_ih", (4 * hidden, d_in))
                store.uniform(f"{p}.lstm.{direction}.w_hh", (4 * hidden, hidden))
                bias = np.zeros(4 * hidden)
                bias[hidden : 2 * hidden] = 1.0  # forget gate
                store.add(f"{p}.lstm.{direction}.b", bias)
            d_in = d
        for side in ("head", "tail"):
            store.uniform(f"{p}.{side}.l1.w", (k, d_in))
            store.zeros(f"{p}.{side}.l1.b", (k,))
            store.uniform(f"{p}.{side}.l2.w", (k, k))
            store.zeros(f"{p}.{side}.l2.b", (k,))
        store.uniform(f"{p}.biaffine.U", (k, 2, k))
        store.uniform(f"{p}.biaffine.W", (2, 2 * k))
        store.zeros(f"{p}.biaffine.b", (2,))

    def p(self, name: str) -> ad.Parameter:
        return self.store[f"{self.prefix}.{name}"]

    @property
    def num_labels(self) -> int:
        return len(self.labels.names)

    # -- SER --------------------------------------------------------------

    def ser_hidden(self, H: ad.Tensor) -> ad.Tensor:
        return ad.tanh(ad.affine(H, self.p("ser.dense.w"), self.p("ser.dense.b")))

    def ser_logits(self, H_ser: ad.Tensor) -> ad.Tensor:
        return ad.affine(H_ser, self.p("ser.mlp.w"), self.p("ser.mlp.b"))

    def cell_logits(self, token_logits: ad.Tensor, cell_mask: np.ndarray) -> ad.Tensor:
        """Mean token logits per cell folded from BIO tags into labels."""
        pooled = ad.masked_mean(token_logits, cell_mask)
        return ad.matmul(pooled, ad.constant(self.bio_to_label))

    # -- label embeddings ---------------------------------------------------

    def hard_label_embedding(self, label_ids: np.ndarray) -> ad.Tensor:
        return ad.embedding(self.p("label_emb"), label_ids)

    def soft_label_embedding(self, cell_logits: ad.Tensor) -> ad.Tensor:
        return soft_label_embedding(cell_logits, self.p("label_emb"), faithful=self.config.faithful_eq10)

    # -- RE -----------------------------------------------------------------

    def re_hidden(self, H: ad.Tensor) -> ad.Tensor:
        return ad.tanh(ad.affine(H, self.p("re.dense.w"), self.p("re.dense.b")))

    def decode(self, entities: ad.Tensor, lengths: Sequence[int]) -> ad.Tensor:
        """Bi-LSTM over per-document entity runs packed back to back.

        ``entities`` is (sum(lengths), d_in); the result is (sum(lengths), d_model)
        with forward and backward states concatenated.
        """
        if not self.config.use_decoder:
            return entities
        total = int(sum(lengths))
        if total == 0:
            return ad.constant(np.zeros((0, self.d_model), dtype=self.store.dtype))
        B, n_max = len(lengths), max(lengths)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        fwd_idx = np.zeros((B, n_max), dtype=np.int64)
        bwd_idx = np.zeros((B, n_max), dtype=np.int64)
        for b, (s, n) in enumerate(zip(starts, lengths)):
            if n == 0:
                continue
            steps = np.arange(n_max)
            fwd_idx[b] = s + np.minimum(steps, n - 1)
            bwd_idx[b] = s + np.where(steps < n, n - 1 - steps, 0)
        outs = []
        for direction, idx in (("fwd", fwd_idx), ("bwd", bwd_idx)):
            seq = ad.take(entities, idx.reshape(-1), axis=0)
            seq = ad.reshape(seq, (B, n_max, entities.shape[1]))
            states = self._run_lstm(seq, direction)  # (B, n_max, hidden)
            outs.append(states)
        # gather each entity's step from both directions
        hidden = self.d_model // 2
        rows_f, rows_b = [], []
        for b, (s, n) in enumerate(zip(starts, lengths)):
            for t in range(n):
                rows_f.append(b * n_max + t)
                rows_b.append(b * n_max + (n - 1 - t))
        f = ad.take(ad.reshape(outs[0], (B * n_max, hidden)), rows_f, axis=0)
        r = ad.take(ad.reshape(outs[1], (B * n_max, hidden)), rows_b, axis=0)
        return ad.concat([f, r], axis=-1)

    def _run_lstm(self, seq: ad.Tensor, direction: str) -> ad.Tensor:
        B, n, _ = seq.shape
        hidden = self.d_model // 2
        w_ih, w_hh, bias = (self.p(f"lstm.{direction}.{n_}") for n_ in ("w_ih", "w_hh", "b"))
        h = c = ad.constant(np.zeros((B, hidden), dtype=self.store.dtype))
        steps = []
        for t in range(n):
            h, c = ad.lstm_cell(seq[:, t, :], h, c, w_ih, w_hh, bias)
            steps.append(ad.reshape(h, (B, 1, hidden)))
        return ad.concat(steps, axis=1)

    def _mlp(self, side: str, x: ad.Tensor, training: bool, rng) -> ad.Tensor:
        x = ad.dropout(x, self.config.dropout, rng, training)
        x = ad.relu(ad.affine(x, self.p(f"{side}.l1.w"), self.p(f"{side}.l1.b")))
        return ad.affine(x, self.p(f"{side}.l2.w"), self.p(f"{side}.l2.b"))

    def biaffine(self, h_head: ad.Tensor, h_tail: ad.Tensor) -> ad.Tensor:
        """``h_head^T U h_tail + W [h_head; h_tail] + b`` per row, shape (P, 2)."""
        k = self.config.d_biaff
        U = self.p("biaffine.U")
        P = h_head.shape[0]
        left = ad.reshape(ad.matmul(h_head, ad.reshape(U, (k, 2 * k))), (P, 2, k))
        bilinear = ad.sum(ad.mul(left, ad.reshape(h_tail, (P, 1, k))), axis=-1)
        linear = ad.affine(ad.concat([h_head, h_tail], axis=-1), self.p("biaffine.W"), self.p("biaffine.b"))
        return bilinear + linear

    def score_pairs(
        self, decoded: ad.Tensor, heads: np.ndarray, tails: np.ndarray, training: bool = False, rng=None
    ) -> ad.Tensor:
        if len(heads) == 0:
            return ad.constant(np.zeros((0, 2), dtype=self.store.dtype))
        h_head = self._mlp("head", ad.take(decoded, heads, axis=0), training, rng)
        h_tail = self._mlp("tail", ad.take(decoded, tails, axis=0), training, rng)
        return self.biaffine(h_head, h_tail)


def soft_label_embedding(cell_logits, table, faithful: bool = True):
    """``softmax(logits) @ LE_weight / N`` with N the number of labels.

    Accepts tensors (differentiable) or arrays.  ``faithful=False`` skips the
    division by N.
    """
    n = table.shape[0]
    if cell_logits.shape[-1] != n:
        raise ad.ShapeError(f"logits over {cell_logits.shape[-1]} labels vs table with {n} rows")
    div = float(n) if faithful else 1.0
    if isinstance(cell_logits, ad.Tensor) or isinstance(table, ad.Tensor):
        logits = cell_logits if isinstance(cell_logits, ad.Tensor) else ad.constant(cell_logits)
        tab = table if isinstance(table, ad.Tensor) else ad.constant(table)
        return ad.scale(ad.matmul(ad.softmax(logits, axis=-1), tab), 1.0 / div)
    z = np.asarray(cell_logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=-1, keepdims=True)
    return (w @ np.asarray(table)) / div


# ---------------------------------------------------------------------------
# single-document operations


def ser_forward(H: ad.Tensor, tdoc: TokenizedDocument, heads: JointHeads) -> SerOutput:
    if H.shape[0] != len(tdoc):
        raise ad.ShapeError(f"hidden states have {H.shape[0]} rows for {len(tdoc)} tokens")
    token_logits = heads.ser_logits(heads.ser_hidden(H))
    counts = tdoc.cell_token_counts()
    classified = counts > 0
    if not classified.all():
        logger.warning("document %s: %d cell(s) without tokens left unclassified", tdoc.doc_id, int((~classified).sum()))
    cell_logits = heads.cell_logits(token_logits, tdoc.cell_token_mask())
    pred = np.where(classified, cell_logits.data.argmax(axis=1), -1)
    return SerOutput(token_logits, cell_logits, pred, classified)


def entity_vectors(
    H: ad.Tensor, tdoc: TokenizedDocument, label_embedding: ad.Tensor, heads: JointHeads
) -> ad.Tensor:
    """Rows ``[mean(H_re over cell tokens) ; label embedding]`` for cells with tokens.

    ``label_embedding`` has one row per cell of ``tdoc``.
    """
    keep = tdoc.cell_token_counts() > 0
    pooled = ad.masked_mean(heads.re_hidden(H), tdoc.cell_token_mask()[keep])
    le = label_embedding if keep.all() else ad.take(label_embedding, np.flatnonzero(keep))
    return ad.concat([pooled, le], axis=-1)


def bilstm_decode(entities: ad.Tensor, heads: JointHeads) -> ad.Tensor:
    return heads.decode(entities, [entities.shape[0]])


def pair_scores(
    decoded: ad.Tensor, label_names: Sequence[str], heads: JointHeads
) -> PairScores:
    """Score every candidate pair; ``decoded`` rows align with ``label_names``."""
    pairs = candidate_pairs(label_names, heads.labels)
    h = np.asarray([i for i, _ in pairs], dtype=np.int64)
    t = np.asarray([j for _, j in pairs], dtype=np.int64)
    return PairScores(pairs, heads.score_pairs(decoded, h, t))


def joint_loss(
    token_logits: ad.Tensor,
    gold_tags: np.ndarray,
    pair_logits: ad.Tensor,
    pair_targets: np.ndarray,
    token_weight: np.ndarray | None = None,
) -> LossBreakdown:
    """Token-mean BIO cross-entropy plus pair-mean relation cross-entropy.

    With no candidate pairs the relation loss is 0.
    """
    loss_ser = ad.cross_entropy(token_logits, gold_tags, token_weight)
    if pair_logits.shape[0] == 0:
        loss_re = ad.constant(np.zeros((), dtype=token_logits.dtype))
    else:
        loss_re = ad.cross_entropy(pair_logits, pair_targets)
    total = loss_ser + loss_re
    return LossBreakdown(loss_ser, loss_re, total)


def pair_targets(pairs: Sequence[tuple[int, int]], gold: Sequence[tuple[int, int]], doc_id: str = "") -> np.ndarray:
    cand = set(pairs)
    missing = [g for g in gold if g not in cand]
    if missing:
        logger.warning("document %s: %d gold relation(s) outside the candidate set ignored", doc_id, len(missing))
    gold_set = set(gold)
    return np.asarray([1 if p in gold_set else 0 for p in pairs], dtype=np.int64)
