"""The joint model: encoder + SER head + RE decoder, run over padded batches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import LABEL_SETS, Document, LabelSet, TokenizedDocument, Vocab, tokenize
from .encoder import (
    Batch,
    EncoderConfig,
    PrecomputedEncoder,
    ToyEncoder,
    VisualProvider,
    box_statistics,
    make_batch,
    visual_features,
)
from .heads import (
    HeadConfig,
    JointHeads,
    LossBreakdown,
    SoftLabelSchedule,
    blend_label_embedding,
    candidate_pairs,
    joint_loss,
    pair_targets,
)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    label_set: str = "xfund"
    dtype: str = "float32"
    init_seed: int = 0

    @property
    def labels(self) -> LabelSet:
        return LABEL_SETS[self.label_set]


@dataclass
class Example:
    doc: Document
    tdoc: TokenizedDocument
    visual: np.ndarray


@dataclass
class DocPrediction:
    doc_id: str
    cell_ids: tuple[int, ...]
    labels: list[str | None]  # None for cells that received no tokens
    confidence: list[float]
    relations: list[tuple[int, int, float]]  # (head cell id, tail cell id, probability)
    token_tags: list[int] = field(default_factory=list)  # argmax BIO tag per token

    def predicted_pairs(self, threshold: float = 0.5) -> set[tuple[int, int]]:
        return {(h, t) for h, t, p in self.relations if p > threshold}


@dataclass
class ForwardResult:
    loss: LossBreakdown | None
    predictions: list[DocPrediction]
    num_pairs: int
    num_tokens: int


class JointModel:
    def __init__(
        self,
        vocab: Vocab,
        config: ModelConfig | None = None,
        precomputed: PrecomputedEncoder | None = None,
        visual_provider: VisualProvider | None = box_statistics,
    ):
        self.config = config or ModelConfig()
        self.vocab = vocab
        self.labels = self.config.labels
        self.visual_provider = visual_provider
        self.store = ad.ParameterStore(dtype=np.dtype(self.config.dtype), seed=self.config.init_seed)
        if precomputed is None:
            self.encoder = ToyEncoder(self.config.encoder, len(vocab), self.store)
        else:
            if precomputed.d_model != self.config.encoder.d_model:
                raise ValueError(
                    f"precomputed states have dim {precomputed.d_model}, model expects {self.config.encoder.d_model}"
                )
            precomputed.dtype = self.store.dtype
            self.encoder = precomputed
        self.heads = JointHeads(self.config.encoder.d_model, self.labels, self.config.heads, self.store)

    @property
    def params(self) -> list[ad.Parameter]:
        return list(self.store)

    def prepare(self, docs: list[Document]) -> list[Example]:
        out = []
        for doc in docs:
            tdoc = tokenize(doc, self.vocab, self.labels, max_len=self.config.encoder.max_len)
            out.append(Example(doc, tdoc, visual_features(doc, tdoc, self.visual_provider)))
        return out

    def forward(
        self,
        examples: list[Example],
        *,
        training: bool = False,
        epoch: int | None = None,
        schedule: SoftLabelSchedule | None = None,
        rng: np.random.Generator | None = None,
        gold_candidates: bool | None = None,
        with_loss: bool = True,
    ) -> ForwardResult:
        """Run both heads over a batch.

        Training uses gold labels for candidate pairs and for the hard label
        embedding, blended with soft embeddings per ``schedule`` and ``epoch``.
        Inference uses the SER predictions for both unless ``gold_candidates``.
        """
        schedule = schedule or SoftLabelSchedule()
        if gold_candidates is None:
            gold_candidates = training
        heads = self.heads
        drop = self.config.heads.dropout
        tdocs = [e.tdoc for e in examples]
        batch = make_batch(tdocs, [e.visual for e in examples])
        B, T = batch.token_ids.shape
        H = self.encoder.forward(batch, training=training, rng=rng)
        Hf = ad.reshape(H, (B * T, H.shape[-1]))

        token_logits = heads.ser_logits(ad.dropout(heads.ser_hidden(Hf), drop, rng, training))

        # cell membership over flattened token rows
        n_cells = [len(d.cell_ids) for d in tdocs]
        offsets = np.concatenate([[0], np.cumsum(n_cells)]).astype(np.int64)
        cell_mask = np.zeros((offsets[-1], B * T), dtype=bool)
        for b, d in enumerate(tdocs):
            cell_mask[offsets[b] + d.cell_index, b * T + np.arange(len(d))] = True
        classified = cell_mask.any(axis=1)
        cell_logits = heads.cell_logits(token_logits, cell_mask)
        pred = np.where(classified, cell_logits.data.argmax(axis=1), -1)
        gold = np.concatenate([d.cell_labels for d in tdocs]) if tdocs else np.zeros(0, np.int64)

        keep = np.flatnonzero(classified)
        use_gold = training or gold_candidates
        label_ids = gold if use_gold else pred
        pooled = ad.masked_mean(heads.re_hidden(Hf), cell_mask[keep])
        le = heads.hard_label_embedding(label_ids[keep])
        if training and epoch is not None and schedule.enabled and epoch > schedule.ep_start:
            le_sl = heads.soft_label_embedding(ad.take(cell_logits, keep))
            le = blend_label_embedding(le, le_sl, epoch, schedule)
        entities = ad.concat([pooled, le], axis=-1)
        lengths = [int(classified[offsets[b] : offsets[b + 1]].sum()) for b in range(B)]
        decoded = heads.decode(entities, lengths)

        # candidate pairs per document, as rows of ``decoded``
        names = self.labels.names
        head_rows, tail_rows, targets, owners = [], [], [], []
        row = 0
        for b, d in enumerate(tdocs):
            kept = np.flatnonzero(classified[offsets[b] : offsets[b + 1]])
            kept_names = [names[label_ids[offsets[b] + i]] for i in kept]
            pairs = [(int(kept[i]), int(kept[j])) for i, j in candidate_pairs(kept_names, self.labels)]
            local = {int(c): k for k, c in enumerate(kept)}
            for i, j in pairs:
                head_rows.append(row + local[i])
                tail_rows.append(row + local[j])
                owners.append((b, i, j))
            if with_loss:
                targets.append(pair_targets(pairs, d.relations, d.doc_id))
            row += len(kept)
        pair_logits = heads.score_pairs(
            decoded, np.asarray(head_rows, np.int64), np.asarray(tail_rows, np.int64), training, rng
        )

        loss = None
        if with_loss:
            gold_tags = np.zeros((B, T), dtype=np.int64)
            for b, d in enumerate(tdocs):
                gold_tags[b, : len(d)] = d.tags
            loss = joint_loss(
                token_logits,
                gold_tags.reshape(-1),
                pair_logits,
                np.concatenate(targets) if targets else np.zeros(0, np.int64),
                token_weight=batch.mask.reshape(-1),
            )

        predictions = self._collect(tdocs, offsets, classified, cell_logits.data, pred, pair_logits.data, owners)
        tag_pred = token_logits.data.reshape(B, T, -1).argmax(axis=-1)
        for b, d in enumerate(tdocs):
            predictions[b].token_tags = [int(t) for t in tag_pred[b, : len(d)]]
        return ForwardResult(loss, predictions, len(head_rows), int(batch.mask.sum()))

    def _collect(self, tdocs, offsets, classified, cell_logits, pred, pair_logits, owners) -> list[DocPrediction]:
        z = cell_logits - cell_logits.max(axis=1, keepdims=True) if len(cell_logits) else cell_logits
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True) if len(cell_logits) else z
        if len(pair_logits):
            zp = pair_logits - pair_logits.max(axis=1, keepdims=True)
            rel_p = (np.exp(zp) / np.exp(zp).sum(axis=1, keepdims=True))[:, 1]
        else:
            rel_p = np.zeros(0)
        out = []
        for b, d in enumerate(tdocs):
            sl = slice(offsets[b], offsets[b + 1])
            labels = [self.labels.names[p] if p >= 0 else None for p in pred[sl]]
            conf = [float(probs[offsets[b] + i].max()) if classified[offsets[b] + i] else 0.0 for i in range(len(d.cell_ids))]
            out.append(DocPrediction(d.doc_id, d.cell_ids, labels, conf, []))
        for (b, i, j), p in zip(owners, rel_p):
            ids = tdocs[b].cell_ids
            out[b].relations.append((ids[i], ids[j], float(p)))
        return out

    def predict(self, examples: list[Example], batch_size: int = 8, gold_candidates: bool = False) -> list[DocPrediction]:
        out: list[DocPrediction] = []
        for start in range(0, len(examples), batch_size):
            res = self.forward(examples[start : start + batch_size], gold_candidates=gold_candidates, with_loss=False)
            out.extend(res.predictions)
        return out
