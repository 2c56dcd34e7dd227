"""Cell labeling and key-value linking on top of hidden states.

The labeling head scores BIO tags per token and pools them per cell.  The
linking head turns each cell into a vector (mean token state plus a label
embedding), contextualizes cells with a Bi-LSTM and scores every key-value
candidate pair with a biaffine form.  During training the label embedding
moves from the gold label to the predicted label distribution on a warm-up
schedule.
"""

import numpy as np

from formlink import autodiff as ad
from formlink import corpus, syngen
from formlink.heads import (
    HeadConfig,
    JointHeads,
    SoftLabelSchedule,
    alpha,
    candidate_pairs,
    ser_forward,
    soft_label_embedding,
)

schedule = SoftLabelSchedule(ep_start=30, ep_warm=10)
print("alpha by epoch:", {ep: alpha(ep, schedule) for ep in (0, 30, 32, 35, 40, 60)})

labels = corpus.XFUND_LABELS
print("candidates for [Q, A, Q, OTHER]:", candidate_pairs(["QUESTION", "ANSWER", "QUESTION", "OTHER"], labels))

(doc,) = syngen.generate(syngen.SynSpec(seed=4, num_docs=1))
tdoc = corpus.tokenize(doc, corpus.build_vocab([doc]))
store = ad.ParameterStore(np.float64, seed=0)
heads = JointHeads(16, labels, HeadConfig(d_label=8, d_biaff=8, dropout=0.0), store)
H = ad.constant(np.random.default_rng(0).normal(size=(len(tdoc), 16)))

ser = ser_forward(H, tdoc, heads)
predicted = [labels.names[i] for i in ser.predictions]
print(f"{len(tdoc)} tokens -> {len(predicted)} cells; untrained guesses: {predicted[:5]} ...")

soft = soft_label_embedding(ser.cell_logits, store["heads.label_emb"])
print("soft label embedding shape:", soft.shape)

gold_names = [labels.names[i] for i in tdoc.cell_labels]
pairs = candidate_pairs(gold_names, labels)
print(f"{len(pairs)} candidate pairs, {len(doc.relations)} of them are gold links")
