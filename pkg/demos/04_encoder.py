"""Hidden states from the toy layout encoder, or from a file.

The toy encoder embeds each token, adds 1-D and 2-D (box) positions, fuses
a small visual vector and runs a pre-norm transformer.  A trained external
model can be swapped in by exporting its states to an XFPH1 file.
"""

import tempfile
from pathlib import Path

import numpy as np

from formlink import autodiff as ad
from formlink import corpus, syngen
from formlink.encoder import EncoderConfig, PrecomputedEncoder, ToyEncoder, encode, write_precomputed

docs = syngen.generate(syngen.SynSpec(seed=2, num_docs=2))
vocab = corpus.build_vocab(docs)
store = ad.ParameterStore(np.float32, seed=0)
enc = ToyEncoder(EncoderConfig(d_model=32, layers=2, heads=4, dropout=0.0), len(vocab), store)
print(f"toy encoder: {sum(p.data.size for p in store)} parameters")

tdocs = [corpus.tokenize(d, vocab) for d in docs]
states = {t.doc_id: encode(t, enc).data for t in tdocs}
for doc_id, H in states.items():
    print(f"  {doc_id}: H is {H.shape[0]} tokens x {H.shape[1]}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "states.xfph"
    write_precomputed(path, states)
    pre = PrecomputedEncoder.load(path, d_model=32)
    same = all(np.array_equal(pre.hidden_states(k), v) for k, v in states.items())
    print(f"{path.stat().st_size} bytes on disk; reloaded states identical: {same}")
