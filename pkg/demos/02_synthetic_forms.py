"""Generating labeled forms on demand.

The generator lays out key/value grids with optional headers and stray
cells, and it is fully determined by its spec: the same seed always gives
the same documents.
"""

from formlink import corpus, syngen

spec = syngen.SynSpec(seed=7, num_docs=50, one_to_many_frac=0.3)
docs = syngen.generate(spec)
stats = syngen.corpus_stats(docs, corpus.XFUND_LABELS)
print(f"{stats.num_docs} documents, {stats.num_relations} relations")
print("labels:", stats.label_counts)
print("links by head out-degree:", stats.multiplicity)
print(f"one-to-many heads: {syngen.one_to_many_fraction(docs):.2f}")

again = syngen.generate(spec)
assert corpus.serialize_dataset(docs) == corpus.serialize_dataset(again)

# The InDFormSFT-style label set adds numeric answers and standalone cells.
zh = syngen.generate(syngen.SynSpec(seed=1, num_docs=20, label_set="indform"))
print("indform labels:", syngen.corpus_stats(zh, corpus.INDFORM_LABELS).label_counts)

first = docs[0]
for cell in first.cells[:6]:
    print(f"  [{cell.label:<8}] {cell.text}")
