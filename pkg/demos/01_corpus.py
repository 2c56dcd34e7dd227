"""Reading, checking and tokenizing form annotations.

A form is a set of cells (text, box, label) plus directed links from key
cells to value cells.  This walk-through loads the bundled FUNSD-style
fixture, shows what validation catches, and prints the BIO token view the
model trains on.
"""

from pathlib import Path

from formlink import corpus

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "funsd_style.json"

raw = FIXTURE.read_text(encoding="utf-8")
(doc,) = corpus.parse_dataset(raw)
print(f"{doc.id}: {len(doc.cells)} cells on a {doc.img.width}x{doc.img.height} page")
for rel in doc.relations:
    cells = doc.cell_by_id()
    print(f"  {cells[rel.head_id].text!r} -> {cells[rel.tail_id].text!r}")

# Serialization is canonical, so an untouched file survives a round trip byte for byte.
assert corpus.serialize_dataset([doc], lang="en", split="test") == raw.encode("utf-8")

# A link to a cell that does not exist is reported, not silently dropped.
broken = corpus.Document(doc.id, doc.cells, doc.relations + (corpus.Relation(1, 99),), doc.img)
for v in corpus.validate(broken, corpus.XFUND_LABELS):
    print(f"violation: {v.code} at {v.where} {v.index}: {v.reason}")

# Tokens carry a BIO tag and a box normalized to the 0..1000 grid.
vocab = corpus.build_vocab([doc])
tdoc = corpus.tokenize(doc, vocab)
tags = corpus.XFUND_LABELS.bio_tags
for text, tag, box in list(zip(tdoc.texts, tdoc.tags, tdoc.boxes))[:8]:
    print(f"  {text:<14} {tags[tag]:<12} {box.tolist()}")
