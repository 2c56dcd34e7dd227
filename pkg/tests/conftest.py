from pathlib import Path

import numpy as np
import pytest

from formlink import corpus

FIXTURES = Path(__file__).parent / "fixtures"


def make_doc(cells, relations=(), width=1000, height=1000, doc_id="d0"):
    """cells: (id, text, label, box) tuples."""
    return corpus.Document(
        doc_id,
        tuple(corpus.Cell(i, text, corpus.BBox(*box), label) for i, text, label, box in cells),
        tuple(corpus.Relation(h, t) for h, t in relations),
        corpus.PageImage("page.png", width, height),
    )


@pytest.fixture
def qa_doc():
    return make_doc(
        [
            (0, "Full Name", "QUESTION", (10, 10, 110, 30)),
            (1, "Jane Doe", "ANSWER", (120, 10, 220, 30)),
            (2, "page", "OTHER", (10, 900, 60, 920)),
        ],
        [(0, 1)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
