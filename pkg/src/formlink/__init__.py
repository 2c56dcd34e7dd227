"""Joint semantic-entity recognition and relation extraction for form documents.

A small numpy stack: a tape autodiff engine, a toy layout-aware encoder,
SER/RE heads with a warm-up soft label, metrics and file formats.
"""

from .corpus import (
    INDFORM_LABELS,
    LABEL_SETS,
    XFUND_LABELS,
    Document,
    parse_dataset,
    serialize_dataset,
    validate,
)
from .heads import SoftLabelSchedule, alpha
from .metrics import MetricsReport, cell_accuracy, re_prf1
from .syngen import SynSpec, generate

__version__ = "0.1.0"

__all__ = [
    "INDFORM_LABELS",
    "LABEL_SETS",
    "XFUND_LABELS",
    "Document",
    "MetricsReport",
    "SoftLabelSchedule",
    "SynSpec",
    "alpha",
    "cell_accuracy",
    "generate",
    "parse_dataset",
    "re_prf1",
    "serialize_dataset",
    "validate",
]
