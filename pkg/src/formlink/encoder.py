"""Token encoders: the built-in toy layout transformer and precomputed states.

Both produce a hidden-state matrix per document whose rows align with the
tokens of a :class:`~formlink.corpus.TokenizedDocument`.  The toy encoder
embeds text, box-derived visual statistics, 1-D position and the four 2-D
coordinate buckets, then runs a small pre-norm transformer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import PAD, Document, TokenizedDocument

VISUAL_DIM = 8


@dataclass
class EncoderConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 512
    buckets: int = 1001
    visual_dim: int = VISUAL_DIM
    visual_proj: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


# ---------------------------------------------------------------------------
# visual features


def box_statistics(doc: Document) -> np.ndarray:
    """Per-cell (center x, center y, width, height, aspect, area, left, top).

    Everything except the aspect ratio is page-relative.  A box with zero
    height (or zero area) gets aspect 0.
    """
    W, H = float(doc.img.width), float(doc.img.height)
    out = np.zeros((len(doc.cells), VISUAL_DIM))
    for i, cell in enumerate(doc.cells):
        b = cell.bbox
        w, h = (b.x1 - b.x0), (b.y1 - b.y0)
        aspect = w / h if w > 0 and h > 0 else 0.0
        out[i] = (
            (b.x0 + b.x1) / 2 / W,
            (b.y0 + b.y1) / 2 / H,
            w / W,
            h / H,
            aspect,
            (w / W) * (h / H),
            b.x0 / W,
            b.y0 / H,
        )
    return out


VisualProvider = Callable[[Document], np.ndarray]


def visual_features(
    doc: Document, tdoc: TokenizedDocument, provider: VisualProvider | None = box_statistics
) -> np.ndarray:
    """Per-token visual vectors; each token copies its cell's row.

    ``provider`` maps a document to one row per cell.  ``None`` yields zeros.
    """
    if provider is None:
        return np.zeros((len(tdoc), VISUAL_DIM))
    per_cell = np.asarray(provider(doc), dtype=np.float64)
    if per_cell.shape[0] != len(doc.cells):
        raise ValueError(f"visual provider returned {per_cell.shape[0]} rows for {len(doc.cells)} cells")
    return per_cell[tdoc.cell_index]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    docs: list[TokenizedDocument]
    token_ids: np.ndarray  # (B, T)
    positions: np.ndarray  # (B, T)
    boxes: np.ndarray  # (B, T, 4)
    visual: np.ndarray  # (B, T, VISUAL_DIM)
    mask: np.ndarray  # (B, T) True for real tokens

    @property
    def lengths(self) -> list[int]:
        return [len(d) for d in self.docs]


def make_batch(docs: Sequence[TokenizedDocument], visual: Sequence[np.ndarray] | None = None) -> Batch:
    """Pad to the longest document; padding uses PAD ids, zero boxes and features."""
    B = len(docs)
    T = max([len(d) for d in docs] + [1])
    ids = np.full((B, T), PAD, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    boxes = np.zeros((B, T, 4), dtype=np.int64)
    vis = np.zeros((B, T, VISUAL_DIM))
    mask = np.zeros((B, T), dtype=bool)
    for b, d in enumerate(docs):
        n = len(d)
        ids[b, :n] = d.token_ids
        pos[b, :n] = d.positions
        boxes[b, :n] = d.boxes
        if visual is not None:
            vis[b, :n] = visual[b]
        mask[b, :n] = True
    return Batch(list(docs), ids, pos, boxes, vis, mask)


# ---------------------------------------------------------------------------
# toy transformer


class ToyEncoder:
    def __init__(self, config: EncoderConfig, vocab_size: int, store: ad.ParameterStore, prefix: str = "encoder"):
        self.config = config
        self.store = store
        self.prefix = prefix
        c, p = config, prefix
        store.uniform(f"{p}.tok", (vocab_size, c.d_model))
        store.uniform(f"{p}.vis.w", (c.visual_proj, c.visual_dim))
        store.zeros(f"{p}.vis.b", (c.visual_proj,))
        store.uniform(f"{p}.fuse.w", (c.d_model, c.d_model + c.visual_proj))
        store.zeros(f"{p}.fuse.b", (c.d_model,))
        store.uniform(f"{p}.pos1d", (c.max_len, c.d_model))
        for axis in "xywh":
            store.uniform(f"{p}.pos2d.{axis}", (c.buckets, c.d_model))
        store.ones(f"{p}.emb_ln.g", (c.d_model,))
        store.zeros(f"{p}.emb_ln.b", (c.d_model,))
        for i in range(c.layers):
            q = f"{p}.layer{i}"
            store.ones(f"{q}.ln1.g", (c.d_model,))
            store.zeros(f"{q}.ln1.b", (c.d_model,))
            # no key bias: softmax over keys is invariant to it, so it never gets a gradient
            store.uniform(f"{q}.attn.q.w", (c.d_model, c.d_model))
            store.zeros(f"{q}.attn.q.b", (c.d_model,))
            store.uniform(f"{q}.attn.k.w", (c.d_model, c.d_model))
            store.uniform(f"{q}.attn.v.w", (c.d_model, c.d_model))
            store.zeros(f"{q}.attn.v.b", (c.d_model,))
            store.uniform(f"{q}.attn.out.w", (c.d_model, c.d_model))
            store.zeros(f"{q}.attn.out.b", (c.d_model,))
            store.ones(f"{q}.ln2.g", (c.d_model,))
            store.zeros(f"{q}.ln2.b", (c.d_model,))
            store.uniform(f"{q}.ffn.in.w", (c.ffn_mult * c.d_model, c.d_model))
            store.zeros(f"{q}.ffn.in.b", (c.ffn_mult * c.d_model,))
            store.uniform(f"{q}.ffn.out.w", (c.d_model, c.ffn_mult * c.d_model))
            store.zeros(f"{q}.ffn.out.b", (c.d_model,))
        store.ones(f"{p}.final_ln.g", (c.d_model,))
        store.zeros(f"{p}.final_ln.b", (c.d_model,))

    def _p(self, name: str) -> ad.Parameter:
        return self.store[f"{self.prefix}.{name}"]

    def embed_inputs(self, batch: Batch) -> ad.Tensor:
        """Raw input embeddings (before normalisation), shape (B, T, d_model)."""
        c = self.config
        if batch.boxes.size and (batch.boxes.min() < 0 or batch.boxes.max() >= c.buckets):
            raise ValueError(f"coordinate bucket outside 0..{c.buckets - 1}")
        if batch.token_ids.shape[1] > c.max_len:
            raise ValueError(f"sequence of {batch.token_ids.shape[1]} tokens exceeds max_len {c.max_len}")
        p = self._p
        text = ad.embedding(p("tok"), batch.token_ids)
        vis = ad.affine(ad.constant(batch.visual, self.store.dtype), p("vis.w"), p("vis.b"))
        x = ad.affine(ad.concat([text, vis], axis=-1), p("fuse.w"), p("fuse.b"))
        x = x + ad.embedding(p("pos1d"), batch.positions)
        for k, axis in enumerate("xywh"):
            x = x + ad.embedding(p(f"pos2d.{axis}"), batch.boxes[..., k])
        return x

    def _attention(self, x: ad.Tensor, key_bias: np.ndarray, q: str) -> ad.Tensor:
        c = self.config
        B, T, d = x.shape
        dh = d // c.heads
        p = self._p

        def split(t: ad.Tensor) -> ad.Tensor:
            return ad.transpose(ad.reshape(t, (B, T, c.heads, dh)), (0, 2, 1, 3))

        query = split(ad.affine(x, p(f"{q}.attn.q.w"), p(f"{q}.attn.q.b")))
        key = split(ad.affine(x, p(f"{q}.attn.k.w")))
        value = split(ad.affine(x, p(f"{q}.attn.v.w"), p(f"{q}.attn.v.b")))
        scores = ad.scale(ad.matmul(query, ad.transpose(key, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = ad.softmax(scores + key_bias, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, value), (0, 2, 1, 3)), (B, T, d))
        return ad.affine(ctx, self._p(f"{q}.attn.out.w"), self._p(f"{q}.attn.out.b"))

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
        c = self.config
        p = self._p
        x = ad.layer_norm(self.embed_inputs(batch), p("emb_ln.g"), p("emb_ln.b"))
        x = ad.dropout(x, c.dropout, rng, training)
        key_bias = np.where(batch.mask, 0.0, -1e9).astype(self.store.dtype)[:, None, None, :]
        key_bias = ad.constant(key_bias)
        for i in range(c.layers):
            q = f"layer{i}"
            h = ad.layer_norm(x, p(f"{q}.ln1.g"), p(f"{q}.ln1.b"))
            x = x + self._attention(h, key_bias, q)
            h = ad.layer_norm(x, p(f"{q}.ln2.g"), p(f"{q}.ln2.b"))
            h = ad.relu(ad.affine(h, p(f"{q}.ffn.in.w"), p(f"{q}.ffn.in.b")))
            x = x + ad.affine(h, p(f"{q}.ffn.out.w"), p(f"{q}.ffn.out.b"))
            x = ad.dropout(x, c.dropout, rng, training)
        return ad.layer_norm(x, p("final_ln.g"), p("final_ln.b"))


def encode(
    tdoc: TokenizedDocument,
    encoder: ToyEncoder,
    visual: np.ndarray | None = None,
) -> ad.Tensor:
    """Eval-mode hidden states for one document, shape (tokens, d_model)."""
    if len(tdoc) > encoder.config.max_len:
        raise ValueError(f"document {tdoc.doc_id} has {len(tdoc)} tokens, max_len is {encoder.config.max_len}")
    batch = make_batch([tdoc], None if visual is None else [visual])
    H = encoder.forward(batch, training=False)
    return H[0, : len(tdoc)]


# ---------------------------------------------------------------------------
# precomputed hidden states (XFPH1 files)

MAGIC = b"XFPH1"


class StateFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_precomputed(path: str | Path, states: Mapping[str, np.ndarray]) -> None:
    """Store per-document (tokens, dim) matrices as little-endian float32."""
    parts = [MAGIC, struct.pack("<I", len(states))]
    for doc_id, mat in states.items():
        mat = np.asarray(mat, dtype="<f4")
        if mat.ndim != 2:
            raise ValueError(f"states for {doc_id!r} must be 2-D, got shape {mat.shape}")
        key = doc_id.encode("utf-8")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<II", *mat.shape), mat.tobytes(order="C")]
    Path(path).write_bytes(b"".join(parts))


def read_precomputed(path: str | Path, expected_dim: int | None = None) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise StateFileError("bad magic, expected XFPH1", 0)
    off = 5

    def need(n: int, what: str) -> None:
        if off + n > len(raw):
            raise StateFileError(f"truncated file reading {what}: need {n} bytes, {len(raw) - off} left", off)

    need(4, "document count")
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(2, "id length")
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(klen, "document id")
        doc_id = raw[off : off + klen].decode("utf-8")
        off += klen
        need(8, "matrix header")
        tokens, dim = struct.unpack_from("<II", raw, off)
        if expected_dim is not None and dim != expected_dim:
            raise StateFileError(f"document {doc_id!r} has hidden dim {dim}, expected {expected_dim}", off)
        off += 8
        nbytes = tokens * dim * 4
        need(nbytes, f"{tokens}x{dim} payload of {doc_id!r}")
        out[doc_id] = np.frombuffer(raw, dtype="<f4", count=tokens * dim, offset=off).reshape(tokens, dim).copy()
        off += nbytes
    if off != len(raw):
        raise StateFileError(f"{len(raw) - off} trailing bytes after last document", off)
    return out


class PrecomputedEncoder:
    """Serves stored hidden states as constants; it has no parameters."""

    def __init__(self, states: Mapping[str, np.ndarray], d_model: int, dtype=np.float32):
        self.states = dict(states)
        self.d_model = d_model
        self.dtype = np.dtype(dtype)
        for doc_id, mat in self.states.items():
            if mat.shape[1] != d_model:
                raise ValueError(f"document {doc_id!r}: hidden dim {mat.shape[1]} != d_model {d_model}")

    @classmethod
    def load(cls, path: str | Path, d_model: int, dtype=np.float32) -> "PrecomputedEncoder":
        return cls(read_precomputed(path, expected_dim=d_model), d_model, dtype)

    def hidden_states(self, doc_id: str) -> np.ndarray:
        return self.states[doc_id].astype(self.dtype)

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
        B, T = batch.token_ids.shape
        out = np.zeros((B, T, self.d_model), dtype=self.dtype)
        for b, d in enumerate(batch.docs):
            if d.doc_id not in self.states:
                raise KeyError(f"no precomputed states for document {d.doc_id!r}")
            mat = self.states[d.doc_id]
            if mat.shape[0] != len(d):
                raise ValueError(f"document {d.doc_id!r}: {mat.shape[0]} stored rows for {len(d)} tokens")
            out[b, : len(d)] = mat
        return ad.constant(out)
