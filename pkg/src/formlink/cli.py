"""Command-line entry point: ``formlink gen|validate|train|eval|predict|viz``.

Exit codes: 0 success, 1 data or validation failure, 2 usage error.
``XFP_THREADS`` caps BLAS threads (default 1, for reproducible sums).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from threadpoolctl import threadpool_limits

from . import corpus, syngen, trainer
from .corpus import LABEL_SETS, CorpusError, Document
from .encoder import PrecomputedEncoder, StateFileError
from .model import DocPrediction

logger = logging.getLogger("formlink")

PREDICTION_SCHEMA = 1

LABEL_COLORS = {
    "HEADER": "#7b3294",
    "QUESTION": "#1f78b4",
    "ANSWER": "#ff7f00",
    "ANSWERNUM": "#e31a1c",
    "SINGLE": "#33a02c",
    "OTHER": "#888888",
}


class DataError(Exception):
    """A problem with input data; maps to exit code 1."""


class UsageError(Exception):
    """Inconsistent flags that argparse cannot catch; maps to exit code 2."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def _read_docs(path: str, label_set: str, check: bool = True) -> list[Document]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    try:
        return corpus.parse_dataset(raw, LABEL_SETS[label_set], check=check)
    except corpus.DatasetParseError as exc:
        raise DataError(f"{path}: {exc} (byte {exc.offset})") from None
    except CorpusError as exc:
        raise DataError(f"{path}: {exc}") from None


def _encoder(spec: str, d_model: int) -> PrecomputedEncoder | None:
    if spec == "toy":
        return None
    if spec.startswith("precomputed:"):
        path = spec.split(":", 1)[1]
        try:
            return PrecomputedEncoder.load(path, d_model)
        except (OSError, StateFileError) as exc:
            raise DataError(f"{path}: {exc}") from None
    raise UsageError(f"--encoder must be 'toy' or 'precomputed:PATH', got {spec!r}")


def _write(path: str, data: str | bytes) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    p.write_bytes(data)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    try:
        spec = syngen.SynSpec(
            seed=args.seed,
            num_docs=args.num_docs,
            one_to_many_frac=args.one_to_many_frac,
            label_set=args.label_set,
            split=args.split,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    docs = syngen.generate(spec)
    _write(args.out, corpus.serialize_dataset(docs))
    stats = syngen.corpus_stats(docs, LABEL_SETS[args.label_set])
    print(f"wrote {stats.num_docs} documents, {stats.num_relations} relations to {args.out}")
    return 0


def cmd_validate(args) -> int:
    docs = _read_docs(args.data, args.label_set, check=False)
    labels = LABEL_SETS[args.label_set]
    problems = [(d.id, v) for d in docs for v in corpus.validate(d, labels)]
    if problems:
        for doc_id, v in problems:
            print(f"document {doc_id}: {v.code} at {v.where} {v.index}: {v.reason}")
        print(f"{len(problems)} violation(s)")
        return 1
    stats = syngen.corpus_stats(docs, labels)
    cells = sum(stats.label_counts.values())
    print(f"ok: {stats.num_docs} documents, {cells} cells, {stats.num_relations} relations")
    print("labels: " + ", ".join(f"{k}={v}" for k, v in stats.label_counts.items()))
    print("multiplicity: " + ", ".join(f"{k}={v}" for k, v in stats.multiplicity.items()))
    return 0


def _train_config(args) -> trainer.TrainConfig:
    values: dict = {}
    if args.config:
        try:
            values.update(trainer.parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise DataError(f"{args.config}: {exc.strerror}") from None
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "soft_label_start": args.soft_label_start,
        "soft_label_warm": args.soft_label_warm,
        "label_set": args.label_set,
        "checkpoint_every": args.checkpoint_every,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_soft_label:
        values["soft_label"] = False
    if args.no_decoder:
        values["use_decoder"] = False
    try:
        return trainer.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    resume = None
    if args.resume:
        try:
            resume = trainer.load_checkpoint(args.resume)
        except (OSError, trainer.CheckpointError) as exc:
            raise DataError(str(exc)) from None
        cfg = resume.config
    else:
        cfg = _train_config(args)
    docs = _read_docs(args.data, cfg.label_set)
    val = _read_docs(args.val, cfg.label_set) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    precomputed = _encoder(args.encoder, cfg.d_model)
    try:
        result = trainer.train(
            docs,
            cfg,
            val_docs=val,
            precomputed=precomputed,
            resume=resume,
            log_path=out / "train_log.jsonl",
            checkpoint_dir=out,
        )
    except trainer.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    trainer.save_checkpoint(result.last, out / "last.ckpt")
    if result.best is not None:
        trainer.save_checkpoint(result.best, out / "best.ckpt")
    elif not (out / "best.ckpt").exists():
        trainer.save_checkpoint(result.last, out / "best.ckpt")
    last = result.log[-1] if result.log else {}
    print(f"trained {len(result.log)} epoch(s); final loss {last.get('loss', float('nan')):.6f}; checkpoints in {out}")
    return 0


def _load_model(args):
    try:
        ckpt = trainer.load_checkpoint(args.ckpt)
    except OSError as exc:
        raise DataError(f"{args.ckpt}: {exc.strerror}") from None
    except trainer.CheckpointError as exc:
        raise DataError(str(exc)) from None
    cfg = ckpt.config
    try:
        model = trainer.model_from_checkpoint(ckpt, _encoder(args.encoder, cfg.d_model))
    except (trainer.CheckpointError, ValueError) as exc:
        raise DataError(str(exc)) from None
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _load_model(args)
    docs = _read_docs(args.data, cfg.label_set)
    threshold = args.re_threshold if args.re_threshold is not None else cfg.re_threshold
    report = trainer.evaluate_model(model, model.prepare(docs), threshold, gold_candidates=args.gold_candidates)
    report.extra["gold_candidates"] = bool(args.gold_candidates)
    text = report.to_json()
    if args.report:
        _write(args.report, text)
    print(
        f"cell_accuracy {report.cell_accuracy:.4f} ({report.ccd}/{report.tcc})  "
        f"RE P {report.re.precision:.4f} R {report.re.recall:.4f} F1 {report.re.f1:.4f}"
    )
    return 0


def prediction_file(predictions: Sequence[DocPrediction], threshold: float) -> dict:
    return {
        "schema_version": PREDICTION_SCHEMA,
        "re_threshold": threshold,
        "documents": [
            {
                "id": p.doc_id,
                "cells": [
                    {"id": cid, "label": label, "confidence": conf}
                    for cid, label, conf in zip(p.cell_ids, p.labels, p.confidence)
                ],
                "relations": [
                    {"head": h, "tail": t, "probability": prob} for h, t, prob in p.relations if prob > threshold
                ],
            }
            for p in predictions
        ],
    }


def cmd_predict(args) -> int:
    model, cfg = _load_model(args)
    docs = _read_docs(args.input, cfg.label_set)
    threshold = args.re_threshold if args.re_threshold is not None else cfg.re_threshold
    preds = model.predict(model.prepare(docs))
    payload = prediction_file(preds, threshold)
    _write(args.out, json.dumps(payload, ensure_ascii=False, indent=2) + "\n")
    n_rel = sum(len(d["relations"]) for d in payload["documents"])
    print(f"wrote predictions for {len(preds)} document(s), {n_rel} relation(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# visualisation


def _resolve(pred: dict, docs: list[Document]):
    """Pair each predicted document with its source; error on the first id that does not resolve."""
    if pred.get("schema_version") != PREDICTION_SCHEMA:
        raise DataError(f"prediction schema {pred.get('schema_version')!r} != {PREDICTION_SCHEMA}")
    by_id = {d.id: d for d in docs}
    out = []
    for pd in pred["documents"]:
        doc = by_id.get(pd["id"])
        if doc is None:
            raise DataError(f"unresolved document id {pd['id']!r}")
        cells = doc.cell_by_id()
        for c in pd["cells"]:
            if c["id"] not in cells:
                raise DataError(f"document {doc.id}: unresolved cell id {c['id']}")
        for r in pd["relations"]:
            for cid in (r["head"], r["tail"]):
                if cid not in cells:
                    raise DataError(f"document {doc.id}: unresolved cell id {cid} in relation")
        out.append((doc, pd))
    return out


def render_svg(pairs) -> str:
    gap = 20
    width = max((d.img.width for d, _ in pairs), default=0)
    height = sum(d.img.height for d, _ in pairs) + gap * max(len(pairs) - 1, 0)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        "<defs>",
        '<marker id="arrow" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="6" markerHeight="6" orient="auto-start-reverse">',
        '<path d="M 0 0 L 10 5 L 0 10 z" fill="#d7301f"/>',
        "</marker>",
        "</defs>",
    ]
    top = 0
    for doc, pd in pairs:
        lines.append(f'<g class="document" data-id="{escape(doc.id)}" transform="translate(0,{top})">')
        cells = doc.cell_by_id()
        labels = {c["id"]: c["label"] for c in pd["cells"]}
        for cid, cell in cells.items():
            b = cell.bbox
            label = labels.get(cid)
            color = LABEL_COLORS.get(label or "", "#000000")
            lines.append(
                f'<rect class="cell" data-id="{cid}" data-label="{escape(str(label))}" x="{b.x0}" y="{b.y0}" '
                f'width="{b.x1 - b.x0}" height="{b.y1 - b.y0}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
        for r in pd["relations"]:
            h, t = cells[r["head"]].bbox, cells[r["tail"]].bbox
            lines.append(
                f'<line class="relation" x1="{(h.x0 + h.x1) / 2}" y1="{(h.y0 + h.y1) / 2}" '
                f'x2="{(t.x0 + t.x1) / 2}" y2="{(t.y0 + t.y1) / 2}" stroke="#d7301f" stroke-width="1.5" '
                f'marker-end="url(#arrow)"><title>p={r["probability"]:.3f}</title></line>'
            )
        lines.append("</g>")
        top += doc.img.height + gap
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_dot(pairs) -> str:
    lines = ["digraph forms {", "  node [shape=box];"]
    for doc, pd in pairs:
        cells = doc.cell_by_id()
        labels = {c["id"]: c["label"] for c in pd["cells"]}
        for cid in cells:
            label = labels.get(cid)
            text = cells[cid].text.replace("\\", "\\\\").replace('"', '\\"')
            color = LABEL_COLORS.get(label or "", "#000000")
            lines.append(f'  "{doc.id}:{cid}" [label="{text}\\n{label}", color="{color}"];')
        for r in pd["relations"]:
            lines.append(f'  "{doc.id}:{r["head"]}" -> "{doc.id}:{r["tail"]}" [label="{r["probability"]:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_viz(args) -> int:
    try:
        pred = json.loads(Path(args.pred).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{args.pred}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.pred}: {exc}") from None
    docs = _read_docs(args.data, args.label_set)
    pairs = _resolve(pred, docs)
    text = render_svg(pairs) if args.format == "svg" else render_dot(pairs)
    _write(args.out, text)
    print(f"wrote {args.format} for {len(pairs)} document(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formlink", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    label_choices = sorted(LABEL_SETS)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--num-docs", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--one-to-many-frac", type=_fraction, default=0.1)
    p.add_argument("--label-set", choices=label_choices, default="xfund")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="check a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--label-set", choices=label_choices, default="xfund")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train the joint model")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation dataset for best-checkpoint selection")
    p.add_argument("--config", help="key = value file of TrainConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--encoder", default="toy", help="toy or precomputed:PATH")
    p.add_argument("--soft-label-start", type=int)
    p.add_argument("--soft-label-warm", type=_positive_int)
    p.add_argument("--no-soft-label", action="store_true")
    p.add_argument("--no-decoder", action="store_true", help="ablate the Bi-LSTM decoder")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--label-set", choices=label_choices)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="continue from a checkpoint written by checkpoint_every")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "score a checkpoint"), ("predict", "write a prediction file")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--encoder", default="toy", help="toy or precomputed:PATH")
        p.add_argument("--re-threshold", type=_fraction)
        if name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--report")
            p.add_argument("--gold-candidates", action="store_true", help="pair candidates from gold labels")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--input", required=True)
            p.add_argument("--out", required=True)
            p.set_defaults(func=cmd_predict)

    p = sub.add_parser("viz", help="draw predictions as SVG or DOT")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("svg", "dot"), default="svg")
    p.add_argument("--label-set", choices=label_choices, default="xfund")
    p.set_defaults(func=cmd_viz)
    return parser


def _threads() -> int:
    raw = os.environ.get("XFP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"XFP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"XFP_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as exc:
        print(f"formlink: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, syngen.GenerationError) as exc:
        print(f"formlink: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
