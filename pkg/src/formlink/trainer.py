"""Training loop, AdamW, linear schedule and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"XFPC1" | u32 manifest length | manifest (UTF-8 JSON)
    | parameter payload (float32) | optimizer moments payload (float32)

The manifest lists every parameter with its shape and byte offset into the
parameter payload; moments are stored as all first moments followed by all
second moments in the same order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .corpus import LABEL_SETS, Document, Vocab, build_vocab
from .encoder import EncoderConfig, PrecomputedEncoder
from .heads import HeadConfig, SoftLabelSchedule, alpha
from .metrics import MetricsReport, evaluate
from .model import JointModel, ModelConfig

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"XFPC1"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scheduler: str = "linear"
    warmup_fraction: float = 0.1
    batch_size: int = 8
    epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    max_sequence: int = 512
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    soft_label: bool = True
    soft_label_start: int = 30
    soft_label_warm: int = 10
    re_threshold: float = 0.5
    # model shape
    label_set: str = "xfund"
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    d_label: int = 32
    d_biaff: int = 64
    dropout: float = 0.1
    use_decoder: bool = True
    faithful_eq10: bool = True
    dtype: str = "float32"
    vocab_min_count: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.scheduler != "linear":
            raise ValueError(f"unsupported scheduler {self.scheduler!r}")
        if self.label_set not in LABEL_SETS:
            raise ValueError(f"unknown label set {self.label_set!r}")

    @property
    def schedule(self) -> SoftLabelSchedule:
        return SoftLabelSchedule(self.soft_label_start, self.soft_label_warm, self.soft_label)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(
                d_model=self.d_model,
                layers=self.layers,
                heads=self.heads,
                ffn_mult=self.ffn_mult,
                max_len=self.max_sequence,
                dropout=self.dropout,
            ),
            heads=HeadConfig(
                d_label=self.d_label,
                d_biaff=self.d_biaff,
                use_decoder=self.use_decoder,
                faithful_eq10=self.faithful_eq10,
                dropout=self.dropout,
            ),
            label_set=self.label_set,
            dtype=self.dtype,
            init_seed=self.seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def parse_config_text(text: str) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Values are typed by field."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        out[key] = coerce(key, value)
    return out


def coerce(key: str, value: str) -> Any:
    kind = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[key]
    kind = str(kind)
    if value.lower() in ("none", "null") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if kind.startswith("int"):
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# optimisation


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``warmup_fraction * total_steps``, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    return cfg.lr * max(0.0, (total_steps - step) / (total_steps - warmup))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adamw_step(params: list[ad.Parameter], state: AdamState, lr: float, cfg: TrainConfig) -> bool:
    """One decoupled-weight-decay Adam update from ``p.grad``; returns False if skipped."""
    if not all(np.isfinite(p.grad).all() for p in params):
        state.skipped += 1
        return False
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * update).astype(p.data.dtype)
    return True


def clip_grad_norm(params: list[ad.Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: dict[str, Any]
    params: dict[str, np.ndarray]
    moments: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.manifest["config"])

    @property
    def vocab(self) -> Vocab:
        return Vocab(list(self.manifest["vocab"]))

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])


def make_checkpoint(model: JointModel, cfg: TrainConfig, epoch: int, opt: AdamState | None, extra: dict | None = None) -> Checkpoint:
    params = {p.name: p.data.astype("<f4").copy() for p in model.params}
    moments = None
    if opt is not None and opt.m:
        moments = {n: (opt.m[n].astype("<f4").copy(), opt.v[n].astype("<f4").copy()) for n in params}
    manifest = {
        "format_version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": epoch,
        "global_step": opt.step if opt else 0,
        "skipped_steps": opt.skipped if opt else 0,
        "vocab": model.vocab.tokens,
        "extra": extra or {},
    }
    return Checkpoint(manifest, params, moments)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = dict(ckpt.manifest)
    manifest["params"] = entries
    manifest["param_bytes"] = offset
    moment_blobs = []
    if ckpt.moments is not None:
        for which in (0, 1):
            for name in ckpt.params:
                moment_blobs.append(np.ascontiguousarray(ckpt.moments[name][which], dtype="<f4").tobytes())
    manifest["moment_bytes"] = sum(len(b) for b in moment_blobs)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs) + b"".join(moment_blobs))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<I", raw, 5)
    if 9 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[9 : 9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from None
    if manifest.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} != {CKPT_VERSION}")
    body = raw[9 + mlen :]
    param_bytes, moment_bytes = manifest["param_bytes"], manifest["moment_bytes"]
    if len(body) != param_bytes + moment_bytes:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, manifest declares {param_bytes + moment_bytes}")
    params: dict[str, np.ndarray] = {}
    entries = manifest["params"]
    for i, entry in enumerate(entries):
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if i == 0 and off != 0:
            raise CheckpointError(f"{path}: parameter {name!r} at offset {off}, expected 0")
        end = entries[i + 1]["offset"] if i + 1 < len(entries) else param_bytes
        if off + nbytes != end:
            raise CheckpointError(f"{path}: parameter {name!r} with shape {shape} spans {nbytes} bytes, but {end - off} are stored")
        params[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
    moments = None
    if moment_bytes:
        if moment_bytes != 2 * param_bytes:
            raise CheckpointError(f"{path}: moment payload size {moment_bytes} != 2 x {param_bytes}")
        mb = body[param_bytes:]
        moments = {}
        for name, arr in params.items():
            off = next(e["offset"] for e in manifest["params"] if e["name"] == name)
            m = np.frombuffer(mb, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape).copy()
            v = np.frombuffer(mb, dtype="<f4", count=arr.size, offset=param_bytes + off).reshape(arr.shape).copy()
            moments[name] = (m, v)
    for key in ("params", "param_bytes", "moment_bytes"):
        manifest.pop(key)
    return Checkpoint(manifest, params, moments)


def model_from_checkpoint(ckpt: Checkpoint, precomputed: PrecomputedEncoder | None = None) -> JointModel:
    cfg = ckpt.config
    model = JointModel(ckpt.vocab, cfg.model_config(), precomputed=precomputed)
    names = set(model.store.names())
    if names != set(ckpt.params):
        missing, extra = sorted(names - set(ckpt.params)), sorted(set(ckpt.params) - names)
        raise CheckpointError(f"checkpoint parameters do not match the model: missing {missing}, unexpected {extra}")
    for p in model.params:
        stored = ckpt.params[p.name]
        if stored.shape != p.shape:
            raise CheckpointError(f"parameter {p.name!r}: checkpoint shape {stored.shape} != model shape {p.shape}")
        p.data[...] = stored
    return model


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_ser: float
    loss_re: float
    total: float
    lr: float


@dataclass
class TrainResult:
    model: JointModel
    log: list[dict[str, Any]]
    steps: list[StepRecord]
    best: Checkpoint | None  # None when a resumed run never beat the stored best
    last: Checkpoint


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, stream])))


def evaluate_model(model: JointModel, examples, threshold: float = 0.5, gold_candidates: bool = False, batch_size: int = 8) -> MetricsReport:
    preds = model.predict(examples, batch_size=batch_size, gold_candidates=gold_candidates)
    return evaluate([e.doc for e in examples], [e.tdoc for e in examples], preds, model.labels, threshold)


def train(
    train_docs: list[Document],
    cfg: TrainConfig,
    val_docs: list[Document] | None = None,
    precomputed: PrecomputedEncoder | None = None,
    vocab: Vocab | None = None,
    resume: Checkpoint | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Fit the joint model; returns the best (by validation RE F1) and last checkpoints.

    Without validation documents the last epoch is also the best.  A resumed
    run only reports a best checkpoint if it improves on the one it resumed from.
    """
    if not train_docs:
        raise ValueError("training set is empty")
    if resume is not None:
        vocab = resume.vocab
        cfg = resume.config if cfg is None else cfg
    vocab = vocab or build_vocab(train_docs, cfg.vocab_min_count)
    model = JointModel(vocab, cfg.model_config(), precomputed=precomputed)
    params = model.params
    opt = AdamState()
    start_epoch = 1
    best_f1, best_epoch = -1.0, 0
    history: list[dict[str, Any]] = []
    best_ckpt: Checkpoint | None = None
    if resume is not None:
        for p in params:
            p.data[...] = resume.params[p.name]
        opt.step = resume.manifest["global_step"]
        opt.skipped = resume.manifest.get("skipped_steps", 0)
        if resume.moments is not None:
            for p in params:
                m, v = resume.moments[p.name]
                opt.m[p.name] = m.astype(p.dtype)
                opt.v[p.name] = v.astype(p.dtype)
        start_epoch = resume.epoch + 1
        extra = resume.manifest.get("extra", {})
        best_f1, best_epoch = extra.get("best_f1", -1.0), extra.get("best_epoch", 0)
        history = list(extra.get("history", []))

    examples = model.prepare(train_docs)
    val_examples = model.prepare(val_docs) if val_docs else None
    n_batches = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    schedule = cfg.schedule

    log_file = None
    if log_path is not None:
        log_file = open(log_path, "a" if resume is not None else "w", encoding="utf-8")
        if resume is None:
            log_file.write(json.dumps({"config": cfg.to_dict()}) + "\n")
    steps: list[StepRecord] = []
    bad_in_a_row = 0
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            if opt.step >= total_steps:
                break
            order = _epoch_rng(cfg.seed, epoch, 0).permutation(len(examples))
            drop_rng = _epoch_rng(cfg.seed, epoch, 1)
            sums = np.zeros(3)
            count = 0
            lr = 0.0
            for start in range(0, len(examples), cfg.batch_size):
                if opt.step >= total_steps:
                    break
                batch = [examples[i] for i in order[start : start + cfg.batch_size]]
                model.store.zero_grad()
                res = model.forward(batch, training=True, epoch=epoch, schedule=schedule, rng=drop_rng)
                loss = res.loss
                ser, rel, total = loss.values()
                lr = lr_at(opt.step, total_steps, cfg)
                steps.append(StepRecord(epoch, opt.step, ser, rel, total, lr))
                if not math.isfinite(total):
                    bad_in_a_row += 1
                    opt.skipped += 1
                    if bad_in_a_row >= 2:
                        raise TrainingDiverged(f"non-finite loss on two consecutive steps (epoch {epoch}, step {opt.step})")
                    continue
                bad_in_a_row = 0
                # the objective is exactly one addition of the two task losses
                assert total == float(loss.loss_ser.data + loss.loss_re.data)
                loss.total.backward()
                clip_grad_norm(params, cfg.clip_norm)
                adamw_step(params, opt, lr, cfg)
                sums += (ser, rel, total)
                count += 1
            means = sums / max(count, 1)
            record: dict[str, Any] = {
                "epoch": epoch,
                "loss_ser": float(means[0]),
                "loss_re": float(means[1]),
                "loss": float(means[2]),
                "alpha": alpha(epoch, schedule),
                "lr": lr,
                "val_cell_acc": None,
                "val_re_f1": None,
            }
            if val_examples:
                report = evaluate_model(model, val_examples, cfg.re_threshold)
                record["val_cell_acc"] = report.cell_accuracy
                record["val_re_f1"] = report.re.f1
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            score = record["val_re_f1"] if record["val_re_f1"] is not None else float(epoch)
            extra = {"history": history}
            if score > best_f1:
                best_f1, best_epoch = score, epoch
                best_ckpt = make_checkpoint(model, cfg, epoch, opt, {"best_f1": best_f1, "best_epoch": best_epoch})
            extra.update(best_f1=best_f1, best_epoch=best_epoch)
            if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(make_checkpoint(model, cfg, epoch, opt, extra), Path(checkpoint_dir) / f"epoch{epoch:04d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    last_epoch = history[-1]["epoch"] if history else start_epoch - 1
    last = make_checkpoint(model, cfg, last_epoch, opt, {"history": history, "best_f1": best_f1, "best_epoch": best_epoch})
    if best_ckpt is None and resume is None:
        best_ckpt = last
    return TrainResult(model, history, steps, best_ckpt, last)


def run_log_lines(result: TrainResult, cfg: TrainConfig) -> str:
    lines = [json.dumps({"config": cfg.to_dict()})] + [json.dumps(r) for r in result.log]
    return "\n".join(lines) + "\n"
