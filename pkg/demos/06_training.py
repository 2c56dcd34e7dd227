"""Training the joint model and reading the results.

A short run on generated forms, logging per-epoch losses, the soft-label
weight and validation scores, then an evaluation report and a checkpoint
round trip.
"""

import json
import tempfile
from pathlib import Path

from formlink import syngen
from formlink.trainer import TrainConfig, evaluate_model, load_checkpoint, model_from_checkpoint, save_checkpoint, train

docs = syngen.generate(syngen.SynSpec(seed=7, num_docs=60))
train_docs, test_docs = docs[:48], docs[48:]
cfg = TrainConfig(lr=1e-3, epochs=30, soft_label_start=10, soft_label_warm=5, seed=0)

result = train(train_docs, cfg, val_docs=test_docs)
for rec in result.log:
    print(
        f"epoch {rec['epoch']:>2}  loss {rec['loss']:.3f} (ser {rec['loss_ser']:.3f}, re {rec['loss_re']:.3f})"
        f"  alpha {rec['alpha']:.2f}  val CA {rec['val_cell_acc']:.3f}  val RE F1 {rec['val_re_f1']:.3f}"
    )

report = evaluate_model(result.model, result.model.prepare(test_docs))
print(json.dumps(report.to_dict()["re"], indent=2))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "best.ckpt"
    save_checkpoint(result.best, path)
    model = model_from_checkpoint(load_checkpoint(path))
    again = evaluate_model(model, model.prepare(test_docs))
    print(f"best epoch {result.best.epoch}; reloaded RE F1 {again.re.f1:.4f}")
