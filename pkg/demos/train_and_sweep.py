"""Train a small AMP-GNN and compare it with AMP on shared channel draws.

Takes well under a minute on one core. Four short epochs are not enough
to catch up with AMP, so expect AMP-GNN to trail here. Use ``ampgnn train``
with the defaults (20 epochs x 2000 samples) for the desk-scale model.
"""

import tempfile
from pathlib import Path

from ampgnn import amp_gnn, bench, trainer

cfg = trainer.TrainConfig(M=8, users=(8,), epochs=4, samples_per_epoch=1024, val_samples=256, snr_db=(6.0, 14.0))
res = trainer.train(cfg, progress=lambda row: print(f"epoch {row['epoch']}: val loss {row['val_loss']:.4f}, val SER {row['val_ser']:.4f}"))
print("best epoch", res.best_epoch)

out = Path(tempfile.mkdtemp())
amp_gnn.save_bundle(out / "demo.agnn", res.model)
model = amp_gnn.load_bundle(out / "demo.agnn")

exp = bench.ExperimentConfig(M=8, N=8, Q=4, detectors=("mmse", "amp", "ampgnn"), snr_db=(8.0, 12.0), samples=1000)
report = bench.sweep(exp, {"ampgnn": model})
print(report.to_csv())
