"""One set of GNN weights serves any number of users.

A model trained on a mix of 4 and 8 users is evaluated on 6 users,
next to plain AMP on the same draws. The run is short (under a minute), so
the model still trails AMP; the point is that it runs at an unseen size.
"""

from ampgnn import bench, trainer

cfg = trainer.TrainConfig(M=8, users=(4, 8), epochs=4, samples_per_epoch=1024, val_samples=256, snr_db=(6.0, 14.0))
mixture = trainer.train(cfg).model

exp = bench.ExperimentConfig(M=8, N=6, Q=4, detectors=(), snr_db=(8.0, 10.0, 12.0), samples=1000)
report = bench.robustness(exp, mixture, warn=print)
print(report.to_csv())
