"""
Ablations and baselines on one split
=====================================

Every model sees the same windows, seed and optimizer settings. Variant B
drops both the convolutions and the shortcut; BPNN is a plain dense net
on the flattened window. The comparison is directional only.
"""

from flowcast import dataflow as df
from flowcast import models, training as tr

split = df.prepare_dataset(df.synthesize(seed=0), L=12)
cfg = tr.TrainConfig(epochs=150, seed=0, early_stop_patience=20)

rows = []
for arch in ("res-transformer", "b", "c", "bpnn", "cnn1d"):
    model = models.build_model(arch, models.ModelConfig(seed=0))
    model, hist = tr.train(model, split, cfg)
    rep = tr.evaluate(model, split.test, split.norm)["ALL"]
    rows.append((arch, model.n_parameters(), len(hist.val_loss), rep.rmse, rep.mae))
    print(f"{arch:16s} params {rows[-1][1]:6d}  epochs {rows[-1][2]:3d}  RMSE {rep.rmse:6.2f}  MAE {rep.mae:6.2f}")

best = min(rows, key=lambda r: r[3])
print("lowest aggregate RMSE:", best[0])
