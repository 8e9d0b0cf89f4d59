"""
Training the residual Transformer and reading its score matrices
=================================================================

The default model has four attention layers over the mode axis, so
every head produces a 3x3 matrix saying how much each mode's history
weighs in each mode's next value.
"""

import numpy as np

from flowcast import attention as at
from flowcast import dataflow as df
from flowcast import models, training as tr

split = df.prepare_dataset(df.synthesize(seed=0), L=12)
model = models.build_res_transformer(models.ModelConfig(seed=0))
print("parameters", model.n_parameters())

model, hist = tr.train(model, split, tr.TrainConfig(epochs=30, seed=0))
print(f"best epoch {hist.best_epoch}, val loss {min(hist.val_loss):.4f}")

report = tr.evaluate(model, split.test, split.norm)
for mode, m in report.rows.items():
    print(f"{mode:7s} RMSE {m.rmse:7.2f}  MAE {m.mae:7.2f}  WMAPE {100 * m.wmape:5.2f}%")

# one morning-peak sample from the test days
sample = next(s for s in split.test if s.slot == 14)
scores = at.extract_scores(model, sample.X)
print(len(scores), "score matrices; layer 0 head 0:")
print(np.array2string(scores[0].values, precision=3))
mean = np.mean([s.values for s in scores], axis=0)
print("averaged over layers and heads:")
print(np.array2string(mean, precision=3))
