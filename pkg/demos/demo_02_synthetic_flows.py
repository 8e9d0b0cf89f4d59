"""
Synthetic three-mode inflows and the preprocessing chain
=========================================================

A seeded generator stands in for station records: two rush-hour bumps
per weekday for subway, taxi and bus. The chain below filters weekdays,
imputes gaps, scales on the training range and cuts per-day windows.
"""

import numpy as np

from flowcast import dataflow as df

series = df.synthesize(df.SynthConfig(), seed=0)
print(series.n_days, "weekdays from", series.days[0], "to", series.days[-1])

# mean profile per mode, one value per half-hour slot
profile = series.values.mean(axis=0)
for m, mode in enumerate(df.MODES):
    peak = int(np.argmax(profile[:, m]))
    print(f"{mode:7s} daily total {profile[:, m].sum():8.0f}  busiest slot {df.slot_time(peak)}")

# knock out a few cells and let same-weekday means fill them
rng = np.random.default_rng(1)
holes = rng.random(series.values.shape) < 0.02
holes[:5] = False
holed = series.replace(missing=holes, values=np.where(holes, 0.0, series.values))
filled = df.impute_missing(holed)
print("imputed cells", int(holes.sum()), "mean abs change",
      float(np.abs(filled.values - series.values)[holes].mean()))

# windows of L=12 slots predicting slot L, split in time order
split = df.prepare_dataset(filled, L=12)
print("train/val/test samples", len(split.train), len(split.validation), len(split.test))
print("scaling min", split.norm.min, "max", split.norm.max)
s = split.train[0]
print("first sample X shape", s.X.shape, "target slot", df.slot_time(s.slot))
