"""
Three-mode inflow series: ingestion, cleaning, normalization, windowing and
a seeded synthetic generator.

A day is 36 half-hour slots covering 05:00-23:00. Mode order is always
(subway, taxi, bus).
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import datetime as dt
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigurationError, DataError, ImputationError,
                     NormalizationError, ParseError)

logger = logging.getLogger(__name__)

MODES = ("subway", "taxi", "bus")
SLOTS_PER_DAY = 36
FIRST_SLOT = dt.time(5, 0)
SLOT_MINUTES = 30


def slot_time(slot: int) -> dt.time:
    minutes = 5 * 60 + SLOT_MINUTES * slot
    return dt.time(minutes // 60, minutes % 60)


@dataclass
class FlowSeries:
    """Per-day, per-slot, per-mode inflow counts.

    ``values`` and ``missing`` have shape (days, 36, 3). Missing entries hold 0
    in ``values`` until imputed.
    """
    days: list
    values: np.ndarray
    missing: np.ndarray
    region_label: str = ""
    dropped_rows: int = 0
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing = np.asarray(self.missing, dtype=bool)
        n = len(self.days)
        if self.values.shape != (n, SLOTS_PER_DAY, 3) or self.missing.shape != self.values.shape:
            raise DataError(f"series arrays must be ({n}, {SLOTS_PER_DAY}, 3), got "
                            f"{self.values.shape} / {self.missing.shape}")
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise DataError("series days must be strictly increasing")
        if not self.normalized and np.any(self.values[~self.missing] < 0):
            raise DataError("inflow counts must be non-negative")

    @property
    def n_days(self):
        return len(self.days)

    def timestamps(self):
        return [dt.datetime.combine(d, slot_time(s)) for d in self.days for s in range(SLOTS_PER_DAY)]

    def replace(self, **changes) -> "FlowSeries":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class NormalizationParams:
    min: np.ndarray
    max: np.ndarray

    def to_dict(self):
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


@dataclass
class Sample:
    X: np.ndarray          # (3, L)
    y: np.ndarray          # (3,)
    day: dt.date
    slot: int
    day_index: int = 0

    @property
    def target_index(self):
        return self.day_index * SLOTS_PER_DAY + self.slot


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    norm: NormalizationParams | None
    L: int


def stack(samples):
    """Batch a list of samples into (B, 3, L) inputs and (B, 3) targets."""
    return np.stack([s.X for s in samples]), np.stack([s.y for s in samples])


# ingestion ------------------------------------------------------------------

def load_csv(path, region_label: str = "") -> FlowSeries:
    """Read ``timestamp,subway,taxi,bus`` rows into a FlowSeries.

    Rows outside 05:00-23:00 are dropped and counted in ``dropped_rows``;
    service-hour slots absent from the file are marked missing.
    """
    rows = {}
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", *MODES]:
            raise ParseError(f"expected header 'timestamp,subway,taxi,bus', got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            try:
                ts = dt.datetime.fromisoformat(row[0].strip())
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", line=lineno) from None
            if ts.minute % SLOT_MINUTES or ts.second or ts.microsecond:
                raise ParseError(f"timestamp {row[0]!r} is not 30-minute aligned", line=lineno)
            try:
                counts = [float(c) for c in row[1:]]
            except ValueError:
                raise ParseError(f"non-numeric count in {row[1:]}", line=lineno) from None
            if any(not math.isfinite(c) or c < 0 for c in counts):
                raise ParseError(f"counts must be finite and non-negative: {row[1:]}", line=lineno)
            if ts in rows:
                raise DataError(f"line {lineno}: duplicate timestamp {ts.isoformat()}")
            slot = (ts.hour * 60 + ts.minute - 5 * 60) // SLOT_MINUTES
            if not 0 <= slot < SLOTS_PER_DAY:
                dropped += 1
                rows[ts] = None
                continue
            rows[ts] = counts
    if dropped:
        logger.warning("dropped %d rows outside service hours", dropped)

    kept = {ts: c for ts, c in rows.items() if c is not None}
    days = sorted({ts.date() for ts in kept})
    index = {d: i for i, d in enumerate(days)}
    values = np.zeros((len(days), SLOTS_PER_DAY, 3))
    missing = np.ones_like(values, dtype=bool)
    for ts, counts in kept.items():
        slot = (ts.hour * 60 + ts.minute - 5 * 60) // SLOT_MINUTES
        values[index[ts.date()], slot] = counts
        missing[index[ts.date()], slot] = False
    return FlowSeries(days, values, missing, region_label=region_label, dropped_rows=dropped)


def write_csv(series: FlowSeries, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *MODES])
        for di, day in enumerate(series.days):
            for s in range(SLOTS_PER_DAY):
                if series.missing[di, s].all():
                    continue
                ts = dt.datetime.combine(day, slot_time(s))
                w.writerow([ts.isoformat(timespec="minutes"),
                            *(str(int(round(v))) for v in series.values[di, s])])


# cleaning -------------------------------------------------------------------

def filter_weekdays(series: FlowSeries) -> FlowSeries:
    keep = [i for i, d in enumerate(series.days) if d.weekday() < 5]
    if not keep:
        raise DataError("no weekday data left after filtering")
    return series.replace(days=[series.days[i] for i in keep],
                          values=series.values[keep], missing=series.missing[keep])


def impute_missing(series: FlowSeries) -> FlowSeries:
    """Fill each missing cell with the mean of the same weekday/slot/mode on other days."""
    if not series.missing.any():
        return series
    values = series.values.copy()
    weekdays = np.array([d.weekday() for d in series.days])
    for di, s, m in zip(*np.nonzero(series.missing)):
        donors = (weekdays == weekdays[di]) & ~series.missing[:, s, m]
        if not donors.any():
            raise ImputationError(
                f"no donor values for {series.days[di].strftime('%A')} slot {s} mode {MODES[m]}"
                f" (missing on {series.days[di].isoformat()})")
        values[di, s, m] = series.values[donors, s, m].mean()
    return series.replace(values=values, missing=np.zeros_like(series.missing))


# normalization --------------------------------------------------------------

def fit_normalization(series: FlowSeries, train_slot_range=None) -> NormalizationParams:
    """Per-mode min/max over flat slot indices ``[start, stop)`` (day*36 + slot)."""
    flat = series.values.reshape(-1, 3)
    miss = series.missing.reshape(-1, 3)
    start, stop = (0, flat.shape[0]) if train_slot_range is None else train_slot_range
    flat, miss = flat[start:stop], miss[start:stop]
    lo = np.empty(3)
    hi = np.empty(3)
    for m in range(3):
        col = flat[~miss[:, m], m]
        if col.size == 0:
            raise NormalizationError(f"no observed {MODES[m]} values in fitting range")
        lo[m], hi[m] = col.min(), col.max()
        if not hi[m] > lo[m]:
            raise NormalizationError(f"{MODES[m]} is constant ({lo[m]}) over the fitting range")
    return NormalizationParams(lo, hi)


def normalize_values(values, params: NormalizationParams):
    """Map to [-1, 1] on the fitted range; values outside it land outside [-1, 1]."""
    return 2.0 * (np.asarray(values, dtype=np.float64) - params.min) / (params.max - params.min) - 1.0


def denormalize(values, params: NormalizationParams):
    return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (params.max - params.min) + params.min


def normalize(series: FlowSeries, params: NormalizationParams) -> FlowSeries:
    return series.replace(values=normalize_values(series.values, params), normalized=True)


# windowing ------------------------------------------------------------------

def sliding_window(series: FlowSeries, L: int) -> list:
    """Per-day windows: each day yields 36 - L samples, none crossing midnight."""
    if not (isinstance(L, (int, np.integer)) and 1 <= L < SLOTS_PER_DAY):
        raise ConfigurationError(f"window length must be in [1, {SLOTS_PER_DAY}), got {L}")
    out = []
    for di, day in enumerate(series.days):
        v = series.values[di]
        for t in range(L, SLOTS_PER_DAY):
            out.append(Sample(X=v[t - L:t].T.copy(), y=v[t].copy(), day=day, slot=t, day_index=di))
    return out


def split_counts(n: int, ratios=(0.7, 0.1, 0.2)):
    """Floor the validation and test shares; the remainder goes to training."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigurationError(f"split of {n} samples by {ratios} leaves an empty part")
    return n_train, n_val, n_test


def chronological_split(samples, ratios=(0.7, 0.1, 0.2), norm=None) -> DatasetSplit:
    if not samples:
        raise ConfigurationError("cannot split an empty sample list")
    ordered = sorted(samples, key=lambda s: (s.day, s.slot))
    n_train, n_val, _ = split_counts(len(ordered), ratios)
    return DatasetSplit(train=ordered[:n_train], validation=ordered[n_train:n_train + n_val],
                        test=ordered[n_train + n_val:], norm=norm, L=ordered[0].X.shape[1])


def prepare_dataset(series: FlowSeries, L: int, ratios=(0.7, 0.1, 0.2), norm=None) -> DatasetSplit:
    """Weekday filter, impute, normalize on the training range, window, split.

    When ``norm`` is given it is reused instead of being fitted.
    """
    series = impute_missing(filter_weekdays(series))
    if norm is None:
        per_day = SLOTS_PER_DAY - L
        n_train, _, _ = split_counts(series.n_days * per_day, ratios)
        last = n_train - 1
        # flat index one past the last training target
        stop = (last // per_day) * SLOTS_PER_DAY + L + last % per_day + 1
        norm = fit_normalization(series, (0, stop))
    samples = sliding_window(normalize(series, norm), L)
    return chronological_split(samples, ratios, norm=norm)


# synthetic data -----------------------------------------------------------------

@dataclass
class ModeProfile:
    amplitude: float
    morning: float
    evening: float
    width: float
    base: float
    noise: float = 0.05

    def validate(self, name):
        if self.amplitude <= 0 or self.width <= 0:
            raise ConfigurationError(f"{name}: amplitude and width must be positive")
        if self.base < 0 or self.noise < 0:
            raise ConfigurationError(f"{name}: base and noise must be non-negative")


def _hub_profiles():
    # subway is the steadiest mode; taxi and bus fluctuate more
    subway = ModeProfile(amplitude=1800.0, morning=6.0, evening=26.0, width=2.0, base=200.0, noise=0.03)
    # taxi peaks one slot later and lasts longer than subway
    taxi = ModeProfile(amplitude=700.0, morning=subway.morning + 1, evening=subway.evening + 1,
                       width=subway.width * 1.5, base=150.0, noise=0.08)
    bus = ModeProfile(amplitude=500.0, morning=6.0, evening=26.0, width=2.0, base=60.0, noise=0.08)
    return {"subway": subway, "taxi": taxi, "bus": bus}


@dataclass
class SynthConfig:
    """Two Gaussian rush-hour bumps per day plus a base level and noise.

    ``noise`` is a standard deviation relative to each mode's amplitude. Noise is
    AR(1) within a day with coefficient ``noise_ar``. Each day all modes share a
    bump scale drawn from N(1, ``day_scale``) and a shift of the morning and of
    the evening peak drawn from N(0, ``peak_jitter``) slots.
    """
    n_days: int = 25
    start_date: dt.date = dt.date(2016, 2, 29)
    region_label: str = "hub"
    noise_ar: float = 0.7
    day_scale: float = 0.1
    peak_jitter: float = 0.5
    modes: dict = field(default_factory=_hub_profiles)

    def validate(self):
        if self.n_days < 1:
            raise ConfigurationError("n_days must be at least 1")
        if not 0 <= self.noise_ar < 1:
            raise ConfigurationError("noise_ar must lie in [0, 1)")
        if self.day_scale < 0 or self.peak_jitter < 0:
            raise ConfigurationError("day_scale and peak_jitter must be non-negative")
        if set(self.modes) != set(MODES):
            raise ConfigurationError(f"profiles needed for exactly {MODES}")
        for name, p in self.modes.items():
            p.validate(name)

    def noiseless(self) -> "SynthConfig":
        """Same profile with every random component switched off."""
        modes = {k: dataclasses.replace(v, noise=0.0) for k, v in self.modes.items()}
        return dataclasses.replace(self, modes=modes, day_scale=0.0, peak_jitter=0.0)


def load_synth_config(path) -> SynthConfig:
    """Read an INI file: ``[general]`` keys plus one section per mode."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    cfg = SynthConfig()
    known = {"n_days", "start_date", "region_label", "noise_ar", "day_scale", "peak_jitter"}
    try:
        if parser.has_section("general"):
            g = parser["general"]
            for key in g:
                if key not in known:
                    raise ConfigurationError(f"unknown key general.{key}")
            cfg.n_days = g.getint("n_days", cfg.n_days)
            if "start_date" in g:
                cfg.start_date = dt.date.fromisoformat(g["start_date"])
            cfg.region_label = g.get("region_label", cfg.region_label)
            cfg.noise_ar = g.getfloat("noise_ar", cfg.noise_ar)
            cfg.day_scale = g.getfloat("day_scale", cfg.day_scale)
            cfg.peak_jitter = g.getfloat("peak_jitter", cfg.peak_jitter)
        fields = {f.name for f in dataclasses.fields(ModeProfile)}
        for section in parser.sections():
            if section == "general":
                continue
            if section not in MODES:
                raise ConfigurationError(f"unknown section [{section}]")
            prof = cfg.modes[section]
            for key, raw in parser[section].items():
                if key not in fields:
                    raise ConfigurationError(f"unknown key {section}.{key}")
                setattr(prof, key, float(raw))
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    cfg.validate()
    return cfg


def _bumps(p: ModeProfile, slots, shift=(0.0, 0.0)):
    g = lambda c: np.exp(-0.5 * ((slots - c) / p.width) ** 2)  # noqa: E731
    return g(p.morning + shift[0]) + g(p.evening + shift[1])


def weekday_dates(start: dt.date, n: int):
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def synthesize(config: SynthConfig | None = None, seed: int = 0) -> FlowSeries:
    config = config or SynthConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    days = weekday_dates(config.start_date, config.n_days)
    slots = np.arange(SLOTS_PER_DAY, dtype=np.float64)
    values = np.zeros((len(days), SLOTS_PER_DAY, 3))
    innov = math.sqrt(1.0 - config.noise_ar ** 2)
    for di in range(len(days)):
        scale = 1.0 + config.day_scale * rng.standard_normal()
        shift = config.peak_jitter * rng.standard_normal(2)
        for m, name in enumerate(MODES):
            p = config.modes[name]
            clean = p.amplitude * scale * _bumps(p, slots, shift) + p.base
            eps = np.empty(SLOTS_PER_DAY)
            eps[0] = rng.standard_normal()
            for s in range(1, SLOTS_PER_DAY):
                eps[s] = config.noise_ar * eps[s - 1] + innov * rng.standard_normal()
            values[di, :, m] = clean + p.noise * p.amplitude * eps
    values = np.maximum(np.round(values), 0.0)
    return FlowSeries(days, values, np.zeros(values.shape, dtype=bool), region_label=config.region_label)
