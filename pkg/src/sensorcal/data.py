"""Paired low-cost / reference sensor data: CSV I/O, cleaning, splitting, windowing.

One flat CSV holds every sensor and all three particulate features::

    timestamp,sensor_id,lowcost_pm10,lowcost_pm2_5,lowcost_pm1,ref_pm10,ref_pm2_5,ref_pm1

Timestamps are ISO-8601 at minute granularity; an empty cell is an invalid
reading. Invalid readings are carried as NaN until :func:`clean` drops them.
"""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sensorcal.errors import DataError

FEATURES = ("pm10", "pm2_5", "pm1")
COLUMNS = (
    "timestamp",
    "sensor_id",
    "lowcost_pm10",
    "lowcost_pm2_5",
    "lowcost_pm1",
    "ref_pm10",
    "ref_pm2_5",
    "ref_pm1",
)
PHYSICAL_CAP = 1000.0  # ug/m3, any PM fraction
OUTLIER_WIDTH = 11
OUTLIER_MADS = 5.0
MAX_REMOVED_FRACTION = 0.5
GAP_TOLERANCE = 3.0


@dataclass(frozen=True)
class SensorRecord:
    timestamp: datetime
    sensor_id: str
    feature: str
    lowcost: float  # NaN marks an invalid reading
    reference: float


@dataclass
class SeriesPair:
    sensor_id: str
    feature: str
    t: np.ndarray  # minutes since the epoch, float
    x: np.ndarray  # low-cost readings
    y: np.ndarray  # reference readings

    def __len__(self):
        return len(self.x)

    @property
    def granularity(self):
        """Smallest gap between consecutive readings, in minutes."""
        if len(self.t) < 2:
            return math.nan
        return float(np.min(np.diff(self.t)))


@dataclass(frozen=True)
class WindowSample:
    window: np.ndarray
    target: float
    sensor_id: str
    t: float


@dataclass(frozen=True)
class SplitPlan:
    train: tuple
    validation: str
    test: str

    def to_dict(self):
        return {"train": list(self.train), "validation": self.validation, "test": self.test}


@dataclass
class DiscardReport:
    entries: list = field(default_factory=list)

    def add(self, sensor_id, kept, removed, discarded):
        self.entries.append(
            {"sensor_id": sensor_id, "kept": int(kept), "removed": int(removed), "discarded": bool(discarded)}
        )

    def to_list(self):
        return list(self.entries)


def parse_time(text):
    try:
        return datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"bad timestamp {text!r}") from exc


def _minutes(ts):
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None) - ts.utcoffset()
    return (ts - datetime(1970, 1, 1)).total_seconds() / 60.0


def _reading(text):
    text = text.strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        return math.nan


def load_csv(path, feature="pm10"):
    """Read every row of ``path`` for one feature, validating ordering and uniqueness."""
    if feature not in FEATURES:
        raise DataError(f"unknown feature {feature!r}; choose from {FEATURES}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    records = []
    last_seen = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("timestamp", "sensor_id", f"lowcost_{feature}", f"ref_{feature}") if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            ts = parse_time(row["timestamp"])
            sid = row["sensor_id"].strip()
            prev = last_seen.get(sid)
            if prev is not None:
                if ts == prev:
                    raise DataError(f"duplicate timestamp {ts.isoformat()} for sensor {sid}")
                if ts < prev:
                    raise DataError(f"timestamps out of order for sensor {sid} at {ts.isoformat()}")
            last_seen[sid] = ts
            records.append(
                SensorRecord(ts, sid, feature, _reading(row[f"lowcost_{feature}"]), _reading(row[f"ref_{feature}"]))
            )
    return records


def _rolling_median_and_mad(v, width=OUTLIER_WIDTH):
    half = width // 2
    padded = np.pad(v, half, mode="edge")
    win = sliding_window_view(padded, width)
    med = np.median(win, axis=1)
    mad = np.median(np.abs(win - med[:, None]), axis=1)
    return med, mad


def outlier_mask(v, width=OUTLIER_WIDTH, n_mads=OUTLIER_MADS, cap=PHYSICAL_CAP):
    """True where a reading sits more than ``n_mads`` rolling MADs off the rolling median, or above the cap."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return np.zeros(0, dtype=bool)
    med, mad = _rolling_median_and_mad(v, width)
    return (np.abs(v - med) > n_mads * mad) | (v > cap)


def group_records(records):
    groups = defaultdict(list)
    for r in records:
        groups[(r.sensor_id, r.feature)].append(r)
    return groups


def clean(records):
    """Drop invalid and outlying readings; discard sensors that lost more than half.

    Returns ``(pairs, report)`` with pairs sorted by sensor id.
    """
    pairs = []
    report = DiscardReport()
    for (sid, feature), rows in sorted(group_records(records).items()):
        t = np.array([_minutes(r.timestamp) for r in rows])
        x = np.array([r.lowcost for r in rows], dtype=np.float64)
        y = np.array([r.reference for r in rows], dtype=np.float64)
        valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0)
        keep = valid.copy()
        idx = np.flatnonzero(valid)
        if idx.size:
            bad = outlier_mask(x[idx]) | outlier_mask(y[idx])
            keep[idx[bad]] = False
        total = len(rows)
        kept = int(keep.sum())
        removed = total - kept
        discarded = total == 0 or removed / total > MAX_REMOVED_FRACTION
        report.add(sid, kept, removed, discarded)
        if not discarded:
            pairs.append(SeriesPair(sid, feature, t[keep], x[keep], y[keep]))
    return pairs, report


def split_by_sensor(pairs):
    """Alphabetical split: last sensor tests, second-to-last validates, the rest train."""
    ids = sorted({p.sensor_id if isinstance(p, SeriesPair) else str(p) for p in pairs})
    if len(ids) < 3:
        raise DataError(f"need at least 3 sensors for a train/validation/test split, got {len(ids)}")
    return SplitPlan(train=tuple(ids[:-2]), validation=ids[-2], test=ids[-1])


def window_end_indices(t, n, gap_tolerance=GAP_TOLERANCE, granularity=None):
    """0-based indices i such that readings i-n+1..i form an admissible window."""
    t = np.asarray(t, dtype=np.float64)
    if n < 2:
        raise DataError(f"window length must be >= 2, got {n}")
    if len(t) < n:
        return np.zeros(0, dtype=int)
    gaps = np.diff(t)
    mu = float(gaps.min()) if granularity is None else granularity
    broken = (gaps > gap_tolerance * mu).astype(int)
    # broken[k] flags the step between readings k and k+1; a window ending at i uses steps i-n+1..i-1
    csum = np.concatenate([[0], np.cumsum(broken)])
    ends = np.arange(n - 1, len(t))
    bad = csum[ends] - csum[ends - n + 1]
    return ends[bad == 0]


def make_windows(pair, n, gap_tolerance=GAP_TOLERANCE):
    ends = window_end_indices(pair.t, n, gap_tolerance)
    if ends.size == 0:
        return []
    views = sliding_window_view(pair.x, n)
    return [WindowSample(views[i - n + 1], float(pair.y[i]), pair.sensor_id, float(pair.t[i])) for i in ends]


def window_arrays(pairs, n, gap_tolerance=GAP_TOLERANCE):
    """Stack the windows of several series into ``(X, y)`` arrays of shape (m, n) and (m,)."""
    xs, ys = [], []
    for pair in pairs:
        ends = window_end_indices(pair.t, n, gap_tolerance)
        if ends.size:
            xs.append(sliding_window_view(pair.x, n)[ends - n + 1])
            ys.append(pair.y[ends])
    if not xs:
        return np.zeros((0, n)), np.zeros(0)
    return np.concatenate(xs), np.concatenate(ys)


def load_splits(path, feature, n, gap_tolerance=GAP_TOLERANCE):
    """CSV to cleaned pairs, sensor split, and ``{"train"|"validation"|"test": (X, y)}`` window arrays."""
    pairs, report = clean(load_csv(path, feature))
    plan = split_by_sensor(pairs)
    by_id = {p.sensor_id: p for p in pairs}
    splits = {
        "train": window_arrays([by_id[s] for s in plan.train], n, gap_tolerance),
        "validation": window_arrays([by_id[plan.validation]], n, gap_tolerance),
        "test": window_arrays([by_id[plan.test]], n, gap_tolerance),
    }
    return splits, plan, report


# -- synthetic sensor pairs --------------------------------------------------

FEATURE_SCALE = {"pm10": 1.0, "pm2_5": 0.65, "pm1": 0.45}

# Per-sensor coefficient ranges for the low-cost distortion, drawn uniformly.
GAIN_RANGE = (1.2, 1.3)  # a: linear gain
CURVE_RANGE = (0.012, 0.014)  # b: quadratic term, per ug/m3
DRIFT_RANGE = (0.5, 1.5)  # amplitude of the slow seasonal offset
NOISE_RANGE = (0.02, 0.04)  # noise sd as a fraction of the series mean, scaled by 1 + y/20


@dataclass(frozen=True)
class SensorCoefficients:
    gain: float = 1.0
    curve: float = 0.0
    drift: float = 0.0
    noise: float = 0.0


def pollution_episodes(rng, length, level, per_day=2.0):
    """Sparse emission events (cooking, traffic, smoke): fast rise, exponential decay."""
    minutes = np.arange(length)
    out = np.zeros(length)
    for _ in range(rng.poisson(per_day * length / 1440)):
        start = rng.uniform(0, length)
        amp = level * rng.lognormal(0.3, 0.5)
        tau = rng.uniform(20, 90)
        dt = minutes - start
        on = dt > 0
        out[on] += amp * (1 - np.exp(-dt[on] / 8.0)) * np.exp(-dt[on] / tau)
    return out


def reference_series(rng, length, level=20.0):
    """Two sinusoids, a slow random walk and pollution episodes, clipped at zero (one reading per minute)."""
    minutes = np.arange(length)
    daily = rng.uniform(0.3, 0.5) * level * np.sin(2 * np.pi * minutes / 1440 + rng.uniform(0, 2 * np.pi))
    fast = rng.uniform(0.1, 0.2) * level * np.sin(2 * np.pi * minutes / 97 + rng.uniform(0, 2 * np.pi))
    walk = np.cumsum(rng.normal(0, 0.004 * level, size=length))
    walk -= np.linspace(0, walk[-1], length)  # pin the walk so series stay stationary
    episodes = pollution_episodes(rng, length, level)
    return np.clip(level + daily + fast + walk + episodes, 0.0, None)


def distort(rng, y, coef):
    length = len(y)
    drift = coef.drift * np.sin(2 * np.pi * np.arange(length) / (7 * 1440) + rng.uniform(0, 2 * np.pi))
    noise = coef.noise * y.mean() * (1.0 + y / 20.0) * rng.normal(size=length)
    return np.clip(coef.gain * y + coef.curve * y * y + drift + noise, 0.0, None)


def draw_coefficients(rng):
    return SensorCoefficients(
        gain=rng.uniform(*GAIN_RANGE),
        curve=rng.uniform(*CURVE_RANGE),
        drift=rng.uniform(*DRIFT_RANGE),
        noise=rng.uniform(*NOISE_RANGE),
    )


def synth_frames(seed, sensors, length, coefficients=None, start="2020-09-17T00:00"):
    """Iterator of ``(sensor_id, timestamps, {column: values})``, one per synthetic sensor."""
    if sensors < 3:
        raise DataError(f"need at least 3 sensors so the data can be split, got {sensors}")
    return _frames(seed, sensors, length, coefficients, start)


def _frames(seed, sensors, length, coefficients, start):
    rng = np.random.default_rng(seed)
    t0 = datetime.fromisoformat(start)
    stamps = [(t0 + timedelta(minutes=i)).strftime("%Y-%m-%dT%H:%M") for i in range(length)]
    for k in range(sensors):
        sid = f"S{k:02d}"
        coef = coefficients if coefficients is not None else draw_coefficients(rng)
        level = rng.uniform(15.0, 25.0)
        base = reference_series(rng, length, level)
        cols = {}
        for feature, scale in FEATURE_SCALE.items():
            y = base * scale
            cols[f"ref_{feature}"] = y
            cols[f"lowcost_{feature}"] = distort(rng, y, coef)
        yield sid, stamps, cols


def synth_generate(seed, sensors, length, path, coefficients=None):
    """Write a deterministic synthetic CSV in the standard schema and return its path.

    Reference readings follow :func:`reference_series`; each sensor's low-cost
    reading is ``a*y + b*y**2 + drift(t) + noise`` with per-sensor coefficients
    drawn from ``GAIN_RANGE``, ``CURVE_RANGE``, ``DRIFT_RANGE`` and ``NOISE_RANGE``
    unless ``coefficients`` pins them for every sensor.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for sid, stamps, cols in synth_frames(seed, sensors, length, coefficients):
            ordered = [cols[c] for c in COLUMNS[2:]]
            for i, ts in enumerate(stamps):
                w.writerow([ts, sid, *(f"{col[i]:.4f}" for col in ordered)])
    return path
