"""Telemetry sampling, the ring buffer, and the analytics detectors.

Every noisy field is drawn from one seeded stream in a fixed order and with a
fixed count per tick (full 30-slot blocks even when slots are dark), so the
stream position depends only on the tick number. Dead readings clamp to the
-60 dBm instrument floor and carry no noise.
"""

from __future__ import annotations

import collections
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import physics

NOISE_SIGMA_DB = 0.1
RING_CAPACITY = 10_000
LOS_INPUT_DBM = -40.0
LOS_UPSTREAM_DBM = -20.0


class InsufficientData(ValueError):
    pass


@dataclass
class TelemetryRecord:
    """One tick's measurements plus the device settings they were taken at."""

    tick: int
    amp_in_dbm: np.ndarray  # (6,)
    amp_out_dbm: np.ndarray  # (6,)
    osc_alive: np.ndarray  # (4,) bool
    rx_dbm: np.ndarray  # (30,), NaN where inactive
    q_db: np.ndarray  # (30,), NaN where not a measurable real channel
    rx_total_dbm: float
    n_active: int
    gains_db: np.ndarray  # (6,) device settings at sample time
    tilts_db: np.ndarray  # (6,)

    def to_json(self) -> dict:
        def clean(arr):
            return [None if (isinstance(v, float) and math.isnan(v)) else v
                    for v in arr]

        return {
            "tick": self.tick,
            "amp_in_dbm": [float(v) for v in self.amp_in_dbm],
            "amp_out_dbm": [float(v) for v in self.amp_out_dbm],
            "osc_alive": [bool(v) for v in self.osc_alive],
            "rx_dbm": clean([float(v) for v in self.rx_dbm]),
            "q_db": clean([float(v) for v in self.q_db]),
            "rx_total_dbm": float(self.rx_total_dbm),
            "n_active": self.n_active,
            "gains_db": [float(v) for v in self.gains_db],
            "tilts_db": [float(v) for v in self.tilts_db],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TelemetryRecord":
        def arr(key):
            return np.array([np.nan if v is None else v for v in obj[key]],
                            dtype=float)

        return cls(tick=int(obj["tick"]), amp_in_dbm=arr("amp_in_dbm"),
                   amp_out_dbm=arr("amp_out_dbm"),
                   osc_alive=np.array(obj["osc_alive"], dtype=bool),
                   rx_dbm=arr("rx_dbm"), q_db=arr("q_db"),
                   rx_total_dbm=float(obj["rx_total_dbm"]),
                   n_active=int(obj["n_active"]),
                   gains_db=arr("gains_db"), tilts_db=arr("tilts_db"))


@dataclass
class Alarm:
    kind: str  # QDrop | LossOfSignal | DegradationForecast
    tick: int
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "tick": self.tick, "detail": self.detail}


@dataclass
class ForecastResult:
    slope: float
    intercept: float
    predicted_loss_at_horizon: float
    triggered: bool


def sample(state, seed_rng: np.random.Generator, sigma_db: float = NOISE_SIGMA_DB
           ) -> TelemetryRecord:
    """Measure the plant once; consumes a fixed 73-draw noise block."""
    snap = state.true_snapshot()
    noise = seed_rng.normal(0.0, 1.0, size=73) * sigma_db
    amp_in = _noisy_dbm(snap.amp_in_dbm, noise[0:6])
    amp_out = _noisy_dbm(snap.amp_out_dbm, noise[6:12])
    rx = np.full(30, np.nan)
    act = snap.active
    rx_true = physics.to_dbm(snap.received_w)
    rx[act] = _noisy_dbm(rx_true[act], noise[12:42][act])
    q = np.full(30, np.nan)
    measurable = snap.is_real & ~np.isnan(snap.q_db)
    q[measurable] = snap.q_db[measurable] + noise[42:72][measurable]
    total_w = float(np.sum(snap.received_w[act])) if act.any() else 0.0
    total_true = float(physics.to_dbm(np.array([total_w]))[0])
    rx_total = float(_noisy_dbm(np.array([total_true]), noise[72:73])[0])
    return TelemetryRecord(tick=state.tick, amp_in_dbm=amp_in,
                           amp_out_dbm=amp_out, osc_alive=state.osc_alive(),
                           rx_dbm=rx, q_db=q, rx_total_dbm=rx_total,
                           n_active=int(snap.active.sum()),
                           gains_db=state.gains_db(), tilts_db=state.tilts_db())


def _noisy_dbm(true_dbm: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = np.asarray(true_dbm, dtype=float).copy()
    live = out > physics.POWER_FLOOR_DBM
    out[live] = np.maximum(out[live] + noise[live], physics.POWER_FLOOR_DBM)
    return out


class RingBuffer:
    """Bounded telemetry history; oldest records fall off at capacity."""

    def __init__(self, capacity: int = RING_CAPACITY):
        self._buf = collections.deque(maxlen=capacity)

    def append(self, record: TelemetryRecord):
        self._buf.append(record)

    def last(self, n: int) -> list:
        if n >= len(self._buf):
            return list(self._buf)
        return list(self._buf)[len(self._buf) - n:]

    def __len__(self):
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)


class QDropDetector:
    """Median-of-5 against a rolling 50-sample baseline, deduplicated.

    An alarm is raised once per excursion per channel; the channel re-arms
    when its median returns to within threshold of the (frozen) baseline.
    """

    def __init__(self, threshold_db: float = 1.0, median_n: int = 5,
                 baseline_n: int = 50):
        self.threshold_db = threshold_db
        self.median_n = median_n
        self.baseline_n = baseline_n
        self._tripped: dict = {}
        self.suppressed_until = -1

    def reset(self):
        self._tripped.clear()

    def check(self, buffer: RingBuffer, tick: int) -> list:
        if tick <= self.suppressed_until:
            return []
        recent = buffer.last(self.baseline_n + self.median_n)
        if len(recent) < self.median_n + 10:
            return []
        alarms = []
        head = recent[-self.median_n:]
        base = recent[:-self.median_n]
        for ch in range(30):
            head_vals = [r.q_db[ch] for r in head]
            if any(math.isnan(v) for v in head_vals):
                continue
            base_vals = [r.q_db[ch] for r in base
                         if not math.isnan(r.q_db[ch])]
            if len(base_vals) < 10:
                continue
            med = float(np.median(head_vals))
            baseline = float(np.mean(base_vals))
            drop = baseline - med
            if drop >= self.threshold_db:
                if not self._tripped.get(ch):
                    self._tripped[ch] = True
                    alarms.append(Alarm("QDrop", tick,
                                        {"channel": ch,
                                         "drop_db": round(drop, 4),
                                         "baseline_db": round(baseline, 4)}))
            elif drop < 0.5 * self.threshold_db:
                self._tripped[ch] = False
        return alarms


def detect_q_drop(buffer: RingBuffer, threshold_db: float = 1.0):
    """One-shot drop check (stateless convenience over QDropDetector)."""
    if len(buffer) < 2:
        raise InsufficientData("need at least 2 records")
    det = QDropDetector(threshold_db=threshold_db)
    rec = buffer.last(1)[0]
    alarms = det.check(buffer, rec.tick)
    return alarms[0] if alarms else None


def ols_line(y: np.ndarray) -> tuple:
    """Least-squares slope/intercept of y against sample index 0..n-1."""
    n = y.shape[0]
    x = np.arange(n, dtype=float)
    xm = x.mean()
    ym = y.mean()
    den = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum() / den)
    intercept = ym - slope * xm
    return slope, float(intercept)


def forecast_power(buffer: RingBuffer, window: int = 50, horizon: int = 100,
                   trigger_loss_db: float = 5.0) -> ForecastResult:
    """OLS trend of total received power; predicted loss at the horizon."""
    recent = buffer.last(window)
    if len(recent) < window:
        raise InsufficientData(f"need {window} samples, have {len(recent)}")
    y = np.array([r.rx_total_dbm for r in recent])
    slope, intercept = ols_line(y)
    predicted = -slope * horizon if slope < 0 else 0.0
    return ForecastResult(slope=slope, intercept=intercept,
                          predicted_loss_at_horizon=predicted,
                          triggered=predicted >= trigger_loss_db)


class ForecastDetector:
    """Wraps forecast_power with dedup and suppression windows."""

    def __init__(self, window: int = 50, horizon: int = 100,
                 trigger_loss_db: float = 5.0):
        self.window = window
        self.horizon = horizon
        self.trigger_loss_db = trigger_loss_db
        self._tripped = False
        self.suppressed_until = -1

    def reset(self):
        self._tripped = False

    def check(self, buffer: RingBuffer, tick: int) -> list:
        if tick <= self.suppressed_until or len(buffer) < self.window:
            return []
        recent = buffer.last(self.window)
        # a dark span is an outage, not a trend; wait for a clean window
        if any(not r.osc_alive.all() for r in recent):
            self._tripped = False
            return []
        res = forecast_power(buffer, self.window, self.horizon,
                             self.trigger_loss_db)
        if res.triggered and not self._tripped:
            self._tripped = True
            return [Alarm("DegradationForecast", tick,
                          {"slope_db_per_tick": round(res.slope, 6),
                           "predicted_loss_db":
                               round(res.predicted_loss_at_horizon, 3)})]
        if not res.triggered:
            self._tripped = False
        return []


def detect_los(record: TelemetryRecord) -> list:
    """Loss-of-signal per span: dead OSC, or a dark downstream amplifier
    input while the upstream output is healthy."""
    alarms = []
    for s in range(4):
        if not record.osc_alive[s]:
            alarms.append(Alarm("LossOfSignal", record.tick,
                                {"span": s, "osc_alive": False}))
            continue
        down_in = record.amp_in_dbm[s + 1]
        up_out = record.amp_out_dbm[s]
        if down_in < LOS_INPUT_DBM and up_out >= LOS_UPSTREAM_DBM:
            alarms.append(Alarm("LossOfSignal", record.tick,
                                {"span": s, "osc_alive": True,
                                 "amp_in_dbm": float(down_in)}))
    return alarms


class LosDetector:
    """Deduplicates LOS per span while the condition persists."""

    def __init__(self):
        self._tripped = set()

    def check(self, record: TelemetryRecord) -> list:
        raw = detect_los(record)
        fresh = []
        seen = set()
        for alarm in raw:
            span = alarm.detail["span"]
            seen.add(span)
            if span not in self._tripped:
                self._tripped.add(span)
                fresh.append(alarm)
        self._tripped &= seen
        return fresh


CSV_COLUMNS = (["tick"]
               + [f"amp{a}_gain_db" for a in range(6)]
               + [f"amp{a}_tilt_db" for a in range(6)]
               + [f"amp{a}_in_dbm" for a in range(6)]
               + [f"amp{a}_out_dbm" for a in range(6)]
               + [f"span{s}_osc" for s in range(4)]
               + ["rx_total_dbm", "n_active"]
               + [f"rx{i}_dbm" for i in range(30)]
               + [f"q{i}_db" for i in range(30)])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if math.isnan(f):
        return ""
    return format(f, ".10g")


def _record_row(r: TelemetryRecord) -> list:
    return ([r.tick]
            + list(r.gains_db) + list(r.tilts_db)
            + list(r.amp_in_dbm) + list(r.amp_out_dbm)
            + list(r.osc_alive)
            + [r.rx_total_dbm, r.n_active]
            + list(r.rx_dbm) + list(r.q_db))


def write_csv(path, records):
    """Export records with the documented stable column order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in _record_row(r)])


def read_csv(path) -> list:
    """Load records written by write_csv (the twin's dataset format)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError("unexpected telemetry CSV header")
        for row in reader:
            def f(key):
                return float(row[key]) if row[key] != "" else math.nan

            out.append(TelemetryRecord(
                tick=int(row["tick"]),
                amp_in_dbm=np.array([f(f"amp{a}_in_dbm") for a in range(6)]),
                amp_out_dbm=np.array([f(f"amp{a}_out_dbm") for a in range(6)]),
                osc_alive=np.array([row[f"span{s}_osc"] == "1"
                                    for s in range(4)]),
                rx_dbm=np.array([f(f"rx{i}_dbm") for i in range(30)]),
                q_db=np.array([f(f"q{i}_db") for i in range(30)]),
                rx_total_dbm=f("rx_total_dbm"),
                n_active=int(row["n_active"]),
                gains_db=np.array([f(f"amp{a}_gain_db") for a in range(6)]),
                tilts_db=np.array([f(f"amp{a}_tilt_db") for a in range(6)]),
            ))
    return out


def write_alarms(path, alarms):
    with open(path, "w") as fh:
        for alarm in alarms:
            fh.write(json.dumps(alarm.to_json(), sort_keys=True) + "\n")
