"""Lifecycle events, hidden ground truth, and the mutable simulator state.

A scenario is a sorted list of timed events (wavelength batches, a fiber cut
and its repair, an aging ramp). The state object owns the only mutable copy
of the plant; everything else sees immutable snapshots. Hidden per-span extra
losses and per-amplifier noise figures are drawn once per run from the seed
and are observable only through telemetry.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

import numpy as np

from . import physics

BATCH_SIZE = 5
VALID_KINDS = ("establish-batches", "set-load", "fiber-cut", "repair-cut",
               "aging-ramp", "end")


class ParseError(ValueError):
    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(ValueError):
    pass


class InvalidLoad(ValidationError):
    pass


@dataclass(frozen=True)
class Event:
    at_tick: int
    kind: str
    span_id: int = -1
    target_load: int = -1
    n_batches: int = -1
    rate_db_per_tick: float = 0.0
    cap_db: float = 0.0

    def describe(self) -> str:
        if self.kind == "establish-batches":
            return f"establish-batches n={self.n_batches}"
        if self.kind == "set-load":
            return f"set-load target={self.target_load}"
        if self.kind in ("fiber-cut", "repair-cut"):
            return f"{self.kind} span={self.span_id}"
        if self.kind == "aging-ramp":
            return (f"aging-ramp span={self.span_id} "
                    f"rate={self.rate_db_per_tick} cap={self.cap_db}")
        return self.kind


@dataclass
class Scenario:
    events: list
    seed: int = 0
    tick_length_ms: float = 1.0
    end_tick: int = 0
    name: str = "inline"

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: e.at_tick)
        if not self.end_tick:
            self.end_tick = (self.events[-1].at_tick + 100) if self.events else 0


def _validate_event(ev: Event, line: int):
    if ev.kind in ("fiber-cut", "repair-cut", "aging-ramp"):
        if not (0 <= ev.span_id < 4):
            raise ValidationError(f"line {line}: span id {ev.span_id} out of range")
    if ev.kind == "set-load":
        if not (0 <= ev.target_load <= 30) or ev.target_load % BATCH_SIZE:
            raise InvalidLoad(
                f"line {line}: load {ev.target_load} must be a multiple of "
                f"{BATCH_SIZE} in [0, 30]")
    if ev.kind == "establish-batches":
        if not (0 <= ev.n_batches <= 6):
            raise ValidationError(f"line {line}: batch count {ev.n_batches} out of range")
    if ev.kind == "aging-ramp":
        if ev.rate_db_per_tick <= 0:
            raise ValidationError(f"line {line}: ramp rate must be positive")
        if ev.cap_db < 0:
            raise ValidationError(f"line {line}: ramp cap must be >= 0")


def load_scenario(text: str, seed: int = 0, name: str = "inline") -> Scenario:
    """Parse the line-oriented scenario format: `<tick> <kind> <args...>`."""
    events = []
    end_tick = 0
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        tokens = line.split()
        col = line.index(tokens[0]) + 1
        try:
            tick = int(tokens[0])
        except ValueError:
            raise ParseError(f"bad tick {tokens[0]!r}", ln, col) from None
        if tick < 0:
            raise ParseError("tick must be >= 0", ln, col)
        if len(tokens) < 2:
            raise ParseError("missing event kind", ln, len(line) + 1)
        kind = tokens[1]
        kcol = line.index(kind, col) + 1
        if kind not in VALID_KINDS:
            raise ParseError(f"unknown event kind {kind!r}", ln, kcol)
        args = tokens[2:]

        def need(n):
            if len(args) != n:
                raise ParseError(f"{kind} takes {n} argument(s)", ln, kcol)

        def num(i, conv):
            try:
                return conv(args[i])
            except ValueError:
                raise ParseError(f"bad argument {args[i]!r}", ln,
                                 line.index(args[i], kcol) + 1) from None

        if kind == "end":
            need(0)
            end_tick = max(end_tick, tick)
            continue
        if kind == "establish-batches":
            need(1)
            ev = Event(tick, kind, n_batches=num(0, int))
        elif kind == "set-load":
            need(1)
            ev = Event(tick, kind, target_load=num(0, int))
        elif kind in ("fiber-cut", "repair-cut"):
            need(1)
            ev = Event(tick, kind, span_id=num(0, int))
        else:  # aging-ramp
            need(3)
            ev = Event(tick, kind, span_id=num(0, int),
                       rate_db_per_tick=num(1, float), cap_db=num(2, float))
        _validate_event(ev, ln)
        events.append(ev)
    return Scenario(events=events, seed=seed, end_tick=end_tick, name=name)


def builtin_scenario(name: str, seed: int = 0) -> Scenario:
    ref = importlib.resources.files("adonsim.data").joinpath(f"{name}.scn")
    if not ref.is_file():
        raise FileNotFoundError(f"no built-in scenario named {name!r}")
    return load_scenario(ref.read_text(), seed=seed, name=name)


def cut_scenario(seed: int) -> Scenario:
    """Seeded single-cut scenario family: cut on a uniformly random span."""
    rng = np.random.default_rng(np.random.SeedSequence([0xC07, seed]))
    span = int(rng.integers(0, 4))
    text = (f"10 establish-batches 4\n"
            f"150 fiber-cut {span}\n"
            f"210 repair-cut {span}\n"
            f"300 end\n")
    sc = load_scenario(text, seed=seed, name=f"cut-{seed}")
    return sc


def aging_scenario(seed: int) -> Scenario:
    """Seeded aging-injection family: a large ramp on a uniformly random
    span, used to exercise trend detection and localization."""
    rng = np.random.default_rng(np.random.SeedSequence([0xA9E, seed]))
    span = int(rng.integers(0, 4))
    text = (f"10 establish-batches 4\n"
            f"150 aging-ramp {span} 0.1 6.0\n"
            f"450 end\n")
    return load_scenario(text, seed=seed, name=f"aging-{seed}")


@dataclass
class GroundTruth:
    """Hidden plant parameters; only telemetry may reveal them."""

    hidden_extra_loss_db: np.ndarray
    hidden_nf_db: np.ndarray
    aging_offset_db: np.ndarray

    @classmethod
    def draw(cls, seed_stream: np.random.SeedSequence) -> "GroundTruth":
        rng = np.random.default_rng(seed_stream)
        return cls(
            hidden_extra_loss_db=rng.uniform(0.0, 1.5, size=4),
            hidden_nf_db=rng.uniform(4.5, 6.5, size=6),
            aging_offset_db=np.zeros(4),
        )


@dataclass
class AgingRampState:
    span_id: int
    rate: float
    cap: float
    added: float = 0.0

    @property
    def done(self) -> bool:
        return self.added >= self.cap


class SimulatorState:
    """Single owner of the mutable plant; apply events, expose snapshots."""

    def __init__(self, scenario: Scenario, seed_stream: np.random.SeedSequence,
                 launch_dbm_per_channel: float = -20.0, kappa_db: float = 0.0):
        self.scenario = scenario
        self.truth = GroundTruth.draw(seed_stream)
        self.link = physics.default_link()
        for s, span in enumerate(self.link.spans):
            span.extra_loss_db = float(self.truth.hidden_extra_loss_db[s])
        for a, amp in enumerate(self.link.amplifiers):
            amp.noise_figure_db = float(self.truth.hidden_nf_db[a])
        self.launch_dbm = launch_dbm_per_channel
        self.kappa_db = kappa_db
        self.tick = -1
        self.config_version = 0
        self._ramps: list = []
        self._pending: list = []
        self._event_idx = 0

    # -- configuration ----------------------------------------------------
    @property
    def grid(self) -> physics.ChannelGrid:
        return self.link.grid

    def launch_w(self) -> np.ndarray:
        w = np.zeros(self.grid.slot_count)
        w[self.grid.active] = 10.0 ** (self.launch_dbm / 10.0) * 1e-3
        return w

    def gains_db(self) -> np.ndarray:
        return np.array([a.gain_db for a in self.link.amplifiers])

    def tilts_db(self) -> np.ndarray:
        return np.array([a.tilt_db for a in self.link.amplifiers])

    def set_config(self, gains_db=None, tilts_db=None):
        """Atomic bounds-checked write of amplifier settings."""
        gains = self.gains_db() if gains_db is None else np.asarray(gains_db, float)
        tilts = self.tilts_db() if tilts_db is None else np.asarray(tilts_db, float)
        if gains.shape != (6,) or tilts.shape != (6,):
            raise ValidationError("need 6 gains and 6 tilts")
        for g in gains:
            physics.validate_gain(float(g))
        for t in tilts:
            physics.validate_tilt(float(t))
        for a, amp in enumerate(self.link.amplifiers):
            amp.gain_db = float(gains[a])
            amp.tilt_db = float(tilts[a])
        self.config_version += 1

    # -- event machinery ---------------------------------------------------
    def inject(self, event: Event):
        self._pending.append(event)

    def step(self) -> list:
        """Advance one tick; apply due scheduled+injected events and ramps."""
        self.tick += 1
        applied = []
        while (self._event_idx < len(self.scenario.events)
               and self.scenario.events[self._event_idx].at_tick <= self.tick):
            ev = self.scenario.events[self._event_idx]
            self._event_idx += 1
            self._apply(ev)
            applied.append(ev)
        if self._pending:
            due = [e for e in self._pending]
            self._pending.clear()
            for ev in due:
                self._apply(ev)
                applied.append(ev)
        for ramp in self._ramps:
            if ramp.done:
                continue
            inc = min(ramp.rate, ramp.cap - ramp.added)
            ramp.added += inc
            self.truth.aging_offset_db[ramp.span_id] += inc
            self._refresh_extra(ramp.span_id)
        return applied

    def _refresh_extra(self, span_id: int):
        self.link.spans[span_id].extra_loss_db = float(
            self.truth.hidden_extra_loss_db[span_id]
            + self.truth.aging_offset_db[span_id])

    def _apply(self, ev: Event):
        if ev.kind == "fiber-cut":
            self.link.spans[ev.span_id].is_cut = True
        elif ev.kind == "repair-cut":
            self.link.spans[ev.span_id].is_cut = False
        elif ev.kind == "aging-ramp":
            self._ramps.append(AgingRampState(ev.span_id, ev.rate_db_per_tick,
                                              ev.cap_db))
        # establish-batches and set-load are agent tasks, not plant mutations;
        # the runner routes them to the agent, which calls
        # apply_wavelength_change through a tool.

    def osc_alive(self) -> np.ndarray:
        return np.array([not s.is_cut for s in self.link.spans])

    def any_cut(self) -> bool:
        return any(s.is_cut for s in self.link.spans)

    # -- wavelength management ----------------------------------------------
    def apply_wavelength_change(self, target_load: int) -> list:
        """Add/drop whole 5-slot batches to reach the target; returns slot ids.

        Adds fill the lowest-index free batch slots (lowest slot of each new
        batch carries the transponder); drops remove the highest-index
        occupied slots batch by batch.
        """
        if target_load % BATCH_SIZE or not (0 <= target_load <= 30):
            raise InvalidLoad(f"load {target_load} must be a multiple of "
                              f"{BATCH_SIZE} in [0, 30]")
        grid = self.grid
        changed = []
        current = grid.n_active
        while current < target_load:
            free = np.flatnonzero(~grid.active)[:BATCH_SIZE]
            grid.active[free] = True
            grid.is_real[free[0]] = True
            changed.extend(int(i) for i in free)
            current += BATCH_SIZE
        while current > target_load:
            occ = np.flatnonzero(grid.active)[-BATCH_SIZE:]
            grid.active[occ] = False
            grid.is_real[occ] = False
            changed.extend(int(i) for i in occ)
            current -= BATCH_SIZE
        grid.validate()
        return changed

    # -- truth access (runner/test harness only) ----------------------------
    def true_snapshot(self, config=None) -> physics.LinkSnapshot:
        """Noiseless transmit at the current plant; never shown to the agent."""
        return physics.transmit(self.link, self.launch_w(), config=config,
                                kappa_db=self.kappa_db)

    def nominal_link(self) -> physics.LinkTopology:
        """The datasheet view: no hidden extras, nominal 5 dB noise figures."""
        link = physics.default_link()
        link.grid = self.grid  # shared occupancy view
        for span, real in zip(link.spans, self.link.spans):
            span.is_cut = real.is_cut
        for amp, real in zip(link.amplifiers, self.link.amplifiers):
            amp.gain_db = real.gain_db
            amp.tilt_db = real.tilt_db
        return link
