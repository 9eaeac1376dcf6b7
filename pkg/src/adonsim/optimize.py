"""Gain/tilt optimization: brute-force oracle, GP-based search, coordinate ascent.

All three optimizers speak the same env protocol (evaluate(config) -> dB) and
return the same report shape, so runs are directly comparable. Randomness
flows only from explicit seeds.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import physics

DEFAULT_GRID = (14.0, 16.0, 18.0, 20.0, 22.0)
MAX_GRID_POINTS = 10 ** 6

_erf = np.vectorize(math.erf, otypes=[float])


class GridTooLarge(ValueError):
    pass


class GPNumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class GainConfig:
    """The optimization variable: one gain and tilt per amplifier.

    Ordering is lexicographic (gains first), used for deterministic
    tie-breaking.
    """

    gains: tuple
    tilts: tuple = (0.0,) * 6

    def __post_init__(self):
        gains = tuple(float(g) for g in self.gains)
        tilts = tuple(float(t) for t in self.tilts)
        if len(gains) != 6 or len(tilts) != 6:
            raise ValueError("need one gain and one tilt per amplifier")
        for g in gains:
            physics.validate_gain(g)
        for t in tilts:
            physics.validate_tilt(t)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "tilts", tilts)

    def vector(self, include_tilts: bool = True) -> np.ndarray:
        v = self.gains + (self.tilts if include_tilts else ())
        return np.array(v, dtype=float)

    @staticmethod
    def from_vector(vec) -> "GainConfig":
        vec = tuple(float(x) for x in vec)
        if len(vec) == 6:
            return GainConfig(vec)
        if len(vec) == 12:
            return GainConfig(vec[:6], vec[6:])
        raise ValueError("vector must have 6 or 12 entries")


@dataclass
class ObjectiveSample:
    config: GainConfig
    value: float
    tick: int = 0


@dataclass
class OptimizerReport:
    best_config: GainConfig
    best_value: float
    trace: list = field(default_factory=list)
    evaluations: int = 0
    wall_time_s: float = 0.0


def objective(env, config: GainConfig) -> float:
    """Scalar objective: min-Q over the transponder channels under config."""
    return env.evaluate(config)


def _best_of(trace) -> ObjectiveSample:
    # max value; ties go to the lexicographically smallest config
    best = max(s.value for s in trace)
    return min((s for s in trace if s.value == best), key=lambda s: s.config)


def _report(trace, t0) -> OptimizerReport:
    best = _best_of(trace)
    return OptimizerReport(best_config=best.config, best_value=best.value,
                           trace=trace, evaluations=len(trace),
                           wall_time_s=time.perf_counter() - t0)


def brute_force(env, grid_per_amp=None) -> OptimizerReport:
    """Exhaustive search over a per-amplifier gain grid, tilts fixed at 0.

    Meant for the pure twin env where it serves as the reference optimum.
    Uses the env's batch evaluator when available.
    """
    t0 = time.perf_counter()
    grid = DEFAULT_GRID if grid_per_amp is None else grid_per_amp
    levels = sorted({float(g) for g in grid})
    if not levels:
        raise ValueError("grid must be nonempty")
    if len(levels) ** 6 > MAX_GRID_POINTS:
        raise GridTooLarge(f"{len(levels)}^6 grid points exceed {MAX_GRID_POINTS}")
    for g in levels:
        physics.validate_gain(g)

    combos = np.array(list(itertools.product(levels, repeat=6)))
    trace = []
    if hasattr(env, "evaluate_batch"):
        values = np.empty(len(combos))
        for lo in range(0, len(combos), 8192):
            hi = min(lo + 8192, len(combos))
            values[lo:hi] = env.evaluate_batch(combos[lo:hi])
        for i, row in enumerate(combos):
            trace.append(ObjectiveSample(GainConfig(tuple(row)),
                                         float(values[i]), tick=i))
    else:
        for i, row in enumerate(combos):
            cfg = GainConfig(tuple(row))
            trace.append(ObjectiveSample(cfg, env.evaluate(cfg),
                                         tick=getattr(env, "tick", i)))
    return _report(trace, t0)


# -- Gaussian process machinery ------------------------------------------------

def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.sum(d * d, axis=2)


def _kernel(a, b, length_scale, signal_var):
    return signal_var * np.exp(-0.5 * _sq_dists(a, b) / length_scale ** 2)


def _cholesky_with_jitter(k: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10
    while jitter <= 1e-4:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(k.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPNumericalFailure("kernel matrix stayed non-PD up to jitter 1e-4")


class _GP:
    """Exact GP posterior with fixed hyperparameters; prior mean = mean(y)."""

    def __init__(self, x, y, length_scale=0.3, signal_var=1.0, noise_var=0.01):
        self.x = np.atleast_2d(np.asarray(x, float))
        y = np.asarray(y, float)
        if self.x.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise ValueError("need one observation per input point")
        self.length_scale = length_scale
        self.signal_var = signal_var
        self.y_mean = float(y.mean())
        k = _kernel(self.x, self.x, length_scale, signal_var)
        k[np.diag_indices_from(k)] += noise_var
        self._chol = _cholesky_with_jitter(k)
        self._alpha = np.linalg.solve(
            self._chol.T, np.linalg.solve(self._chol, y - self.y_mean))

    def posterior(self, xq) -> tuple:
        xq = np.atleast_2d(np.asarray(xq, float))
        ks = _kernel(xq, self.x, self.length_scale, self.signal_var)
        mean = self.y_mean + ks @ self._alpha
        v = np.linalg.solve(self._chol, ks.T)
        var = self.signal_var - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)


def gp_regress(x, y, query, length_scale=0.3, signal_var=1.0,
               noise_var=0.01) -> tuple:
    """Posterior (mean, variance) at the query points."""
    return _GP(x, y, length_scale, signal_var, noise_var).posterior(query)


def expected_improvement(mean, var, incumbent) -> np.ndarray:
    mean = np.asarray(mean, float)
    std = np.sqrt(np.asarray(var, float))
    out = np.maximum(mean - incumbent, 0.0)
    pos = std > 0.0
    z = (mean[pos] - incumbent) / std[pos]
    cdf = 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out[pos] = (mean[pos] - incumbent) * cdf + std[pos] * pdf
    return out


def _latin_hypercube(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    cells = rng.permuted(np.tile(np.arange(n), (d, 1)), axis=1).T
    return (cells + rng.uniform(size=(n, d))) / n


def _default_space(env):
    return [tuple(env.gain_bounds)] * 6


def _config_for(env, vec):
    if hasattr(env, "config_from_vector"):
        return env.config_from_vector(vec)
    return GainConfig.from_vector(vec)


def bayes_opt(env, space=None, budget: int = 50, n_init: int = 10,
              seed: int = 0, length_scale: float = 0.3,
              signal_var: float = 1.0, noise_var: float = 0.01,
              n_candidates: int = 1000, refine_iters: int = 20
              ) -> OptimizerReport:
    """GP + expected-improvement search over a box space.

    space is a list of (lo, hi) bounds, one per dimension; default is the six
    gains with tilts pinned at 0. Vectors map to configs via
    env.config_from_vector when the env provides it, else 6 entries are gains
    and 12 are gains+tilts. Runs to budget; that is normal completion.
    """
    t0 = time.perf_counter()
    if space is None:
        space = _default_space(env)
    lo = np.array([b[0] for b in space], float)
    hi = np.array([b[1] for b in space], float)
    d = len(space)
    if budget <= n_init:
        raise ValueError("budget must exceed n_init")
    rng = np.random.default_rng(seed)

    xs = []
    trace = []

    def run_one(xn: np.ndarray) -> None:
        cfg = _config_for(env, lo + xn * (hi - lo))
        value = env.evaluate(cfg)
        xs.append(xn)
        trace.append(ObjectiveSample(cfg, value,
                                     tick=getattr(env, "tick", len(trace))))

    for xn in _latin_hypercube(rng, n_init, d):
        run_one(xn)

    while len(trace) < budget:
        gp = _GP(np.array(xs), np.array([s.value for s in trace]),
                 length_scale, signal_var, noise_var)
        incumbent = max(s.value for s in trace)

        def ei_at(pts: np.ndarray) -> np.ndarray:
            mean, var = gp.posterior(pts)
            return expected_improvement(mean, var, incumbent)

        cands = rng.uniform(size=(n_candidates, d))
        scores = ei_at(cands)
        x = cands[int(np.argmax(scores))].copy()
        best_ei = float(np.max(scores))
        step = 0.05
        for _ in range(refine_iters):
            improved = False
            for dim in range(d):
                for sign in (1.0, -1.0):
                    cand = x.copy()
                    cand[dim] = min(1.0, max(0.0, cand[dim] + sign * step))
                    e = float(ei_at(cand[None, :])[0])
                    if e > best_ei:
                        x, best_ei = cand, e
                        improved = True
            if not improved:
                step *= 0.5
        run_one(x)

    return _report(trace, t0)


# -- coordinate ascent ---------------------------------------------------------

class CoordinateAscentSchedule:
    """Deterministic probe sequence for greedy per-amplifier ascent.

    Shared by coordinate_ascent and the scripted ReAct policy so both produce
    the same proposals from the same observations (trace-for-trace). Protocol:
    start() yields the initial 12-vector (gains+tilts); each observe(value)
    yields the next proposal, or None when the schedule stops.
    """

    MIN_STEP = 0.125

    def __init__(self, init_gains, init_tilts, step: float = 0.5,
                 max_sweeps: int = 10, include_tilts: bool = True,
                 gain_bounds=physics.GAIN_RANGE,
                 tilt_bounds=physics.TILT_RANGE):
        self.cur = np.concatenate([np.asarray(init_gains, float),
                                   np.asarray(init_tilts, float)])
        if self.cur.shape != (12,):
            raise ValueError("need 6 gains and 6 tilts")
        self.step = float(step)
        self.max_sweeps = int(max_sweeps)
        self.dims = list(range(6)) + (list(range(6, 12)) if include_tilts
                                      else [])
        self.bounds = [gain_bounds] * 6 + [tilt_bounds] * 6
        self.best = None
        self.sweeps_done = 0
        self._di = 0
        self._si = 0
        self._sweep_improved = False
        self._pending = None  # (dim, sign_index, proposed vector)
        self._started = False
        self._finished = False

    def start(self) -> np.ndarray:
        if self._started:
            raise RuntimeError("schedule already started")
        self._started = True
        return self.cur.copy()

    def _next_probe(self):
        while self._di < len(self.dims):
            dim = self.dims[self._di]
            sign = 1.0 if self._si == 0 else -1.0
            si = self._si
            if self._si == 0:
                self._si = 1
            else:
                self._si = 0
                self._di += 1
            lo, hi = self.bounds[dim]
            nv = min(hi, max(lo, self.cur[dim] + sign * self.step))
            if nv != self.cur[dim]:
                vec = self.cur.copy()
                vec[dim] = nv
                return dim, si, vec
        return None

    def observe(self, value: float):
        if not self._started or self._finished:
            raise RuntimeError("observe() without a pending proposal")
        if self.best is None:
            self.best = float(value)
        else:
            dim, si, vec = self._pending
            if value > self.best:
                self.best = float(value)
                self.cur = vec
                self._sweep_improved = True
                if si == 0 and self._di < len(self.dims) \
                        and self.dims[self._di] == dim:
                    # skip the opposite direction once a move is accepted
                    self._si = 0
                    self._di += 1
        while True:
            probe = self._next_probe()
            if probe is not None:
                self._pending = probe
                return probe[2].copy()
            self.sweeps_done += 1
            if not self._sweep_improved:
                self.step *= 0.5
            if self.step < self.MIN_STEP or self.sweeps_done >= self.max_sweeps:
                self._finished = True
                return None
            self._sweep_improved = False
            self._di = 0
            self._si = 0


def coordinate_ascent(env, init: GainConfig | None = None, step: float = 0.5,
                      max_sweeps: int = 10, include_tilts: bool = True
                      ) -> OptimizerReport:
    """Greedy cyclic +/-step search over gains (and optionally tilts)."""
    t0 = time.perf_counter()
    if init is None:
        init = GainConfig(tuple(env.initial_gains), tuple(env.initial_tilts))
    sched = CoordinateAscentSchedule(init.gains, init.tilts, step=step,
                                     max_sweeps=max_sweeps,
                                     include_tilts=include_tilts)
    trace = []
    vec = sched.start()
    while vec is not None:
        cfg = GainConfig.from_vector(vec)
        value = env.evaluate(cfg)
        trace.append(ObjectiveSample(cfg, value,
                                     tick=getattr(env, "tick", len(trace))))
        vec = sched.observe(value)
    return _report(trace, t0)
