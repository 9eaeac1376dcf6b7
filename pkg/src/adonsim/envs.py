"""Objective environments: where an optimizer's evaluations actually land.

TwinEnv evaluates configurations on the calibrated twin, a pure function
(same config, same value). LiveEnv applies configurations to the running
plant and reads the next noisy telemetry record, consuming simulated time.
Both expose min-Q over the transponder channels as the scalar objective.
"""

from __future__ import annotations

import numpy as np

from . import kernels, physics


class NoActiveChannels(RuntimeError):
    pass


class CutLink(RuntimeError):
    pass


class TwinEnv:
    """Pure objective over a digital twin at a frozen load."""

    def __init__(self, twin, active: np.ndarray, real: np.ndarray,
                 initial_gains=None, initial_tilts=None):
        self.twin = twin
        self.active = np.asarray(active, bool).copy()
        self.real = np.asarray(real, bool).copy() & self.active
        if not self.real.any():
            raise NoActiveChannels("no transponder channels active")
        g0 = np.full(6, 18.0) if initial_gains is None else np.asarray(initial_gains, float)
        t0 = np.zeros(6) if initial_tilts is None else np.asarray(initial_tilts, float)
        self.initial_gains = g0.copy()
        self.initial_tilts = t0.copy()
        self.evaluations = 0
        self.gain_bounds = physics.GAIN_RANGE
        self.tilt_bounds = physics.TILT_RANGE

    @property
    def tick(self) -> int:
        return self.evaluations

    def evaluate(self, config) -> float:
        self.evaluations += 1
        q = self.twin.min_q_of(np.asarray(config.gains, float),
                               np.asarray(config.tilts, float),
                               self.active, self.real)
        if np.isnan(q):
            raise CutLink("objective undefined: no measurable channel")
        return q

    def evaluate_batch(self, gains: np.ndarray) -> np.ndarray:
        """Vectorized min-Q for many gain settings (tilts fixed at 0)."""
        gains = np.asarray(gains, float)
        m = gains.shape[0]
        self.evaluations += m
        twin = self.twin
        grid = twin.link.grid.copy()
        grid.active = self.active.copy()
        grid.is_real = self.real.copy() & grid.active
        link = physics.LinkTopology(twin.link.spans, twin.link.amplifiers,
                                    grid, twin.link.constants)
        launch = np.zeros(grid.slot_count)
        launch[grid.active] = 10.0 ** (twin.launch_dbm / 10.0) * 1e-3

        f = grid.frequencies()
        # Identical operation order to physics.chain_inputs, broadcast over m.
        glin = np.repeat(10.0 ** (gains / 10.0)[:, :, None],
                         grid.slot_count, axis=2)
        nf_lin = 10.0 ** (twin.params.nf_db / 10.0)
        pf = link.constants.planck * f
        ase_add = np.maximum(
            pf[None, None, :] * nf_lin[None, :, None] * (glin - 1.0)
            * link.constants.reference_bandwidth, 0.0)
        span_f = np.empty(4)
        span_c = np.empty(4)
        n_active = max(grid.n_active, 1)
        for s, span in enumerate(link.spans):
            loss_db = span.attenuation_db_per_km * span.length_km \
                + float(twin.params.extra_loss_db[s])
            span_f[s] = 10.0 ** (-loss_db / 10.0)
            span_c[s] = physics.nli_coefficient(span, grid, n_active)
        sig, ase, nli = kernels.receiver_batch(launch, glin, ase_add,
                                               span_f, span_c)
        noise = ase + nli
        gsnr = np.minimum(sig[:, self.real] / noise[:, self.real],
                          10.0 ** (physics.GSNR_CAP_DB / 10.0))
        q = 10.0 * np.log10(gsnr) - twin.kappa_db
        return q.min(axis=1)


class LiveEnv:
    """Noisy objective over the running plant; every evaluation costs ticks.

    apply_fn(gains, tilts) writes the config; advance_fn() moves the clock
    one tick and returns the fresh telemetry record.
    """

    def __init__(self, apply_fn, advance_fn, initial_gains, initial_tilts,
                 settle_ticks: int = 1):
        self._apply = apply_fn
        self._advance = advance_fn
        self.initial_gains = np.asarray(initial_gains, float).copy()
        self.initial_tilts = np.asarray(initial_tilts, float).copy()
        self.settle_ticks = settle_ticks
        self.evaluations = 0
        self.last_tick = -1
        self.gain_bounds = physics.GAIN_RANGE
        self.tilt_bounds = physics.TILT_RANGE

    @property
    def tick(self) -> int:
        return self.last_tick

    def evaluate(self, config) -> float:
        self.evaluations += 1
        self._apply(np.asarray(config.gains, float),
                    np.asarray(config.tilts, float))
        record = None
        for _ in range(self.settle_ticks):
            record = self._advance()
        self.last_tick = record.tick
        if not record.osc_alive.all():
            raise CutLink("objective undefined while a span is dark")
        q = record.q_db[~np.isnan(record.q_db)]
        if q.size == 0:
            raise NoActiveChannels("no measurable transponder channel")
        return float(q.min())
