"""Per-channel optical link model: loss, amplification, ASE, NLI, GSNR, Q.

The model is a single fixed chain, booster -> (span -> inline) x 4 -> preamp,
evaluated per channel on a 30-slot fixed grid. Nonlinear interference uses an
incoherent closed form: each span contributes

    P_nli = (8/27) * gamma^2 * (P^3 / B_ch^2) * l_eff^2
            * asinh((pi^2/2) * |beta2| * l_eff_a * B_ch^2 * n^(2*B_ch/df))
            / (pi * |beta2| * l_eff_a)

with P the channel power entering the span, n the active-channel count and
all quantities in SI units. The contribution is added at the span output (the
closed form already integrates generation and attenuation inside the span)
and then rides the rest of the chain through every loss and gain, as do the
ASE accumulators. Span extra loss is lumped at the span end (a VOA or bad
connector), so it does not alter the effective lengths.

Everything here is a pure function of its inputs; the heavy lifting is
delegated to :mod:`adonsim.kernels`, which carries numba and numpy backends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

GSNR_CAP_DB = 60.0
POWER_FLOOR_DBM = -60.0


@dataclass(frozen=True)
class PhysicalConstants:
    """Universal constants of the noise model."""

    planck: float = 6.62607015e-34  # J*s
    reference_bandwidth: float = 12.5e9  # Hz, ASE noise bandwidth

    def __post_init__(self):
        if self.reference_bandwidth <= 0:
            raise ValueError("reference_bandwidth must be positive")


@dataclass
class ChannelGrid:
    """Fixed 75 GHz grid with per-slot occupancy and transponder flags."""

    slot_count: int = 30
    spacing: float = 75e9  # Hz
    anchor_frequency: float = 193.05e12  # Hz, slot 0 center
    channel_bandwidth: float = 63.9e9  # Hz
    active: np.ndarray = field(default=None)
    is_real: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.active is None:
            self.active = np.zeros(self.slot_count, dtype=bool)
        if self.is_real is None:
            self.is_real = np.zeros(self.slot_count, dtype=bool)
        self.active = np.asarray(self.active, dtype=bool).copy()
        self.is_real = np.asarray(self.is_real, dtype=bool).copy()
        self.validate()

    def validate(self):
        if self.channel_bandwidth > self.spacing:
            raise ValueError("channel_bandwidth must not exceed slot spacing")
        if self.active.shape != (self.slot_count,):
            raise ValueError("active mask has wrong shape")
        if self.is_real.shape != (self.slot_count,):
            raise ValueError("is_real mask has wrong shape")
        if int(self.is_real.sum()) > 6:
            raise ValueError("at most 6 transponder-carrying slots")
        if bool((self.is_real & ~self.active).any()):
            raise ValueError("is_real slots must be active")

    def frequencies(self) -> np.ndarray:
        return self.anchor_frequency + np.arange(self.slot_count) * self.spacing

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def copy(self) -> "ChannelGrid":
        return ChannelGrid(self.slot_count, self.spacing,
                           self.anchor_frequency, self.channel_bandwidth,
                           self.active.copy(), self.is_real.copy())


@dataclass
class Span:
    """One fiber span; extra_loss carries aging/VOA contributions."""

    length_km: float = 110.0
    attenuation_db_per_km: float = 0.20
    extra_loss_db: float = 0.0
    beta2_abs_ps2_per_km: float = 21.3
    gamma_per_w_km: float = 1.3
    is_cut: bool = False

    def __post_init__(self):
        if self.length_km < 0:
            raise ValueError("span length must be >= 0")
        if self.attenuation_db_per_km <= 0:
            raise ValueError("attenuation coefficient must be positive")
        if self.extra_loss_db < 0:
            raise ValueError("extra loss must be >= 0")

    @property
    def loss_db(self) -> float:
        return self.attenuation_db_per_km * self.length_km + self.extra_loss_db


GAIN_RANGE = (10.0, 25.0)
TILT_RANGE = (-3.0, 3.0)


@dataclass
class Amplifier:
    """EDFA with flat gain plus a linear-in-frequency tilt."""

    gain_db: float = 18.0
    tilt_db: float = 0.0
    noise_figure_db: float = 5.0

    def __post_init__(self):
        validate_gain(self.gain_db)
        validate_tilt(self.tilt_db)


def validate_gain(gain_db: float):
    lo, hi = GAIN_RANGE
    if not (lo <= gain_db <= hi):
        raise ValueError(f"gain {gain_db} dB outside [{lo}, {hi}]")


def validate_tilt(tilt_db: float):
    lo, hi = TILT_RANGE
    if not (lo <= tilt_db <= hi):
        raise ValueError(f"tilt {tilt_db} dB outside [{lo}, {hi}]")


@dataclass
class LinkTopology:
    """The plant: 4 spans, 6 amplifiers, one grid, one constant set."""

    spans: list
    amplifiers: list
    grid: ChannelGrid
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)

    def __post_init__(self):
        if len(self.amplifiers) != len(self.spans) + 2:
            raise ValueError("amplifier count must be span count + 2")

    @property
    def n_spans(self) -> int:
        return len(self.spans)

    @property
    def n_amps(self) -> int:
        return len(self.amplifiers)


@dataclass
class LinkSnapshot:
    """Receiver-side state after one transmit evaluation."""

    received_w: np.ndarray
    ase_w: np.ndarray
    nli_w: np.ndarray
    gsnr_db: np.ndarray  # NaN on inactive or dark slots
    q_db: np.ndarray
    active: np.ndarray
    is_real: np.ndarray
    amp_in_dbm: np.ndarray
    amp_out_dbm: np.ndarray
    any_cut: bool

    def min_q(self) -> float:
        """Worst Q over transponder slots; NaN when none is measurable."""
        vals = self.q_db[self.is_real]
        vals = vals[~np.isnan(vals)]
        return float(vals.min()) if vals.size else float("nan")


def default_link(n_channels: int = 0) -> LinkTopology:
    """Nominal 4x110 km link; optionally pre-activate the first n slots."""
    grid = ChannelGrid()
    if n_channels:
        grid.active[:n_channels] = True
        for base in range(0, n_channels, 5):
            grid.is_real[base] = True
        grid.validate()
    return LinkTopology(
        spans=[Span() for _ in range(4)],
        amplifiers=[Amplifier() for _ in range(6)],
        grid=grid,
    )


_GRID_KEYS = ("slot_count", "spacing", "anchor_frequency", "channel_bandwidth")
_SPAN_KEYS = ("length_km", "attenuation_db_per_km", "extra_loss_db",
              "beta2_abs_ps2_per_km", "gamma_per_w_km")
_AMP_KEYS = ("gain_db", "tilt_db", "noise_figure_db")


def link_from_text(text: str) -> LinkTopology:
    """Build a link from `key = value` lines (SI units, # starts a comment).

    Span and amplifier keys apply uniformly to every span/amplifier;
    n_channels pre-activates the first n slots with the same transponder
    placement as default_link. Unknown keys are an error.
    """
    grid_kw = {}
    span_kw = {}
    amp_kw = {}
    n_spans = 4
    n_channels = 0
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"line {ln}: expected key = value, got {line!r}")
        key = key.strip()
        val = val.strip()
        try:
            if key == "slot_count":
                grid_kw[key] = int(val)
            elif key in _GRID_KEYS:
                grid_kw[key] = float(val)
            elif key == "n_spans":
                n_spans = int(val)
            elif key == "n_channels":
                n_channels = int(val)
            elif key in _SPAN_KEYS:
                span_kw[key] = float(val)
            elif key in _AMP_KEYS:
                amp_kw[key] = float(val)
            else:
                raise KeyError(key)
        except KeyError:
            raise ValueError(f"line {ln}: unknown link parameter {key!r}") \
                from None
        except ValueError:
            raise ValueError(f"line {ln}: bad value {val!r} for {key}") \
                from None
    grid = ChannelGrid(**grid_kw)
    if n_channels:
        grid.active[:n_channels] = True
        for base in range(0, n_channels, 5):
            grid.is_real[base] = True
        grid.validate()
    return LinkTopology(spans=[Span(**span_kw) for _ in range(n_spans)],
                        amplifiers=[Amplifier(**amp_kw)
                                    for _ in range(n_spans + 2)],
                        grid=grid)


def effective_length(span: Span) -> tuple:
    """(l_eff, l_eff_asymptotic) in km for one span."""
    a_lin = span.attenuation_db_per_km / (10.0 * math.log10(math.e))
    l_eff_a = 1.0 / a_lin
    if span.length_km == 0.0:
        return 0.0, l_eff_a
    l_eff = (1.0 - math.exp(-a_lin * span.length_km)) / a_lin
    return l_eff, l_eff_a


def propagate_span(powers_w: np.ndarray, span: Span) -> np.ndarray:
    """Apply one span's total loss; a cut span forces all outputs to zero."""
    powers_w = np.asarray(powers_w, dtype=float)
    if np.any(powers_w < 0):
        raise ValueError("powers must be >= 0")
    if span.is_cut:
        return np.zeros_like(powers_w)
    return powers_w * 10.0 ** (-span.loss_db / 10.0)


def per_channel_gain_db(gain_db: float, tilt_db: float,
                        grid: ChannelGrid) -> np.ndarray:
    """Tilted gain profile; tilt is edge-to-edge across the full grid band."""
    f = grid.frequencies()
    f_lo = f[0]
    f_hi = f[-1]
    f_mid = 0.5 * (f_lo + f_hi)
    return gain_db + tilt_db * ((f - f_mid) / (f_hi - f_lo))


def ase_added_w(amp: Amplifier, grid: ChannelGrid,
                constants: PhysicalConstants) -> np.ndarray:
    """Per-slot ASE power added by one amplifier, in B_ref, clamped >= 0."""
    g_lin = 10.0 ** (per_channel_gain_db(amp.gain_db, amp.tilt_db, grid) / 10.0)
    nf_lin = 10.0 ** (amp.noise_figure_db / 10.0)
    add = constants.planck * grid.frequencies() * nf_lin \
        * (g_lin - 1.0) * constants.reference_bandwidth
    return np.maximum(add, 0.0)


def amplify(powers_w: np.ndarray, ase_w: np.ndarray, amp: Amplifier,
            grid: ChannelGrid,
            constants: PhysicalConstants = PhysicalConstants()) -> tuple:
    """Apply per-channel gain to signal and ASE, then add the amp's own ASE."""
    powers_w = np.asarray(powers_w, dtype=float)
    ase_w = np.asarray(ase_w, dtype=float)
    if np.any(powers_w < 0) or np.any(ase_w < 0):
        raise ValueError("powers must be >= 0")
    g_lin = 10.0 ** (per_channel_gain_db(amp.gain_db, amp.tilt_db, grid) / 10.0)
    return powers_w * g_lin, ase_w * g_lin + ase_added_w(amp, grid, constants)


def nli_coefficient(span: Span, grid: ChannelGrid, n_active: int) -> float:
    """C in P_nli = C * P_in^3 for one span (SI units); 0 for a cut span."""
    if span.is_cut:
        return 0.0
    if n_active < 1:
        raise ValueError("n_active must be >= 1")
    l_eff_km, l_eff_a_km = effective_length(span)
    l_eff = l_eff_km * 1e3
    l_eff_a = l_eff_a_km * 1e3
    beta2 = span.beta2_abs_ps2_per_km * 1e-24 / 1e3
    gamma = span.gamma_per_w_km / 1e3
    b_ch = grid.channel_bandwidth
    arg = (math.pi ** 2 / 2.0) * beta2 * l_eff_a * b_ch ** 2 \
        * n_active ** (2.0 * b_ch / grid.spacing)
    return (8.0 / 27.0) * gamma ** 2 * (l_eff ** 2 / b_ch ** 2) \
        * math.asinh(arg) / (math.pi * beta2 * l_eff_a)


def nli_power(channel_input_power_w, span: Span, grid: ChannelGrid,
              n_active: int):
    """Per-span NLI power for the given span-input channel power."""
    p = np.asarray(channel_input_power_w, dtype=float)
    if np.any(p < 0):
        raise ValueError("input power must be >= 0")
    c = nli_coefficient(span, grid, n_active)
    out = c * p * p * p
    return float(out) if np.isscalar(channel_input_power_w) else out


def q_factor(gsnr_db, kappa_db: float = 0.0):
    """Q in dB as a monotone shift of GSNR; argmax-invariant for any kappa."""
    return gsnr_db - kappa_db


def to_dbm(power_w) -> np.ndarray:
    """W -> dBm with the instrument floor; exactly -60 for dead inputs."""
    power_w = np.asarray(power_w, dtype=float)
    out = np.full(power_w.shape, POWER_FLOOR_DBM)
    pos = power_w > 0
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(power_w[pos] * 1e3)
    out[pos] = np.maximum(vals, POWER_FLOOR_DBM)
    return out


def chain_inputs(link: LinkTopology, launch_w: np.ndarray,
                 gains_db: np.ndarray, tilts_db: np.ndarray,
                 nf_db: np.ndarray, extras_db: np.ndarray,
                 cuts: np.ndarray) -> tuple:
    """Precompute the kernel inputs (all transcendentals happen here)."""
    grid = link.grid
    f = grid.frequencies()
    n_active = max(grid.n_active, 1)
    n_amps = link.n_amps
    glin = np.empty((n_amps, grid.slot_count))
    ase_add = np.empty((n_amps, grid.slot_count))
    nf_lin = 10.0 ** (np.asarray(nf_db, dtype=float) / 10.0)
    for a in range(n_amps):
        g_db = per_channel_gain_db(float(gains_db[a]), float(tilts_db[a]), grid)
        glin[a] = 10.0 ** (g_db / 10.0)
        ase_add[a] = np.maximum(
            link.constants.planck * f * nf_lin[a] * (glin[a] - 1.0)
            * link.constants.reference_bandwidth, 0.0)
    span_f = np.empty(link.n_spans)
    span_c = np.empty(link.n_spans)
    for s, span in enumerate(link.spans):
        loss_db = span.attenuation_db_per_km * span.length_km + float(extras_db[s])
        if cuts[s]:
            span_f[s] = 0.0
            span_c[s] = 0.0
        else:
            span_f[s] = 10.0 ** (-loss_db / 10.0)
            span_c[s] = nli_coefficient(span, grid, n_active)
    return launch_w, glin, ase_add, span_f, span_c


def transmit(link: LinkTopology, launch_w: np.ndarray, config=None,
             kappa_db: float = 0.0) -> LinkSnapshot:
    """Run the full chain and report the receiver-side snapshot.

    config, when given, must expose gains and tilts sequences of length 6
    which override the amplifiers' stored settings; noise figures always come
    from the amplifiers. launch_w is per-slot launch power in W and must be
    zero on inactive slots.
    """
    if config is not None:
        gains = np.asarray(config.gains, dtype=float)
        tilts = np.asarray(config.tilts, dtype=float)
    else:
        gains = np.array([a.gain_db for a in link.amplifiers])
        tilts = np.array([a.tilt_db for a in link.amplifiers])
    nf = np.array([a.noise_figure_db for a in link.amplifiers])
    extras = np.array([s.extra_loss_db for s in link.spans])
    cuts = np.array([s.is_cut for s in link.spans])
    return transmit_arrays(link, launch_w, gains, tilts, nf, extras, cuts,
                           kappa_db)


def transmit_arrays(link: LinkTopology, launch_w: np.ndarray,
                    gains_db: np.ndarray, tilts_db: np.ndarray,
                    nf_db: np.ndarray, extras_db: np.ndarray,
                    cuts: np.ndarray, kappa_db: float = 0.0) -> LinkSnapshot:
    """transmit with every plant parameter supplied explicitly (twin entry)."""
    if link.n_spans != kernels.N_SPANS or link.n_amps != kernels.N_AMPS:
        raise ValueError("the transmit chain is fixed at 4 spans and "
                         "6 amplifiers")
    grid = link.grid
    launch_w = np.asarray(launch_w, dtype=float)
    if launch_w.shape != (grid.slot_count,):
        raise ValueError("launch vector must cover every slot")
    if np.any(launch_w[~grid.active] != 0.0):
        raise ValueError("launch power on inactive slots must be zero")
    gains = np.asarray(gains_db, dtype=float)
    tilts = np.asarray(tilts_db, dtype=float)
    nf = np.asarray(nf_db, dtype=float)
    extras = np.asarray(extras_db, dtype=float)
    cuts = np.asarray(cuts, dtype=bool)

    inputs = chain_inputs(link, launch_w, gains, tilts, nf, extras, cuts)
    sig, ase, nli = kernels.chain_states(*inputs)

    act = grid.active
    totals = sig + ase + nli
    stage_total = np.sum(totals[:, act], axis=1) if act.any() \
        else np.zeros(kernels.N_STATES)
    amp_in_dbm = to_dbm(stage_total[list(kernels.AMP_IN_STATE)])
    amp_out_dbm = to_dbm(stage_total[list(kernels.AMP_OUT_STATE)])

    rx = sig[-1]
    ase_rx = ase[-1]
    nli_rx = nli[-1]
    gsnr_db = np.full(grid.slot_count, np.nan)
    noise = ase_rx + nli_rx
    ok = act & (rx > 0.0) & (noise > 0.0)
    gsnr_lin = np.minimum(rx[ok] / noise[ok], 10.0 ** (GSNR_CAP_DB / 10.0))
    gsnr_db[ok] = 10.0 * np.log10(gsnr_lin)
    q_db = np.full(grid.slot_count, np.nan)
    q_db[ok] = q_factor(gsnr_db[ok], kappa_db)

    return LinkSnapshot(
        received_w=rx.copy(), ase_w=ase_rx.copy(), nli_w=nli_rx.copy(),
        gsnr_db=gsnr_db, q_db=q_db, active=act.copy(),
        is_real=grid.is_real.copy(), amp_in_dbm=amp_in_dbm,
        amp_out_dbm=amp_out_dbm, any_cut=bool(cuts.any()))
