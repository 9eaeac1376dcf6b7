"""Hot-path propagation kernels: numba-jitted with a pure-numpy fallback.

The chain arithmetic lives here twice, once as explicit loops that numba
compiles and once as vectorized numpy. Every transcendental (dB conversion,
ASE quantum term, NLI coefficient) is precomputed by the caller in shared
numpy code, so the kernels perform only +,-,*,/ in a fixed per-element order
and the two backends return bit-identical arrays.

Backend selection, decided at import time:
  ADONSIM_NUMBA=1  require numba (ImportError if missing)
  ADONSIM_NUMBA=0  force the numpy fallback
  unset            numba when importable, numpy otherwise
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None
    _HAVE_NUMBA = False

_FLAG = os.environ.get("ADONSIM_NUMBA", "").strip()
if _FLAG == "1" and not _HAVE_NUMBA:
    raise ImportError("ADONSIM_NUMBA=1 but numba is not importable")
USE_NUMBA = _HAVE_NUMBA and _FLAG != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"

# Chain states: 0 launch, then after booster, (span s, inline s) x4, preamp.
N_STATES = 11
N_SPANS = 4
N_AMPS = 6
# State index just before / just after each amplifier.
AMP_IN_STATE = (0, 2, 4, 6, 8, 9)
AMP_OUT_STATE = (1, 3, 5, 7, 9, 10)


def chain_states_numpy(launch_w, glin, ase_add, span_f, span_c):
    """Propagate one configuration, returning all intermediate states.

    launch_w: (C,) W per slot (0 where inactive)
    glin: (6, C) linear per-channel amplifier gains
    ase_add: (6, C) ASE power added by each amplifier, W in B_ref
    span_f: (4,) linear span transmission (0.0 for a cut span)
    span_c: (4,) NLI coefficient, W^-2 (0.0 for a cut span)
    returns sig, ase, nli each (N_STATES, C)
    """
    c = launch_w.shape[0]
    sig = np.empty((N_STATES, c))
    ase = np.empty((N_STATES, c))
    nli = np.empty((N_STATES, c))
    sig[0] = launch_w
    ase[0] = 0.0
    nli[0] = 0.0
    sig[1] = sig[0] * glin[0]
    ase[1] = ase[0] * glin[0] + ase_add[0]
    nli[1] = nli[0] * glin[0]
    idx = 1
    for s in range(N_SPANS):
        pin = sig[idx]
        sig[idx + 1] = sig[idx] * span_f[s]
        ase[idx + 1] = ase[idx] * span_f[s]
        nli[idx + 1] = nli[idx] * span_f[s] + span_c[s] * pin * pin * pin
        a = s + 1
        sig[idx + 2] = sig[idx + 1] * glin[a]
        ase[idx + 2] = ase[idx + 1] * glin[a] + ase_add[a]
        nli[idx + 2] = nli[idx + 1] * glin[a]
        idx += 2
    sig[10] = sig[9] * glin[5]
    ase[10] = ase[9] * glin[5] + ase_add[5]
    nli[10] = nli[9] * glin[5]
    return sig, ase, nli


def _chain_states_loops(launch_w, glin, ase_add, span_f, span_c,
                        sig, ase, nli):
    c = launch_w.shape[0]
    for i in range(c):
        sig[0, i] = launch_w[i]
        ase[0, i] = 0.0
        nli[0, i] = 0.0
        sig[1, i] = sig[0, i] * glin[0, i]
        ase[1, i] = ase[0, i] * glin[0, i] + ase_add[0, i]
        nli[1, i] = nli[0, i] * glin[0, i]
    idx = 1
    for s in range(N_SPANS):
        f = span_f[s]
        cc = span_c[s]
        a = s + 1
        for i in range(c):
            pin = sig[idx, i]
            sig[idx + 1, i] = sig[idx, i] * f
            ase[idx + 1, i] = ase[idx, i] * f
            nli[idx + 1, i] = nli[idx, i] * f + cc * pin * pin * pin
            sig[idx + 2, i] = sig[idx + 1, i] * glin[a, i]
            ase[idx + 2, i] = ase[idx + 1, i] * glin[a, i] + ase_add[a, i]
            nli[idx + 2, i] = nli[idx + 1, i] * glin[a, i]
        idx += 2
    for i in range(c):
        sig[10, i] = sig[9, i] * glin[5, i]
        ase[10, i] = ase[9, i] * glin[5, i] + ase_add[5, i]
        nli[10, i] = nli[9, i] * glin[5, i]


def receiver_batch_numpy(launch_w, glin, ase_add, span_f, span_c):
    """Receiver-state sig/ase/nli for a batch of M configurations.

    glin, ase_add: (M, 6, C); returns three (M, C) arrays.
    """
    sig = launch_w[None, :] * glin[:, 0, :]
    ase = np.zeros_like(sig) + ase_add[:, 0, :]
    nli = np.zeros_like(sig)
    for s in range(N_SPANS):
        pin = sig
        sig = sig * span_f[s]
        ase = ase * span_f[s]
        nli = nli * span_f[s] + span_c[s] * pin * pin * pin
        a = s + 1
        sig = sig * glin[:, a, :]
        ase = ase * glin[:, a, :] + ase_add[:, a, :]
        nli = nli * glin[:, a, :]
    sig = sig * glin[:, 5, :]
    ase = ase * glin[:, 5, :] + ase_add[:, 5, :]
    nli = nli * glin[:, 5, :]
    return sig, ase, nli


def _receiver_batch_loops(launch_w, glin, ase_add, span_f, span_c,
                          sig, ase, nli):
    m = glin.shape[0]
    c = launch_w.shape[0]
    for k in range(m):
        for i in range(c):
            s_v = launch_w[i] * glin[k, 0, i]
            a_v = 0.0 + ase_add[k, 0, i]
            n_v = 0.0
            for s in range(N_SPANS):
                pin = s_v
                s_v = s_v * span_f[s]
                a_v = a_v * span_f[s]
                n_v = n_v * span_f[s] + span_c[s] * pin * pin * pin
                a = s + 1
                s_v = s_v * glin[k, a, i]
                a_v = a_v * glin[k, a, i] + ase_add[k, a, i]
                n_v = n_v * glin[k, a, i]
            sig[k, i] = s_v * glin[k, 5, i]
            ase[k, i] = a_v * glin[k, 5, i] + ase_add[k, 5, i]
            nli[k, i] = n_v * glin[k, 5, i]


if _HAVE_NUMBA:
    _chain_states_jit = njit(cache=True)(_chain_states_loops)
    _receiver_batch_jit = njit(cache=True)(_receiver_batch_loops)


def chain_states_numba(launch_w, glin, ase_add, span_f, span_c):
    if not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    c = launch_w.shape[0]
    sig = np.empty((N_STATES, c))
    ase = np.empty((N_STATES, c))
    nli = np.empty((N_STATES, c))
    _chain_states_jit(launch_w, glin, ase_add, span_f, span_c, sig, ase, nli)
    return sig, ase, nli


def receiver_batch_numba(launch_w, glin, ase_add, span_f, span_c):
    if not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    m = glin.shape[0]
    c = launch_w.shape[0]
    sig = np.empty((m, c))
    ase = np.empty((m, c))
    nli = np.empty((m, c))
    _receiver_batch_jit(launch_w, glin, ase_add, span_f, span_c,
                        sig, ase, nli)
    return sig, ase, nli


if USE_NUMBA:
    chain_states = chain_states_numba
    receiver_batch = receiver_batch_numba
else:
    chain_states = chain_states_numpy
    receiver_batch = receiver_batch_numpy
