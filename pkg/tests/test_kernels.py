"""Backend equivalence: the jitted loops and the vectorized numpy path must
produce bit-identical arrays, and the env flag must pick the right one."""

from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from adonsim import kernels, physics

needs_numba = pytest.mark.skipif(not kernels._HAVE_NUMBA,
                                 reason="numba not importable")


def _random_inputs(seed, n_active=24):
    rng = np.random.default_rng(seed)
    link = physics.default_link(n_channels=n_active)
    launch = np.where(link.grid.active, 10.0 ** (-2.0) * 1e-3, 0.0)
    gains = rng.uniform(*physics.GAIN_RANGE, size=6)
    tilts = rng.uniform(*physics.TILT_RANGE, size=6)
    nf = rng.uniform(4.0, 7.0, size=6)
    extras = rng.uniform(0.0, 2.0, size=4)
    cuts = np.zeros(4, dtype=bool)
    return physics.chain_inputs(link, launch, gains, tilts, nf, extras, cuts)


@needs_numba
@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_chain_states_backends_bit_identical(seed):
    inputs = _random_inputs(seed)
    for a, b in zip(kernels.chain_states_numpy(*inputs),
                    kernels.chain_states_numba(*inputs)):
        assert np.array_equal(a, b)


@needs_numba
def test_receiver_batch_backends_bit_identical():
    base = _random_inputs(11)
    launch, glin, ase_add, span_f, span_c = base
    rng = np.random.default_rng(99)
    m = 9
    glin_b = np.stack([glin * rng.uniform(0.9, 1.1, size=glin.shape)
                       for _ in range(m)])
    ase_b = np.stack([ase_add * rng.uniform(0.9, 1.1, size=ase_add.shape)
                      for _ in range(m)])
    out_np = kernels.receiver_batch_numpy(launch, glin_b, ase_b,
                                          span_f, span_c)
    out_nb = kernels.receiver_batch_numba(launch, glin_b, ase_b,
                                          span_f, span_c)
    for a, b in zip(out_np, out_nb):
        assert np.array_equal(a, b)


def test_receiver_batch_matches_chain_tail():
    # the batched kernel is the per-config chain evaluated at its last state
    inputs = _random_inputs(21)
    launch, glin, ase_add, span_f, span_c = inputs
    sig, ase, nli = kernels.chain_states(*inputs)
    bsig, base_, bnli = kernels.receiver_batch(launch, glin[None],
                                               ase_add[None], span_f, span_c)
    assert np.array_equal(bsig[0], sig[-1])
    assert np.array_equal(base_[0], ase[-1])
    assert np.array_equal(bnli[0], nli[-1])


def test_cut_span_zeroes_signal():
    link = physics.default_link(n_channels=8)
    launch = np.where(link.grid.active, 1e-5, 0.0)
    cuts = np.array([False, True, False, False])
    inputs = physics.chain_inputs(link, launch, np.full(6, 18.0),
                                  np.zeros(6), np.full(6, 5.0),
                                  np.zeros(4), cuts)
    sig, ase, nli = kernels.chain_states(*inputs)
    # states 4.. sit downstream of span 1
    assert np.all(sig[4:] == 0.0)
    assert np.all(nli[4:] == 0.0)
    assert np.all(sig[:4][:, link.grid.active] > 0.0)
    # downstream amps keep injecting ASE
    assert np.all(ase[-1][link.grid.active] > 0.0)


def test_state_index_tables():
    assert kernels.N_STATES == 11
    assert len(kernels.AMP_IN_STATE) == kernels.N_AMPS
    assert len(kernels.AMP_OUT_STATE) == kernels.N_AMPS
    # the last two amplifiers are back to back: no span in between
    assert kernels.AMP_IN_STATE[5] == kernels.AMP_OUT_STATE[4]


def _backend_in_subprocess(flag):
    env = dict(os.environ)
    env.pop("ADONSIM_NUMBA", None)
    if flag is not None:
        env["ADONSIM_NUMBA"] = flag
    out = subprocess.run(
        [sys.executable, "-c", "import adonsim.kernels as k; print(k.BACKEND)"],
        capture_output=True, text=True, env=env)
    assert out.returncode == 0, out.stderr
    return out.stdout.strip()


def test_env_flag_selects_backend():
    assert _backend_in_subprocess("0") == "numpy"
    auto = _backend_in_subprocess(None)
    if kernels._HAVE_NUMBA:
        assert auto == "numba"
        assert _backend_in_subprocess("1") == "numba"
    else:
        assert auto == "numpy"


def test_dispatcher_matches_flag():
    if kernels.USE_NUMBA:
        assert kernels.chain_states is kernels.chain_states_numba
        assert kernels.receiver_batch is kernels.receiver_batch_numba
        assert kernels.BACKEND == "numba"
    else:
        assert kernels.chain_states is kernels.chain_states_numpy
        assert kernels.BACKEND == "numpy"
