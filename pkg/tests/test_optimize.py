"""Optimizer suite: exhaustive search vs a nested-loop oracle, GP/EI math,
Bayesian search on a known optimum, and the coordinate-ascent schedule."""

from __future__ import annotations

import numpy as np
import pytest

from adonsim import envs, optimize, physics
from adonsim.optimize import (CoordinateAscentSchedule, GainConfig,
                              GridTooLarge, ObjectiveSample, bayes_opt,
                              brute_force, coordinate_ascent,
                              expected_improvement, gp_regress)
from adonsim.twin import DigitalTwin, TwinParameters


def _twin_env(n_channels=20):
    active = np.zeros(30, bool)
    active[:n_channels] = True
    real = np.zeros(30, bool)
    for base in range(0, n_channels, 5):
        real[base] = True
    twin = DigitalTwin(physics.default_link(),
                       params=TwinParameters(
                           np.array([0.5, 1.0, 0.2, 0.8]),
                           np.array([5.2, 4.8, 5.5, 6.0, 4.6, 5.1])))
    return envs.TwinEnv(twin, active, real)


def _nested_loop_best(env, levels):
    # deliberately dumb reference: one explicit loop per amplifier
    best_v = None
    best_c = None
    for g0 in levels:
        for g1 in levels:
            for g2 in levels:
                for g3 in levels:
                    for g4 in levels:
                        for g5 in levels:
                            cfg = GainConfig((g0, g1, g2, g3, g4, g5))
                            v = env.evaluate(cfg)
                            if best_v is None or v > best_v:
                                best_v, best_c = v, cfg
    return best_c, best_v


def test_brute_force_matches_nested_loops():
    levels = (16.0, 18.0, 20.0)
    env = _twin_env()
    report = brute_force(env, levels)
    assert report.evaluations == 3 ** 6
    ref_cfg, ref_val = _nested_loop_best(env, levels)
    assert report.best_config == ref_cfg
    assert report.best_value == ref_val  # same arithmetic, bit for bit


def test_brute_force_one_point_grid():
    env = _twin_env()
    report = brute_force(env, (18.0,))
    assert report.evaluations == 1
    assert report.best_config == GainConfig((18.0,) * 6)


def test_brute_force_permutation_invariant():
    env = _twin_env()
    a = brute_force(env, (20.0, 16.0, 18.0))
    b = brute_force(env, (16.0, 18.0, 20.0))
    assert a.best_config == b.best_config
    assert a.best_value == b.best_value
    assert [s.value for s in a.trace] == [s.value for s in b.trace]


def test_brute_force_guards():
    env = _twin_env()
    with pytest.raises(GridTooLarge):
        brute_force(env, tuple(14.0 + 0.5 * i for i in range(11)))
    with pytest.raises(ValueError):
        brute_force(env, ())
    with pytest.raises(ValueError):
        brute_force(env, (26.0,))  # outside the gain range


def test_evaluate_batch_matches_scalar_path():
    env = _twin_env()
    rng = np.random.default_rng(17)
    gains = rng.uniform(*physics.GAIN_RANGE, size=(16, 6))
    batch = env.evaluate_batch(gains)
    singles = np.array([env.evaluate(GainConfig(tuple(row)))
                        for row in gains])
    assert np.array_equal(batch, singles)


def test_twin_env_guards():
    twin = DigitalTwin(physics.default_link())
    with pytest.raises(envs.NoActiveChannels):
        envs.TwinEnv(twin, np.zeros(30, bool), np.zeros(30, bool))
    env = _twin_env()
    before = env.evaluations
    env.evaluate(GainConfig((18.0,) * 6))
    assert env.evaluations == before + 1


def test_gain_config_validation():
    with pytest.raises(ValueError):
        GainConfig((18.0,) * 5)
    with pytest.raises(ValueError):
        GainConfig((26.0,) + (18.0,) * 5)
    with pytest.raises(ValueError):
        GainConfig((18.0,) * 6, (4.0,) + (0.0,) * 5)
    cfg = GainConfig.from_vector([18, 18, 18, 18, 18, 18])
    assert cfg.tilts == (0.0,) * 6
    cfg = GainConfig.from_vector(list(range(14, 20)) + [0.5] * 6)
    assert cfg.gains == tuple(float(v) for v in range(14, 20))
    with pytest.raises(ValueError):
        GainConfig.from_vector([18.0] * 7)
    assert np.array_equal(cfg.vector(include_tilts=False), cfg.gains)


def test_best_of_prefers_smallest_config_on_tie():
    class Flat:
        def evaluate(self, cfg):
            return 1.0

    report = brute_force(Flat(), (20.0, 18.0))
    assert report.best_value == 1.0
    assert report.best_config == GainConfig((18.0,) * 6)


def test_gp_regress_hand_check():
    x = np.array([[0.1], [0.5], [0.9]])
    y = np.array([1.0, 2.0, 1.5])
    q = np.array([[0.3], [0.7], [5.0]])
    ls, sv, nv = 0.3, 1.0, 0.01
    mean, var = gp_regress(x, y, q, ls, sv, nv)

    def k(a, b):
        d2 = (a[:, None, 0] - b[None, :, 0]) ** 2
        return sv * np.exp(-0.5 * d2 / ls ** 2)

    kxx = k(x, x) + nv * np.eye(3)
    kqx = k(q, x)
    ym = y.mean()
    ref_mean = ym + kqx @ np.linalg.inv(kxx) @ (y - ym)
    ref_var = sv - np.einsum("ij,jk,ik->i", kqx, np.linalg.inv(kxx), kqx)
    assert np.allclose(mean, ref_mean, atol=1e-9)
    assert np.allclose(var, ref_var, atol=1e-9)
    # a query far from all data reverts to the prior
    assert mean[2] == pytest.approx(ym, abs=1e-6)
    assert var[2] == pytest.approx(sv, abs=1e-6)
    # posterior variance never exceeds the prior variance
    assert np.all(var <= sv + 1e-12)


def test_gp_interpolates_noiselessly():
    x = np.array([[0.1], [0.5], [0.9]])
    y = np.array([1.0, 2.0, 1.5])
    mean, var = gp_regress(x, y, x, noise_var=0.0)
    assert np.allclose(mean, y, atol=1e-7)
    assert np.all(var <= 1e-9)
    assert np.all(var >= 0.0)


def test_expected_improvement_properties():
    # zero variance at the incumbent value: no improvement possible
    ei = expected_improvement(np.array([2.0]), np.array([0.0]), 2.0)
    assert ei[0] == 0.0
    # below the incumbent with zero variance
    ei = expected_improvement(np.array([1.5]), np.array([0.0]), 2.0)
    assert ei[0] == 0.0
    mean = np.array([1.0, 1.0, 2.5])
    var = np.array([0.04, 0.25, 0.0])
    ei = expected_improvement(mean, var, 2.0)
    assert np.all(ei >= 0.0)
    assert ei[1] > ei[0]  # same mean, more variance, more hope
    assert ei[2] == 0.5  # deterministic gain above the incumbent


def test_cholesky_jitter_gives_up():
    with pytest.raises(optimize.GPNumericalFailure):
        optimize._cholesky_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))


class _Quad1D:
    """Concave quadratic with a known argmax at 19.3."""

    def __init__(self):
        self.calls = []

    def config_from_vector(self, vec):
        return ("x", float(vec[0]))

    def evaluate(self, cfg):
        x = cfg[1]
        self.calls.append(x)
        return -(x - 19.3) ** 2


def test_bayes_opt_finds_quadratic_peak():
    # analytic optimum is 0 at x = 19.3; the best found must come within
    # 0.05 of it on a 20-evaluation budget
    for seed in range(5):
        report = bayes_opt(_Quad1D(), space=[(14.0, 22.0)], budget=20,
                           seed=seed)
        assert report.evaluations == 20
        assert 0.0 - report.best_value <= 0.05
        assert report.best_config[1] == pytest.approx(19.3, abs=0.25)
        assert report.best_value == max(s.value for s in report.trace)


def test_bayes_opt_deterministic_per_seed():
    r1 = bayes_opt(_Quad1D(), space=[(14.0, 22.0)], budget=15, n_init=5,
                   seed=3)
    r2 = bayes_opt(_Quad1D(), space=[(14.0, 22.0)], budget=15, n_init=5,
                   seed=3)
    assert [s.value for s in r1.trace] == [s.value for s in r2.trace]
    assert r1.best_config == r2.best_config
    r3 = bayes_opt(_Quad1D(), space=[(14.0, 22.0)], budget=15, n_init=5,
                   seed=4)
    assert [s.value for s in r3.trace] != [s.value for s in r1.trace]


def test_bayes_opt_budget_guard():
    with pytest.raises(ValueError):
        bayes_opt(_Quad1D(), space=[(14.0, 22.0)], budget=5, n_init=10)


class _Quad6D:
    gain_bounds = physics.GAIN_RANGE
    initial_gains = (18.0,) * 6
    initial_tilts = (0.0,) * 6

    def __init__(self, center=(18.0,) * 6):
        self.center = np.array(center)

    def evaluate(self, cfg):
        g = np.array(cfg.gains)
        t = np.array(cfg.tilts)
        return -float(np.sum((g - self.center) ** 2) + np.sum(t * t))


def test_coordinate_ascent_at_optimum_stays_put():
    env = _Quad6D()
    report = coordinate_ascent(env)
    assert report.best_config == GainConfig((18.0,) * 6)
    assert report.best_value == 0.0


def test_coordinate_ascent_climbs():
    env = _Quad6D(center=(19.5, 17.0, 18.5, 20.0, 16.5, 18.0))
    report = coordinate_ascent(env)
    assert report.best_value > -0.1
    got = np.array(report.best_config.gains)
    assert np.max(np.abs(got - env.center)) <= 0.5


def test_coordinate_ascent_near_brute_force():
    env = _twin_env()
    ca = coordinate_ascent(env, include_tilts=False)
    brute = brute_force(env)
    assert ca.best_value >= brute.best_value - 0.3


def test_schedule_drives_like_coordinate_ascent():
    env_a = _Quad6D(center=(19.5, 17.0, 18.5, 20.0, 16.5, 18.0))
    report = coordinate_ascent(env_a, include_tilts=False)

    sched = CoordinateAscentSchedule((18.0,) * 6, (0.0,) * 6,
                                     include_tilts=False)
    env_b = _Quad6D(center=(19.5, 17.0, 18.5, 20.0, 16.5, 18.0))
    vec = sched.start()
    manual = []
    while vec is not None:
        value = env_b.evaluate(GainConfig.from_vector(vec))
        manual.append((tuple(vec), value))
        vec = sched.observe(value)
    auto = [(tuple(s.config.vector()), s.value) for s in report.trace]
    assert manual == auto


def test_schedule_protocol_guards():
    sched = CoordinateAscentSchedule((18.0,) * 6, (0.0,) * 6)
    sched.start()
    with pytest.raises(RuntimeError):
        sched.start()
    fresh = CoordinateAscentSchedule((18.0,) * 6, (0.0,) * 6)
    with pytest.raises(RuntimeError):
        fresh.observe(1.0)
    with pytest.raises(ValueError):
        CoordinateAscentSchedule((18.0,) * 3, (0.0,) * 6)
