"""Scenario parsing, validation, and the mutable simulator state."""

from __future__ import annotations

import numpy as np
import pytest

from adonsim import physics, scenario
from adonsim.scenario import (Event, InvalidLoad, ParseError, SimulatorState,
                              ValidationError)


def _state(text, seed=123, **kw):
    sc = scenario.load_scenario(text, seed=seed)
    return SimulatorState(sc, np.random.SeedSequence(seed), **kw)


def test_parse_sorting_and_comments():
    sc = scenario.load_scenario("""
        # comments and blank lines are ignored
        20 set-load 10   # trailing comment
        5 establish-batches 2
        40 end
    """)
    assert [e.kind for e in sc.events] == ["establish-batches", "set-load"]
    assert [e.at_tick for e in sc.events] == [5, 20]
    assert sc.end_tick == 40
    assert sc.events[0].describe() == "establish-batches n=2"
    assert sc.events[1].describe() == "set-load target=10"


def test_parse_all_kinds():
    sc = scenario.load_scenario(
        "1 establish-batches 4\n"
        "2 fiber-cut 0\n"
        "3 repair-cut 0\n"
        "4 aging-ramp 1 0.25 2.0\n"
        "5 set-load 30\n"
        "9 end\n")
    kinds = [e.kind for e in sc.events]
    assert kinds == ["establish-batches", "fiber-cut", "repair-cut",
                     "aging-ramp", "set-load"]
    ramp = sc.events[3]
    assert ramp.span_id == 1
    assert ramp.rate_db_per_tick == 0.25
    assert ramp.cap_db == 2.0
    assert ramp.describe() == "aging-ramp span=1 rate=0.25 cap=2.0"
    assert sc.events[2].describe() == "repair-cut span=0"


def test_parse_error_positions():
    with pytest.raises(ParseError) as ei:
        scenario.load_scenario("x establish-batches 4")
    assert ei.value.line == 1
    assert ei.value.column == 1

    with pytest.raises(ParseError) as ei:
        scenario.load_scenario("10 set-load 5\n5 bogus 1")
    assert ei.value.line == 2
    assert ei.value.column == 3
    assert "bogus" in str(ei.value)

    with pytest.raises(ParseError) as ei:
        scenario.load_scenario("10 set-load abc")
    assert ei.value.line == 1
    assert ei.value.column == 13

    with pytest.raises(ParseError, match="takes 1 argument"):
        scenario.load_scenario("10 set-load")
    with pytest.raises(ParseError, match="missing event kind"):
        scenario.load_scenario("10")
    with pytest.raises(ParseError, match="tick must be >= 0"):
        scenario.load_scenario("-1 set-load 5")


def test_validation_errors():
    with pytest.raises(InvalidLoad):
        scenario.load_scenario("10 set-load 12")
    with pytest.raises(ValidationError):
        scenario.load_scenario("10 establish-batches 7")
    with pytest.raises(ValidationError):
        scenario.load_scenario("10 fiber-cut 5")
    with pytest.raises(ValidationError):
        scenario.load_scenario("10 aging-ramp 1 0 2.0")
    with pytest.raises(ValidationError):
        scenario.load_scenario("10 aging-ramp 1 0.1 -1")
    # InvalidLoad is a ValidationError is a ValueError
    assert issubclass(InvalidLoad, ValidationError)
    assert issubclass(ParseError, ValueError)


def test_end_tick_defaults_past_last_event():
    sc = scenario.load_scenario("10 set-load 5")
    assert sc.end_tick == 110
    assert scenario.load_scenario("").end_tick == 0


def test_builtin_canonical_pinned():
    sc = scenario.builtin_scenario("canonical", seed=7)
    assert sc.name == "canonical"
    assert sc.end_tick == 1300
    table = [(e.at_tick, e.describe()) for e in sc.events]
    assert table == [
        (10, "establish-batches n=4"),
        (300, "fiber-cut span=0"),
        (360, "repair-cut span=0"),
        (500, "set-load target=30"),
        (650, "set-load target=25"),
        (800, "set-load target=15"),
        (950, "aging-ramp span=1 rate=0.25 cap=2.0"),
        (1150, "set-load target=30"),
    ]
    with pytest.raises(FileNotFoundError):
        scenario.builtin_scenario("no-such-scenario")


def test_seeded_families_deterministic():
    for seed in range(8):
        a = scenario.cut_scenario(seed)
        b = scenario.cut_scenario(seed)
        assert a.events == b.events
        assert a.name == f"cut-{seed}"
        cut = [e for e in a.events if e.kind == "fiber-cut"]
        rep = [e for e in a.events if e.kind == "repair-cut"]
        assert len(cut) == 1 and len(rep) == 1
        assert cut[0].span_id == rep[0].span_id
        assert 0 <= cut[0].span_id < 4
    spans = {scenario.cut_scenario(s).events[1].span_id for s in range(20)}
    assert spans == {0, 1, 2, 3}
    spans = {scenario.aging_scenario(s).events[1].span_id for s in range(20)}
    assert spans == {0, 1, 2, 3}


def test_ground_truth_ranges():
    for seed in range(10):
        t = scenario.GroundTruth.draw(np.random.SeedSequence(seed))
        assert np.all((t.hidden_extra_loss_db >= 0.0)
                      & (t.hidden_extra_loss_db <= 1.5))
        assert np.all((t.hidden_nf_db >= 4.5) & (t.hidden_nf_db <= 6.5))
        assert np.all(t.aging_offset_db == 0.0)
    a = scenario.GroundTruth.draw(np.random.SeedSequence(3))
    b = scenario.GroundTruth.draw(np.random.SeedSequence(3))
    assert np.array_equal(a.hidden_extra_loss_db, b.hidden_extra_loss_db)
    assert np.array_equal(a.hidden_nf_db, b.hidden_nf_db)


def test_step_applies_scheduled_events():
    st = _state("3 fiber-cut 1\n5 repair-cut 1\n10 end")
    assert st.tick == -1
    for _ in range(3):
        applied = st.step()
    assert st.tick == 2
    assert not st.any_cut()
    applied = st.step()  # tick 3
    assert [e.kind for e in applied] == ["fiber-cut"]
    assert st.link.spans[1].is_cut
    assert list(st.osc_alive()) == [True, False, True, True]
    st.step()  # tick 4
    applied = st.step()  # tick 5
    assert [e.kind for e in applied] == ["repair-cut"]
    assert not st.any_cut()


def test_ramp_rate_and_cap():
    st = _state("1 aging-ramp 2 0.5 1.2\n10 end")
    hidden = st.truth.hidden_extra_loss_db[2]
    st.step()  # tick 0
    assert st.truth.aging_offset_db[2] == 0.0
    st.step()  # tick 1: ramp registered and first increment applied
    assert st.truth.aging_offset_db[2] == pytest.approx(0.5)
    st.step()
    assert st.truth.aging_offset_db[2] == pytest.approx(1.0)
    st.step()  # capped increment
    assert st.truth.aging_offset_db[2] == pytest.approx(1.2)
    st.step()
    assert st.truth.aging_offset_db[2] == pytest.approx(1.2)
    assert st.link.spans[2].extra_loss_db == pytest.approx(hidden + 1.2)
    assert st.link.spans[0].extra_loss_db == pytest.approx(
        st.truth.hidden_extra_loss_db[0])


def test_injected_event_applies_next_step():
    st = _state("10 end")
    st.step()
    st.inject(Event(0, "fiber-cut", span_id=0))
    assert not st.any_cut()  # not yet
    applied = st.step()
    assert [e.kind for e in applied] == ["fiber-cut"]
    assert st.any_cut()


def test_wavelength_add_lowest_free():
    st = _state("10 end")
    changed = st.apply_wavelength_change(10)
    assert changed == list(range(10))
    assert st.grid.n_active == 10
    assert [i for i in range(30) if st.grid.is_real[i]] == [0, 5]
    st.apply_wavelength_change(20)
    assert [i for i in range(30) if st.grid.is_real[i]] == [0, 5, 10, 15]


def test_wavelength_drop_highest_occupied():
    st = _state("10 end")
    st.apply_wavelength_change(20)
    changed = st.apply_wavelength_change(15)
    assert sorted(changed) == [15, 16, 17, 18, 19]
    assert st.grid.n_active == 15
    assert [i for i in range(30) if st.grid.is_real[i]] == [0, 5, 10]
    st.apply_wavelength_change(0)
    assert st.grid.n_active == 0
    assert not st.grid.is_real.any()


def test_wavelength_add_fills_holes_first():
    st = _state("10 end")
    st.grid.active[5:10] = True
    st.grid.is_real[5] = True
    changed = st.apply_wavelength_change(10)
    assert changed == [0, 1, 2, 3, 4]  # lowest free batch, not 10..14
    assert st.grid.is_real[0]


def test_wavelength_invalid_load():
    st = _state("10 end")
    for bad in (12, -5, 35, 3):
        with pytest.raises(InvalidLoad):
            st.apply_wavelength_change(bad)


def test_set_config_atomic():
    st = _state("10 end")
    before_g = st.gains_db()
    before_v = st.config_version
    with pytest.raises(ValueError):
        st.set_config(gains_db=[26.0, 18, 18, 18, 18, 18])
    assert np.array_equal(st.gains_db(), before_g)
    assert st.config_version == before_v
    with pytest.raises(ValidationError):
        st.set_config(gains_db=[18.0] * 5)
    st.set_config(gains_db=[20.0] * 6, tilts_db=[0.5] * 6)
    assert np.all(st.gains_db() == 20.0)
    assert np.all(st.tilts_db() == 0.5)
    assert st.config_version == before_v + 1


def test_launch_vector():
    st = _state("10 end", launch_dbm_per_channel=-20.0)
    st.apply_wavelength_change(5)
    w = st.launch_w()
    assert np.all(w[:5] == pytest.approx(1e-5, rel=1e-12))
    assert np.all(w[5:] == 0.0)


def test_true_snapshot_sees_hidden_truth():
    st = _state("10 end")
    st.apply_wavelength_change(10)
    snap = st.true_snapshot()
    link = physics.default_link()
    link.grid.active[:] = st.grid.active
    link.grid.is_real[:] = st.grid.is_real
    for s, span in enumerate(link.spans):
        span.extra_loss_db = float(st.truth.hidden_extra_loss_db[s])
    for a, amp in enumerate(link.amplifiers):
        amp.noise_figure_db = float(st.truth.hidden_nf_db[a])
    ref = physics.transmit(link, st.launch_w())
    assert np.array_equal(snap.received_w, ref.received_w)
    assert snap.min_q() == ref.min_q()


def test_nominal_link_hides_truth():
    st = _state("10 end")
    st.apply_wavelength_change(10)
    nominal = st.nominal_link()
    assert all(s.extra_loss_db == 0.0 for s in nominal.spans)
    assert all(a.noise_figure_db == 5.0 for a in nominal.amplifiers)
    # occupancy is a shared view, settings are mirrored
    st.apply_wavelength_change(15)
    assert nominal.grid.n_active == 15
