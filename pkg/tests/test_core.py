from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipbsoc.core import (CellParams, Soc, Trace, coulombic_efficiency, peukert_current,
                          peukert_currents, soc_step, soc_trajectory)

CELL = CellParams()


def test_cell_defaults_and_invariants():
    assert CELL.nominal_capacity_ah == 8.0
    assert CELL.sample_period_s == pytest.approx(1.0)
    assert CELL.c_rate(1.0) == 8.0
    for bad in (dict(eta_discharge=0.99), dict(eta_charge=0.0), dict(eta_charge=1.01),
                dict(v_low=4.2, v_high=3.0), dict(peukert_exponent_n=0.9),
                dict(nominal_capacity_ah=0.0), dict(peukert_capacity_cp=-1.0),
                dict(sample_period_h=0.0)):
        with pytest.raises(ValueError):
            CellParams(**bad)


@pytest.mark.parametrize("i, expected", [(8.0, 1.0), (-8.0, 0.995), (0.0, 1.0)])
def test_coulombic_efficiency(i, expected):
    assert coulombic_efficiency(i, CELL) == expected


def test_soc_step_examples():
    assert soc_step(0.5, 8.0, CELL).value == pytest.approx(0.4997222, abs=5e-8)
    assert soc_step(0.5, -8.0, CELL).value == pytest.approx(0.5002764, abs=5e-8)
    assert soc_step(0.7, 0.0, CELL) == Soc(0.7, False)


def test_soc_step_clamps_and_flags():
    low = soc_step(1e-5, 8.0, CELL)
    assert low.value == 0.0 and low.clamped
    high = soc_step(1.0, -8.0, CELL)
    assert high.value == 1.0 and high.clamped
    assert not soc_step(Soc(0.5), 8.0, CELL).clamped


def test_peukert_examples():
    assert peukert_current(8.0, CELL) == pytest.approx(2.7778e-4, rel=1e-4)
    assert peukert_current(-8.0, CELL) == pytest.approx(-2.7639e-4, rel=1e-4)
    assert peukert_current(0.0, CELL) == 0.0


@pytest.mark.parametrize("mag", [0.1, 1.0, 8.0, 200.0])
@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_peukert_reduces_to_coulomb_increment(mag, sign):
    i = sign * mag
    expected = coulombic_efficiency(i, CELL) * i * CELL.sample_period_h / CELL.nominal_capacity_ah
    assert peukert_current(i, CELL) == pytest.approx(expected, rel=1e-12)


def test_peukert_exponent_and_vector_form_agree():
    cell = CellParams(peukert_exponent_n=1.1, peukert_capacity_cp=7.5)
    currents = np.array([-40.0, -3.0, 0.0, 0.5, 8.0, 120.0])
    vec = peukert_currents(currents, cell)
    scalar = [peukert_current(float(i), cell) for i in currents]
    np.testing.assert_allclose(vec, scalar, rtol=1e-15)
    assert np.all(np.sign(vec) == np.sign(currents))


def test_soc_trajectory_examples():
    np.testing.assert_array_equal(soc_trajectory(np.zeros(50), 0.6, CELL), 0.6)
    current = np.full(1800, 8.0)
    traj = soc_trajectory(current, 1.0, CELL)
    assert traj.size == 1800 and traj[0] == 1.0
    # element k has absorbed k samples; one more step finishes the half hour
    assert soc_step(traj[-1], current[-1], CELL).value == pytest.approx(0.5, abs=1e-12)


def test_symmetric_pulse_ends_below_start():
    current = np.concatenate([np.full(60, 8.0), np.full(60, -8.0), [0.0]])
    traj = soc_trajectory(current, 0.5, CELL)
    assert traj[-1] < 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-200, 200, allow_nan=False), min_size=1, max_size=200),
       st.floats(0.05, 0.95))
def test_trajectory_matches_exact_accumulator(currents, soc0):
    """Fold of soc_step versus an exact rational sum (no clamping region)."""
    dt_over_c = Fraction(CELL.sample_period_h) / Fraction(CELL.nominal_capacity_ah)
    exact = [Fraction(soc0)]
    for i in currents:
        eta = Fraction(CELL.eta_charge) if i < 0 else Fraction(1)
        exact.append(exact[-1] - eta * Fraction(i) * dt_over_c)
    if any(not 0 < e < 1 for e in exact):
        return
    traj = soc_trajectory(np.array(currents), soc0, CELL)
    np.testing.assert_allclose(traj, [float(e) for e in exact[:-1]], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.001, 1.0))
def test_zero_current_is_identity(soc, period_h):
    assert soc_step(soc, 0.0, CellParams(sample_period_h=period_h)).value == soc


@settings(max_examples=100, deadline=None)
@given(st.floats(0.3, 0.7), st.floats(0.5, 40.0), st.integers(1, 300))
def test_round_trip_discharge_then_charge(soc0, amps, n):
    if amps * n * CELL.sample_period_h / CELL.nominal_capacity_ah >= soc0:
        return
    charge = amps / CELL.eta_charge
    s = soc0
    for _ in range(n):
        s = soc_step(s, amps, CELL).value
    for _ in range(n):
        s = soc_step(s, -charge, CELL).value
    assert abs(s - soc0) <= 1e-9


def test_trace_validation():
    with pytest.raises(ValueError):
        Trace([], [])
    with pytest.raises(ValueError):
        Trace([0.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="non-uniform"):
        Trace([0.0, 1.0, 2.5], [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        Trace([0.0, 1.0], [0.0])


def test_trace_defaults_and_samples():
    tr = Trace.from_current([1.0, 2.0, 3.0], period_s=0.5, profile="x")
    assert tr.period_s == 0.5
    assert np.all(np.isnan(tr.voltage_v)) and np.all(tr.temp_c == 25.0)
    first = next(tr.samples())
    assert first.current_a == 1.0 and first.time_s == 0.0
    assert len(tr.slice(1)) == 2
    assert tr.with_voltage([3.0, 3.1, 3.2]).voltage_v[2] == 3.2


def test_resampled_interpolates_onto_uniform_grid():
    t = np.array([0.0, 1.0, 2.5, 3.0, 4.0])
    i = 2.0 * t
    tr = Trace.resampled(t, i)
    np.testing.assert_allclose(tr.time_s, [0, 1, 2, 3, 4])
    np.testing.assert_allclose(tr.current_a, 2.0 * tr.time_s)
