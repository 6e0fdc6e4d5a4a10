import math

import numpy as np
import pytest

from lipbsoc.core import CellParams, soc_trajectory
from lipbsoc.metrics import envelope_decays
from lipbsoc.models import FilterStateParams
from lipbsoc.plant import (PlantConfig, ProfileSpec, SensorConfig, apply_sensor, concat_traces,
                           default_truth_params, gen_drive_cycle, gen_profile, gen_pulse_profile,
                           plant_simulate)

CELL = CellParams()


def _runs(current):
    """(value, length) runs of a piecewise-constant series."""
    edges = np.flatnonzero(np.diff(current)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [current.size]])
    return [(current[a], b - a) for a, b in zip(starts, stops)]


def test_pulse_amplitudes_and_rests():
    tr = gen_pulse_profile(ProfileSpec(rate_c=1.0, soc_high=1.0, soc_low=0.5), CELL)
    assert set(np.unique(tr.current_a)) == {-8.0, 0.0, 8.0}
    runs = _runs(tr.current_a)
    assert all(n == 300 for c, n in runs if c == 0.0)
    assert all(0 < n <= 60 for c, n in runs if c != 0.0)
    # each full discharge pulse removes 60 s * 1C of charge
    soc = soc_trajectory(tr, 1.0, CELL)
    first = next(k for k, (c, _) in enumerate(runs) if c == 8.0)
    start = sum(n for _, n in runs[:first])
    assert soc[start] - soc[start + 60] == pytest.approx(60 / 3600, abs=1e-12)


def test_pulse_reaches_window_and_returns():
    tr = gen_pulse_profile(ProfileSpec(rate_c=2.0, soc_high=0.9, soc_low=0.3), CELL)
    soc = soc_trajectory(tr, 0.9, CELL)
    assert soc.min() >= 0.3 - 0.02 and soc.min() <= 0.3 + 0.02
    assert tr.meta["soc0"] == 0.9


def test_drive_cycle_deterministic_and_bidirectional():
    spec = ProfileSpec(kind="drive_cycle", rate_c=1.5, mean_rate_c=0.5, soc_low=0.6, seed=9)
    a, b = gen_drive_cycle(spec, CELL), gen_drive_cycle(spec, CELL)
    np.testing.assert_array_equal(a.current_a, b.current_a)
    assert a.current_a.min() < 0 < a.current_a.max()
    assert np.max(np.abs(a.current_a)) <= 25 * 8.0
    soc = soc_trajectory(a, 1.0, CELL)
    assert soc[-1] == pytest.approx(0.6, abs=0.01)
    other = gen_drive_cycle(ProfileSpec(kind="drive_cycle", soc_low=0.6, seed=10), CELL)
    assert not np.array_equal(other.current_a[:100], a.current_a[:100])


def test_rest_profile_keeps_soc_and_relaxes():
    dis, _ = plant_simulate(gen_profile(ProfileSpec(kind="constant", rate_c=1.0, duration_s=600),
                                        CELL), PlantConfig())
    rest = gen_profile(ProfileSpec(kind="rest", duration_s=1200), CELL)
    both, soc = plant_simulate(concat_traces([dis, rest]), PlantConfig())
    tail = soc[600:]
    assert np.all(tail == tail[0])
    v = both.voltage_v[600:]
    assert envelope_decays(v)
    assert abs(v[-1] - v[-2]) < 1e-3 * abs(v[1] - v[0])


def test_full_discharge_at_one_c():
    tr = gen_profile(ProfileSpec(kind="constant", rate_c=1.0, duration_s=3600), CELL)
    truth, soc = plant_simulate(tr, PlantConfig())
    assert soc[-1] == pytest.approx(1 / 3600, abs=1e-9)
    assert np.all(np.diff(soc) < 0)
    assert np.all(np.diff(truth.voltage_v[1:]) < 0)


def test_plant_soc_equals_coulomb_count():
    tr = gen_profile(ProfileSpec(kind="drive_cycle", rate_c=2.0, soc_low=0.4, seed=1), CELL)
    _, soc = plant_simulate(tr, PlantConfig())
    np.testing.assert_allclose(soc, soc_trajectory(tr, 1.0, CELL), atol=1e-12, rtol=0)


def test_plant_rejects_unstable_truth():
    w = default_truth_params().w.copy()
    w[3] = 1.2
    with pytest.raises(ValueError):
        PlantConfig(truth_model=FilterStateParams(w))
    with pytest.raises(ValueError):
        PlantConfig(soc0=1.5)


def test_sensor_constants():
    s = SensorConfig()
    assert s.lsb_v == pytest.approx(4.8828e-3, rel=1e-4)
    assert s.quantization_floor_v == pytest.approx(1.41e-3, rel=1e-2)


def test_identity_sensor_passes_truth():
    tr, _ = plant_simulate(gen_profile(ProfileSpec(rate_c=1.0, soc_low=0.8), CELL), PlantConfig())
    out = apply_sensor(tr, SensorConfig(v_noise_sigma=0, i_noise_sigma=0, adc_bits=None), seed=1)
    np.testing.assert_array_equal(out.voltage_v, tr.voltage_v)
    np.testing.assert_array_equal(out.current_a, tr.current_a)


def test_sensor_noise_statistics():
    n = 100_000
    tr = gen_profile(ProfileSpec(kind="rest", duration_s=n), CELL).with_voltage(np.full(n, 3.7))
    out = apply_sensor(tr, SensorConfig(v_noise_sigma=2e-3, i_noise_sigma=0.1, i_bias=0.16,
                                        adc_bits=None), seed=3)
    assert np.std(out.voltage_v - 3.7) == pytest.approx(2e-3, rel=0.02)
    assert np.std(out.current_a) == pytest.approx(0.1, rel=0.02)
    assert np.mean(out.current_a) == pytest.approx(0.16, abs=0.002)


def test_quantiser_is_idempotent():
    rng = np.random.default_rng(4)
    n = 2000
    tr = gen_profile(ProfileSpec(kind="rest", duration_s=n), CELL).with_voltage(
        rng.uniform(3.0, 4.2, n))
    s = SensorConfig(v_noise_sigma=0.0, i_noise_sigma=0.0)
    once = apply_sensor(tr, s, seed=0)
    twice = apply_sensor(once, s, seed=0)
    np.testing.assert_array_equal(once.voltage_v, twice.voltage_v)
    assert np.max(np.abs(once.voltage_v - tr.voltage_v)) <= s.lsb_v / 2 + 1e-15
    codes = once.voltage_v / s.lsb_v
    np.testing.assert_allclose(codes, np.round(codes), atol=1e-9)


def test_sensor_is_seeded():
    tr = gen_profile(ProfileSpec(kind="rest", duration_s=50), CELL).with_voltage(np.full(50, 3.9))
    a, b = apply_sensor(tr, SensorConfig(), 7), apply_sensor(tr, SensorConfig(), 7)
    np.testing.assert_array_equal(a.voltage_v, b.voltage_v)
    assert a.meta["sensor_seed"] == 7


@pytest.mark.parametrize("kw", [dict(kind="ramp"), dict(rate_c=26.0), dict(mean_rate_c=-30.0)])
def test_invalid_profile_specs(kw):
    with pytest.raises(ValueError):
        ProfileSpec(**kw)


def test_infeasible_windows():
    with pytest.raises(ValueError):
        gen_profile(ProfileSpec(soc_high=0.3, soc_low=0.5), CELL)
    with pytest.raises(ValueError):
        gen_profile(ProfileSpec(charge_fraction=1.0), CELL)
    with pytest.raises(ValueError):
        gen_profile(ProfileSpec(kind="drive_cycle", mean_rate_c=-0.5), CELL)


def test_truth_params_shape():
    p = default_truth_params()
    assert p.is_stable
    radius = math.hypot(p.w[3], p.w[4])
    assert -1 / math.log(radius) == pytest.approx(100, rel=0.01)
