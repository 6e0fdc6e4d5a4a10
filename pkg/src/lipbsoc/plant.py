"""Synthetic cell plant: test-profile generators, a ground-truth simulator
and a BMS sensor model (noise, bias, ADC quantisation)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CellParams, Trace
from .models import FilterStateParams, Model, simulate

MAX_RATE_C = 25.0


def default_truth_params() -> FilterStateParams:
    """Reference filter-model cell used as the default plant.

    OCV runs from 3.0 V at SOC 0 to 4.2 V at SOC 1.  Ohmic resistance is
    10 mOhm (w7 = -R * 3600 * Cp at 1 s sampling).  The (x3, x4) pair has
    poles at radius 0.990 (about 100 s) and adds a further 80 mV/C of slow
    polarisation.  x2 is left undriven (w1 = w3 = 0), so a cell at rest has
    all filter states at zero.
    """
    w6, w8, w9 = 3.6, -0.03, 0.05
    w10 = 4.2 - w6 - w8 / (1.0 + w9)
    return FilterStateParams([0.0, 0.9, 0.0, 0.99005, 0.002, w6, -288.0, w8, w9,
                              w10, -0.5, -2.87])


@dataclass(frozen=True)
class PlantConfig:
    truth_model: Model = field(default_factory=default_truth_params)
    cell: CellParams = field(default_factory=CellParams)
    seed: int = 0
    soc0: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.soc0 <= 1.0:
            raise ValueError("soc0 must lie in [0, 1]")
        if isinstance(self.truth_model, FilterStateParams):
            bad = self.truth_model.stability_violations()
            if bad:
                raise ValueError("unstable truth model: " + "; ".join(bad))


@dataclass(frozen=True)
class SensorConfig:
    """BMS measurement chain.  ``adc_bits=None`` disables quantisation."""

    v_noise_sigma: float = 1e-3
    i_noise_sigma: float = 0.1
    i_bias: float = 0.0
    adc_bits: int | None = 10
    adc_fullscale_v: float = 5.0

    def __post_init__(self):
        if self.v_noise_sigma < 0 or self.i_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.adc_bits is not None and self.adc_bits < 1:
            raise ValueError("adc_bits must be >= 1")

    @property
    def lsb_v(self) -> float:
        return 0.0 if self.adc_bits is None else self.adc_fullscale_v / 2 ** self.adc_bits

    @property
    def quantization_floor_v(self) -> float:
        """RMS error of an ideal uniform quantiser, LSB / sqrt(12)."""
        return self.lsb_v / math.sqrt(12.0)

    @property
    def voltage_variance(self) -> float:
        return self.v_noise_sigma ** 2 + self.quantization_floor_v ** 2


@dataclass(frozen=True)
class ProfileSpec:
    """Test profile description.

    pulse: ``rate_c`` pulses of ``pulse_s`` separated by ``rest_s`` rests.
    Each discharge-phase cycle is discharge / rest / shorter charge
    (``charge_fraction`` of the pulse) / rest, repeated from ``soc_high``
    down to ``soc_low``; the charge phase mirrors it back up.

    drive_cycle: a ``cycle_s`` long random dynamic profile with RMS
    swing ``rate_c`` and mean ``mean_rate_c`` (net discharge), repeated
    until the SOC window is traversed.

    constant / rest: ``duration_s`` of fixed ``rate_c`` / zero current.
    """

    kind: str = "pulse"
    rate_c: float = 1.0
    pulse_s: float = 60.0
    rest_s: float = 300.0
    soc_high: float = 1.0
    soc_low: float = 0.1
    charge_fraction: float = 0.5
    mean_rate_c: float = 0.5
    cycle_s: float = 1370.0
    duration_s: float = 3600.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pulse", "drive_cycle", "constant", "rest"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if abs(self.rate_c) > MAX_RATE_C or abs(self.mean_rate_c) > MAX_RATE_C:
            raise ValueError(f"|rate| must not exceed {MAX_RATE_C}C")


def _steps(seconds: float, period_s: float) -> int:
    return int(round(seconds / period_s))


def gen_pulse_profile(spec: ProfileSpec, cell: CellParams) -> Trace:
    if spec.kind != "pulse":
        raise ValueError("gen_pulse_profile needs kind='pulse'")
    if not (0.0 <= spec.soc_low < spec.soc_high <= 1.0):
        raise ValueError(f"infeasible SOC window [{spec.soc_low}, {spec.soc_high}]")
    if spec.rate_c <= 0 or spec.pulse_s <= 0 or spec.rest_s < 0:
        raise ValueError("pulse profile needs rate_c > 0, pulse_s > 0, rest_s >= 0")
    if not 0.0 <= spec.charge_fraction < cell.eta_charge:
        raise ValueError("charge_fraction must lie in [0, eta_charge) for net progress")

    period_s = cell.sample_period_s
    amps = cell.c_rate(spec.rate_c)
    # SOC change per sample at the pulse current
    d_dis = amps * cell.sample_period_h / cell.nominal_capacity_ah
    d_chg = cell.eta_charge * d_dis
    n_pulse = _steps(spec.pulse_s, period_s)
    n_rest = _steps(spec.rest_s, period_s)
    n_back = _steps(spec.pulse_s * spec.charge_fraction, period_s)

    segments: list[tuple[float, int]] = []
    soc = spec.soc_high

    def push(current: float, n: int):
        if n > 0:
            segments.append((current, n))

    # discharge phase
    while soc - spec.soc_low > 1e-12:
        n = min(n_pulse, int(math.floor((soc - spec.soc_low) / d_dis + 1e-9)))
        if n == 0:
            break
        push(amps, n)
        soc -= n * d_dis
        push(0.0, n_rest)
        if soc - spec.soc_low <= 1e-12:
            break
        push(-amps, n_back)
        soc += n_back * d_chg
        push(0.0, n_rest)
    # charge phase
    while spec.soc_high - soc > 1e-12:
        n = min(n_pulse, int(math.floor((spec.soc_high - soc) / d_chg + 1e-9)))
        if n == 0:
            break
        push(-amps, n)
        soc += n * d_chg
        push(0.0, n_rest)
        if spec.soc_high - soc <= 1e-12:
            break
        push(amps, n_back)
        soc -= n_back * d_dis
        push(0.0, n_rest)

    current = np.concatenate([np.full(n, c) for c, n in segments])
    return Trace.from_current(current, period_s, profile="pulse", rate_c=spec.rate_c,
                              soc0=spec.soc_high)


def gen_drive_cycle(spec: ProfileSpec, cell: CellParams) -> Trace:
    if spec.kind != "drive_cycle":
        raise ValueError("gen_drive_cycle needs kind='drive_cycle'")
    if not (0.0 <= spec.soc_low < spec.soc_high <= 1.0):
        raise ValueError(f"infeasible SOC window [{spec.soc_low}, {spec.soc_high}]")
    period_s = cell.sample_period_s
    n = _steps(spec.cycle_s, period_s)
    rng = np.random.default_rng(spec.seed)
    cap = cell.c_rate(MAX_RATE_C)

    # band-limited transients: white noise through a 15 s moving average
    win = max(1, _steps(15.0, period_s))
    white = rng.standard_normal(n + win - 1)
    smooth = np.convolve(white, np.ones(win) / math.sqrt(win), mode="valid")
    cycle = cell.c_rate(spec.rate_c) * smooth / smooth.std()
    # braking events: short regen bursts
    n_bursts = max(1, n // 120)
    for start in rng.integers(0, n, size=n_bursts):
        length = int(rng.integers(5, 16))
        depth = cell.c_rate(spec.rate_c) * rng.uniform(1.5, 3.0)
        cycle[start:start + length] -= depth
    cycle += cell.c_rate(spec.mean_rate_c) - cycle.mean()
    cycle = np.clip(cycle, -cap, cap)

    eta = np.where(cycle < 0, cell.eta_charge, 1.0)
    per_cycle = float(np.sum(eta * cycle)) * cell.sample_period_h / cell.nominal_capacity_ah
    if per_cycle <= 0:
        raise ValueError("drive cycle has no net discharge; raise mean_rate_c")
    window = spec.soc_high - spec.soc_low
    reps = int(math.ceil(window / per_cycle)) + 1
    current = np.tile(cycle, reps)
    dsoc = np.cumsum(np.where(current < 0, cell.eta_charge, 1.0) * current) \
        * cell.sample_period_h / cell.nominal_capacity_ah
    stop = int(np.searchsorted(dsoc, window - 1e-12))
    current = current[:stop + 1]
    return Trace.from_current(current, period_s, profile="drive_cycle",
                              rate_c=spec.rate_c, seed=spec.seed, soc0=spec.soc_high)


def gen_profile(spec: ProfileSpec, cell: CellParams) -> Trace:
    if spec.kind == "pulse":
        return gen_pulse_profile(spec, cell)
    if spec.kind == "drive_cycle":
        return gen_drive_cycle(spec, cell)
    n = _steps(spec.duration_s, cell.sample_period_s)
    amps = 0.0 if spec.kind == "rest" else cell.c_rate(spec.rate_c)
    return Trace.from_current(np.full(n, amps), cell.sample_period_s, profile=spec.kind,
                              soc0=spec.soc_high)


def concat_traces(traces: list[Trace]) -> Trace:
    """Join current profiles end to end on one time axis."""
    period = traces[0].period_s
    current = np.concatenate([t.current_a for t in traces])
    volt = np.concatenate([t.voltage_v for t in traces])
    out = Trace.from_current(current, period, **traces[0].meta)
    return out.with_voltage(volt)


def plant_simulate(profile: Trace, cfg: PlantConfig) -> tuple[Trace, np.ndarray]:
    """Run the truth model; returns the trace with exact voltage and the exact SOC."""
    cell = cfg.cell.with_period_s(profile.period_s) if len(profile) > 1 else cfg.cell
    sim = simulate(cfg.truth_model, profile.current_a, cell, soc0=cfg.soc0)
    meta = dict(profile.meta, soc0=cfg.soc0, plant_seed=cfg.seed)
    truth = Trace(profile.time_s, profile.current_a, sim.voltage, profile.temp_c, meta)
    return truth, sim.soc


def apply_sensor(truth: Trace, s: SensorConfig, seed: int) -> Trace:
    """Measured trace: noisy, biased current; noisy, quantised voltage."""
    rng = np.random.default_rng(seed)
    n = len(truth)
    i_noise = rng.standard_normal(n)
    v_noise = rng.standard_normal(n)
    current = truth.current_a + s.i_bias + s.i_noise_sigma * i_noise
    volt = truth.voltage_v + s.v_noise_sigma * v_noise
    if s.adc_bits is not None:
        lsb = s.lsb_v
        volt = np.clip(np.round(volt / lsb) * lsb, 0.0, s.adc_fullscale_v)
    meta = dict(truth.meta, sensor_seed=seed)
    return Trace(truth.time_s, current, volt, truth.temp_c, meta)
