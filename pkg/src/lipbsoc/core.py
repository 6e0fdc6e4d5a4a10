"""Cell constants, Coulomb counting and the shared trace record.

Sign convention throughout the package: positive current discharges the
cell, negative current (charge, regen) raises SOC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class CellParams:
    """Physical constants of one cell.

    ``sample_period_h`` is the recurrence step in hours (1 s by default).
    """

    nominal_capacity_ah: float = 8.0
    eta_discharge: float = 1.0
    eta_charge: float = 0.995
    v_high: float = 4.2
    v_low: float = 3.0
    peukert_exponent_n: float = 1.0
    peukert_capacity_cp: float = 8.0
    sample_period_h: float = 1.0 / SECONDS_PER_HOUR

    def __post_init__(self):
        if not self.nominal_capacity_ah > 0:
            raise ValueError("nominal_capacity_ah must be > 0")
        if self.eta_discharge != 1.0:
            raise ValueError("eta_discharge is fixed at 1.0")
        if not 0.0 < self.eta_charge <= 1.0:
            raise ValueError("eta_charge must lie in (0, 1]")
        if not self.v_low < self.v_high:
            raise ValueError("v_low must be below v_high")
        if not self.peukert_exponent_n >= 1.0:
            raise ValueError("peukert_exponent_n must be >= 1")
        if not self.peukert_capacity_cp > 0:
            raise ValueError("peukert_capacity_cp must be > 0")
        if not self.sample_period_h > 0:
            raise ValueError("sample_period_h must be > 0")

    @property
    def sample_period_s(self) -> float:
        return self.sample_period_h * SECONDS_PER_HOUR

    def c_rate(self, rate: float) -> float:
        """Current in amps for a multiple of the nominal capacity."""
        return rate * self.nominal_capacity_ah

    def with_period_s(self, period_s: float) -> "CellParams":
        return replace(self, sample_period_h=period_s / SECONDS_PER_HOUR)


@dataclass(frozen=True)
class Soc:
    value: float
    clamped: bool = False


class Sample(NamedTuple):
    time_s: float
    current_a: float
    voltage_v: float
    temp_c: float


@dataclass
class Trace:
    """Uniformly sampled series of (time, current, voltage, temperature).

    Stored column-wise. ``voltage_v`` is NaN where no voltage is known yet
    (a bare current profile), ``temp_c`` is carried but never modelled.
    """

    time_s: np.ndarray
    current_a: np.ndarray
    voltage_v: np.ndarray | None = None
    temp_c: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time_s = np.asarray(self.time_s, dtype=float)
        self.current_a = np.asarray(self.current_a, dtype=float)
        n = self.time_s.size
        if n == 0:
            raise ValueError("trace is empty")
        if self.voltage_v is None:
            self.voltage_v = np.full(n, np.nan)
        if self.temp_c is None:
            self.temp_c = np.full(n, 25.0)
        self.voltage_v = np.asarray(self.voltage_v, dtype=float)
        self.temp_c = np.asarray(self.temp_c, dtype=float)
        for name in ("current_a", "voltage_v", "temp_c"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length does not match time_s")
        if n > 1:
            dt = np.diff(self.time_s)
            if np.any(dt <= 0):
                raise ValueError("time_s must be strictly increasing")
            if np.max(np.abs(dt - dt[0])) > 1e-6 * dt[0]:
                raise ValueError("non-uniform sampling; use Trace.resampled()")

    def __len__(self) -> int:
        return self.time_s.size

    @property
    def period_s(self) -> float:
        if len(self) < 2:
            return float(self.meta.get("period_s", 1.0))
        return float((self.time_s[-1] - self.time_s[0]) / (len(self) - 1))

    def samples(self) -> Iterator[Sample]:
        for row in zip(self.time_s, self.current_a, self.voltage_v, self.temp_c):
            yield Sample(*map(float, row))

    def slice(self, start: int, stop: int | None = None) -> "Trace":
        sl = slice(start, stop)
        return Trace(self.time_s[sl], self.current_a[sl], self.voltage_v[sl],
                     self.temp_c[sl], dict(self.meta))

    def with_voltage(self, voltage_v) -> "Trace":
        return Trace(self.time_s, self.current_a, np.asarray(voltage_v, dtype=float),
                     self.temp_c, dict(self.meta))

    @classmethod
    def from_current(cls, current_a, period_s: float = 1.0, **meta) -> "Trace":
        current_a = np.asarray(current_a, dtype=float)
        return cls(np.arange(current_a.size) * period_s, current_a, meta=meta)

    @classmethod
    def resampled(cls, time_s, current_a, voltage_v=None, temp_c=None,
                  period_s: float | None = None, meta=None) -> "Trace":
        """Build a uniform trace from an irregular log by linear interpolation."""
        time_s = np.asarray(time_s, dtype=float)
        order = np.argsort(time_s, kind="stable")
        time_s = time_s[order]
        keep = np.concatenate([[True], np.diff(time_s) > 0])
        time_s = time_s[keep]

        def col(a):
            return None if a is None else np.asarray(a, dtype=float)[order][keep]

        current_a, voltage_v, temp_c = col(current_a), col(voltage_v), col(temp_c)
        if period_s is None:
            period_s = float(np.median(np.diff(time_s))) if time_s.size > 1 else 1.0
        n = int(math.floor((time_s[-1] - time_s[0]) / period_s + 1e-9)) + 1
        grid = time_s[0] + period_s * np.arange(n)

        def interp(a):
            return None if a is None else np.interp(grid, time_s, a)

        return cls(grid, interp(current_a), interp(voltage_v), interp(temp_c),
                   dict(meta or {}))


def coulombic_efficiency(i: float, p: CellParams) -> float:
    return p.eta_charge if i < 0 else p.eta_discharge


def soc_step(soc: Soc | float, i: float, p: CellParams) -> Soc:
    value = soc.value if isinstance(soc, Soc) else float(soc)
    raw = value - coulombic_efficiency(i, p) * i * p.sample_period_h / p.nominal_capacity_ah
    clipped = min(max(raw, 0.0), 1.0)
    return Soc(clipped, clipped != raw)


def peukert_current(i: float, p: CellParams) -> float:
    """Effective per-step SOC throughput, with the current's sign restored."""
    if i == 0:
        return 0.0
    mag = abs(i) if p.peukert_exponent_n == 1.0 else abs(i) ** p.peukert_exponent_n
    return coulombic_efficiency(i, p) * math.copysign(mag, i) * p.sample_period_h / p.peukert_capacity_cp


def peukert_currents(current_a, p: CellParams) -> np.ndarray:
    """Vectorised :func:`peukert_current`."""
    i = np.asarray(current_a, dtype=float)
    eta = np.where(i < 0, p.eta_charge, p.eta_discharge)
    mag = np.abs(i) if p.peukert_exponent_n == 1.0 else np.abs(i) ** p.peukert_exponent_n
    return eta * np.copysign(mag, i) * p.sample_period_h / p.peukert_capacity_cp


def soc_trajectory(trace: Trace | np.ndarray, soc0: Soc | float, p: CellParams) -> np.ndarray:
    """SOC before each sample: element k has absorbed currents 0..k-1."""
    current = trace.current_a if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    out = np.empty(current.size)
    soc = soc0 if isinstance(soc0, Soc) else Soc(float(soc0))
    for k, i in enumerate(current):
        out[k] = soc.value
        soc = soc_step(soc, float(i), p)
    return out
