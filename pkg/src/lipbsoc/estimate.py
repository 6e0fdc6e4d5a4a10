"""Closed-loop SOC estimation with an extended Kalman filter.

The filter runs over the state vector of a fitted filter-state model
(plain or current-scheduled).  SOC is the first state, so the filter yields
SOC together with its variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CellParams, Trace, peukert_currents
from .ident import output_partials
from .models import FilterStateParams, ScheduledParams, filter_state_matrix


class EstimatorError(RuntimeError):
    exit_code = 20


@dataclass
class SocEstimate:
    soc: float
    sigma: float
    innovation_v: float
    skipped: bool = False


@dataclass
class SocEkfConfig:
    """Noise model and initial belief.

    ``q_proc`` holds per-state process-noise variances per hour of
    operation; each step adds ``q_proc * dt_h``.  ``r_meas`` is the voltage
    measurement variance in V^2.
    """

    q_proc: np.ndarray = field(default_factory=lambda: np.array([1e-8, 1e-6, 1e-6, 1e-6]))
    r_meas: float = 1e-3 ** 2 + (5.0 / 1024) ** 2 / 12.0
    x0: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    p0: np.ndarray = field(default_factory=lambda: np.diag([0.1 ** 2, 1e-8, 1e-8, 1e-8]))
    blowup_limit: float = 1e6

    def __post_init__(self):
        self.q_proc = np.asarray(self.q_proc, dtype=float).reshape(4)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(4)
        self.p0 = np.asarray(self.p0, dtype=float).reshape(4, 4)
        if np.any(self.q_proc < 0):
            raise ValueError("q_proc must be non-negative")
        if not self.r_meas > 0:
            raise ValueError("r_meas must be positive")
        if np.min(np.linalg.eigvalsh(0.5 * (self.p0 + self.p0.T))) < -1e-12:
            raise ValueError("p0 must be positive semidefinite")

    @classmethod
    def for_sensor(cls, sensor, model, cell: CellParams, soc0: float,
                   soc_sigma0: float = 0.3) -> "SocEkfConfig":
        """Derive noise levels from a sensor description.

        Current noise enters twice: as SOC random walk and, through the
        ohmic weight w7, as extra voltage noise.
        """
        p = model.params[0] if isinstance(model, ScheduledParams) else model
        scale = cell.sample_period_h / cell.peukert_capacity_cp
        r_ohm = abs(p.w[6]) * scale
        r_meas = sensor.voltage_variance + (r_ohm * sensor.i_noise_sigma) ** 2
        # per-step SOC variance from current noise, expressed per hour
        q_soc = (sensor.i_noise_sigma * scale) ** 2 / cell.sample_period_h
        q_soc += (sensor.i_bias * scale) ** 2 / cell.sample_period_h
        q = np.array([max(q_soc, 1e-8), 1e-6, 1e-6, 1e-6])
        return cls(q_proc=q, r_meas=r_meas, x0=np.array([soc0, 0.0, 0.0, 0.0]),
                   p0=np.diag([soc_sigma0 ** 2, 1e-8, 1e-8, 1e-8]))


@dataclass
class Belief:
    x: np.ndarray
    p: np.ndarray


def _params_for(model, i: float) -> FilterStateParams:
    if isinstance(model, ScheduledParams):
        return model.select(i)
    if isinstance(model, FilterStateParams):
        return model
    raise TypeError("SOC estimation needs a filter_state or scheduled model")


def soc_ekf_step(belief: Belief, i_prev: float | None, i: float, v_measured: float,
                 model, cell: CellParams, cfg: SocEkfConfig) -> tuple[Belief, SocEstimate]:
    """Predict from the previous sample's current (skipped when ``i_prev`` is
    None, i.e. at the first sample), then correct with ``v_measured``."""
    x, P = belief.x, belief.p
    if i_prev is not None:
        pw = _params_for(model, i_prev)
        w = pw.w
        im = float(peukert_currents(i_prev, cell))
        x1, x2, x3, x4 = (float(v) for v in x)
        x = np.array([min(max(x1 - im, 0.0), 1.0), w[0] * x1 + w[1] * x2 + w[2],
                      w[3] * x3 + w[4] * x4, -w[4] * x3 + w[3] * x4 + im])
        A = filter_state_matrix(w)
        P = A @ P @ A.T + np.diag(cfg.q_proc * cell.sample_period_h)

    p_out = _params_for(model, i)
    w = p_out.w
    im = float(peukert_currents(i, cell))
    x1, x2, x3, x4 = (float(v) for v in x)
    y = (w[5] + w[6] * im + w[7] / (x1 + w[8]) + w[9] * x1
         + p_out.fixed_output_gain * x2 + w[10] * x3 + w[11] * x4)
    skipped = not math.isfinite(v_measured)
    innovation = math.nan if skipped else float(v_measured - y)
    if not skipped:
        _, H = output_partials(x, im, w, p_out.fixed_output_gain)
        ph = P @ H
        s = float(H @ ph) + cfg.r_meas
        K = ph / s
        x = x + K * innovation
        x[0] = min(max(x[0], 0.0), 1.0)
        ikh = np.eye(4) - np.outer(K, H)
        P = ikh @ P @ ikh.T + cfg.r_meas * np.outer(K, K)
    P = 0.5 * (P + P.T)
    d = np.diag(P)
    if not np.all(np.isfinite(d)) or d.max() > cfg.blowup_limit:
        raise EstimatorError("SOC estimator covariance blow-up")
    est = SocEstimate(float(x[0]), math.sqrt(max(P[0, 0], 0.0)), innovation, skipped)
    return Belief(x, P), est


@dataclass
class SocRun:
    time_s: np.ndarray
    soc: np.ndarray
    sigma: np.ndarray
    innovation_v: np.ndarray
    skipped: np.ndarray
    summary: dict

    def estimates(self) -> list[SocEstimate]:
        return [SocEstimate(*row) for row in
                zip(self.soc.tolist(), self.sigma.tolist(), self.innovation_v.tolist(),
                    self.skipped.tolist())]


def soc_ekf_run(trace: Trace, model, cell: CellParams, cfg: SocEkfConfig,
                soc_true=None) -> SocRun:
    """Run the estimator over a measured trace.

    With ``soc_true`` the summary adds RMS / final error and the fraction
    of samples whose error lies within three sigma.
    """
    cell = cell.with_period_s(trace.period_s) if len(trace) > 1 else cell
    n = len(trace)
    soc = np.empty(n)
    sigma = np.empty(n)
    innov = np.empty(n)
    skipped = np.zeros(n, dtype=bool)
    belief = Belief(cfg.x0.copy(), cfg.p0.copy())
    cur = trace.current_a.tolist()
    volt = trace.voltage_v.tolist()
    for k in range(n):
        try:
            belief, est = soc_ekf_step(belief, cur[k - 1] if k else None, cur[k], volt[k],
                                       model, cell, cfg)
        except EstimatorError as exc:
            raise EstimatorError(f"{exc} at sample {k}") from exc
        soc[k], sigma[k], innov[k], skipped[k] = est.soc, est.sigma, est.innovation_v, est.skipped
    summary = {"n_samples": n, "n_skipped": int(skipped.sum()),
               "final_soc": float(soc[-1]), "final_sigma": float(sigma[-1])}
    if soc_true is not None:
        err = soc - np.asarray(soc_true, dtype=float)
        summary.update({
            "rms_soc_error": float(np.sqrt(np.mean(err ** 2))),
            "max_abs_soc_error": float(np.max(np.abs(err))),
            "final_soc_error": float(err[-1]),
            "coverage_3sigma": float(np.mean(np.abs(err) <= 3.0 * sigma)),
        })
    return SocRun(trace.time_s.copy(), soc, sigma, innov, skipped, summary)
