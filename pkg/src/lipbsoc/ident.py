"""Parameter identification.

* combined model: batch least squares over the linear-in-parameters
  regressor, solved by column-pivoted QR;
* filter-state model: extended Kalman filter over the 12 weights, with
  dy/dW from the total-derivative (sensitivity) recursion;
* RBF network: the same Kalman weight recursion over the stacked
  [weights, centers, widths] vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .core import CellParams, Trace, peukert_currents, soc_trajectory
from .models import (
    N_FILTER_WEIGHTS,
    SIGMA_MIN,
    SOC_CLAMP,
    CombinedParams,
    DomainError,
    FilterStateParams,
    RbfParams,
    ScheduledParams,
    check_layout,
    default_bin_bounds,
    filter_state_matrix,
    rbf_inputs,
)

REGRESSOR_COLUMNS = ("1", "i+", "i-", "1/soc", "soc", "ln(soc)", "ln(1-soc)")
#: regression coefficient = sign * CombinedParams coefficient, column by column
COLUMN_SIGNS = np.array([1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0])


class IdentificationError(RuntimeError):
    exit_code = 10


class EmptyRegressorError(IdentificationError):
    exit_code = 11


class RankDeficiencyError(IdentificationError):
    exit_code = 12

    def __init__(self, columns: Sequence[str], condition: float):
        self.columns = tuple(columns)
        self.condition = condition
        super().__init__(f"regressor is rank deficient (condition {condition:.3g}); "
                         f"unidentifiable columns: {', '.join(self.columns)}")


class CovarianceBlowupError(IdentificationError):
    exit_code = 13

    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(message)


class EmptyBinError(IdentificationError):
    exit_code = 14

    def __init__(self, bins: Sequence[int], bounds: Sequence[float]):
        self.bins = tuple(bins)
        desc = []
        for b in self.bins:
            lo = 0.0 if b == 0 else bounds[b - 1]
            desc.append(f"bin {b} [{lo:g}, {bounds[b]:g}) A")
        super().__init__("no training data for " + "; ".join(desc))


# ---------------------------------------------------------------------------
# least squares

@dataclass
class Regressor:
    H: np.ndarray
    Y: np.ndarray
    n_excluded: int = 0

    def __post_init__(self):
        if self.H.shape[0] != self.Y.shape[0]:
            raise ValueError("row count does not match target count")


def build_regressor(trace: Trace, soc_series, clamp_band=SOC_CLAMP) -> Regressor:
    """Rows [1, i+, i-, 1/soc, soc, ln soc, ln(1-soc)] against measured voltage.

    Samples whose SOC sits on or outside ``clamp_band``, or whose voltage is
    not finite, are dropped and counted.
    """
    soc = np.asarray(soc_series, dtype=float)
    i = trace.current_a
    v = trace.voltage_v
    if soc.shape != i.shape:
        raise ValueError("soc series is not aligned with the trace")
    lo, hi = clamp_band
    keep = (soc > lo) & (soc < hi) & np.isfinite(v) & np.isfinite(i)
    n_excluded = int(np.count_nonzero(~keep))
    if not keep.any():
        raise EmptyRegressorError("every sample was excluded from the regressor")
    s, i = soc[keep], i[keep]
    H = np.column_stack([np.ones_like(s), np.where(i > 0, i, 0.0), np.where(i < 0, i, 0.0),
                         1.0 / s, s, np.log(s), np.log1p(-s)])
    return Regressor(H, v[keep], n_excluded)


@dataclass
class LsqReport:
    residual_rms_v: float
    condition: float
    n_rows: int
    n_excluded: int

    def as_dict(self) -> dict:
        return {"method": "least_squares", "residual_rms_v": self.residual_rms_v,
                "condition": self.condition, "n_rows": self.n_rows,
                "n_excluded": self.n_excluded}


def fit_least_squares(reg: Regressor, cond_limit: float = 1e12) -> tuple[CombinedParams, LsqReport]:
    """Minimise ||Y - H theta|| by column-pivoted QR on the equilibrated H.

    The model subtracts the resistive, 1/soc and soc terms, so those
    coefficients enter :class:`CombinedParams` with flipped sign
    (:data:`COLUMN_SIGNS`).

    ``cond_limit`` bounds the condition number of the column-scaled
    regressor; beyond it the trailing pivot columns are reported as
    unidentifiable.
    """
    H, Y = reg.H, reg.Y
    norms = np.linalg.norm(H, axis=0)
    zero = [REGRESSOR_COLUMNS[j] for j in np.flatnonzero(norms == 0)]
    if zero:
        raise RankDeficiencyError(zero, math.inf)
    Hs = H / norms
    Q, R, piv = scipy.linalg.qr(Hs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    cond = float(np.linalg.cond(R))
    if cond > cond_limit:
        weak = [REGRESSOR_COLUMNS[piv[j]] for j in np.flatnonzero(diag < diag[0] / cond_limit)]
        raise RankDeficiencyError(weak or [REGRESSOR_COLUMNS[piv[-1]]], cond)
    z = scipy.linalg.solve_triangular(R, Q.T @ Y)
    theta = np.empty_like(z)
    theta[piv] = z
    theta /= norms
    resid = Y - H @ theta
    report = LsqReport(float(np.sqrt(np.mean(resid ** 2))), cond, H.shape[0], reg.n_excluded)
    try:
        params = CombinedParams.from_theta(COLUMN_SIGNS * theta)
    except ValueError as exc:
        raise IdentificationError(f"least-squares solution is not a valid cell: {exc}") from None
    return params, report


def fit_combined(traces: Iterable[Trace], cell: CellParams, soc0: float | None = None,
                 clamp_band=SOC_CLAMP) -> tuple[CombinedParams, LsqReport]:
    """Stack the regressors of several traces (SOC by Coulomb counting)."""
    blocks = []
    for tr in traces:
        s0 = tr.meta.get("soc0", 1.0) if soc0 is None else soc0
        soc = soc_trajectory(tr, float(s0), cell.with_period_s(tr.period_s))
        try:
            blocks.append(build_regressor(tr, soc, clamp_band))
        except EmptyRegressorError:
            continue
    if not blocks:
        raise EmptyRegressorError("every sample was excluded from the regressor")
    reg = Regressor(np.vstack([b.H for b in blocks]), np.concatenate([b.Y for b in blocks]),
                    sum(b.n_excluded for b in blocks))
    return fit_least_squares(reg)


def relaxation_tau_scan(traces, cell: CellParams, soc0: float | None = None,
                        grid=None) -> float:
    """Dominant relaxation time constant in seconds, found from data.

    The combined-model regressor is augmented with a first-order low-pass
    of the current; the time constant giving the smallest linear
    least-squares residual is picked on a log grid and then refined.
    """
    from scipy.optimize import minimize_scalar

    from .models import lowpass

    if grid is None:
        grid = np.logspace(0, 3.5, 36)
    blocks = []
    for tr in _as_list(traces):
        c_tr = cell.with_period_s(tr.period_s) if len(tr) > 1 else cell
        s0 = float(tr.meta.get("soc0", 1.0) if soc0 is None else soc0)
        soc = soc_trajectory(tr, s0, c_tr)
        lo, hi = SOC_CLAMP
        keep = (soc > lo) & (soc < hi) & np.isfinite(tr.voltage_v)
        if keep.sum() < 10:
            continue
        blocks.append((build_regressor(tr, soc), tr.current_a, keep, tr.period_s))
    if not blocks:
        raise EmptyRegressorError("no usable samples for the time-constant scan")

    def sse(log_tau: float) -> float:
        total = 0.0
        for reg, cur, keep, period in blocks:
            z = lowpass(cur, math.exp(log_tau), period)[keep]
            H = np.column_stack([reg.H, z])
            th, *_ = np.linalg.lstsq(H, reg.Y, rcond=None)
            total += float(np.sum((H @ th - reg.Y) ** 2))
        return total

    logs = np.log(np.asarray(grid, dtype=float))
    costs = [sse(t) for t in logs]
    j = int(np.argmin(costs))
    lo_t, hi_t = logs[max(j - 1, 0)], logs[min(j + 1, logs.size - 1)]
    if hi_t > lo_t:
        res = minimize_scalar(sse, bounds=(lo_t, hi_t), method="bounded",
                              options={"xatol": 1e-4})
        if res.fun <= costs[j]:
            return float(math.exp(res.x))
    return float(math.exp(logs[j]))


# ---------------------------------------------------------------------------
# Kalman weight update shared by the filter-state and RBF trainers

def kalman_weight_update(w: np.ndarray, P: np.ndarray, c: np.ndarray, innovation: float,
                         r_meas: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One scalar-output update: L = P c / (c'Pc + R), w += L e, P -= L c'P.

    Returns (w, P, L); P is re-symmetrised.
    """
    pc = P @ c
    gain = pc / (c @ pc + r_meas)
    w = w + gain * innovation
    P = P - np.outer(gain, pc)
    P = 0.5 * (P + P.T)
    return w, P, gain


def _check_blowup(P: np.ndarray, limit: float, where: str, **extra):
    d = np.diag(P)
    if not np.all(np.isfinite(d)) or d.max() > limit:
        diag = {"max_cov_diag": float(np.nanmax(np.abs(d))),
                "argmax": int(np.nanargmax(np.abs(d))), **extra}
        raise CovarianceBlowupError(f"covariance blow-up at {where}", diag)


# ---------------------------------------------------------------------------
# filter-state model

@dataclass
class EkfState:
    """Weight estimate, its covariance and the stored sensitivity dx/dW."""

    w_hat: np.ndarray
    p_cov: np.ndarray
    r_meas: float = 0.5
    dxdw: np.ndarray = field(default_factory=lambda: np.zeros((4, N_FILTER_WEIGHTS)))
    x_hat: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if not 0.0 < self.r_meas <= 1.0:
            raise ValueError("r_meas must lie in (0, 1]")


@dataclass
class EkfConfig:
    """Identification settings.

    ``p0`` is a scalar (diagonal P0 = p0 * I) or a per-weight vector of
    variances.  ``passes`` sweeps the data repeatedly, carrying the weights
    and covariance but restarting the model state at each trace.
    """

    p0: float | Sequence[float] = 1e-2
    r_meas: float = 0.5
    passes: int = 3
    blowup_limit: float = 1e6
    project_stable: bool = True
    max_pole_radius: float = 0.9999
    min_w9: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.r_meas <= 1.0:
            raise ValueError("r_meas must lie in (0, 1]")
        if self.passes < 1:
            raise ValueError("passes must be at least 1")

    def initial_covariance(self, n: int) -> np.ndarray:
        p0 = np.asarray(self.p0, dtype=float)
        return np.diag(np.full(n, float(p0)) if p0.ndim == 0 else p0.reshape(n))


#: natural scale of each weight, used as the floor of the prior spread
FILTER_WEIGHT_SCALE = np.array([0.1, 0.1, 0.01, 0.01, 0.01, 0.1, 10.0, 0.01, 0.01, 0.1, 1.0, 1.0])


def relative_p0(template: FilterStateParams, rel: float = 0.3,
                floor=FILTER_WEIGHT_SCALE) -> np.ndarray:
    """Per-weight prior variances (rel * max(|w|, floor))**2.

    The weights span several decades (w7 multiplies a current already
    scaled by dt / Cp), so one scalar P0 suits none of them.
    """
    return (rel * np.maximum(np.abs(template.w), floor)) ** 2


def initial_filter_template(traces, cell: CellParams, soc0: float | None = None,
                            w9_grid=None) -> FilterStateParams:
    """Starting weights for :func:`ekf_identify` taken from the data.

    The static part w6 + w7*I + w8/(x1 + w9) + w10*x1 is fitted by linear
    least squares for each w9 on a log grid; the filter weights start at
    generic stable values with zero output coupling.
    """
    if w9_grid is None:
        w9_grid = np.logspace(-3, 0, 31)
    rows, ys = [], []
    for tr in _as_list(traces):
        c_tr = cell.with_period_s(tr.period_s) if len(tr) > 1 else cell
        im = peukert_currents(tr.current_a, c_tr)
        s0 = float(tr.meta.get("soc0", 1.0) if soc0 is None else soc0)
        x1 = np.clip(s0 - np.concatenate([[0.0], np.cumsum(im)[:-1]]), 0.0, 1.0)
        ok = np.isfinite(tr.voltage_v)
        rows.append((im[ok], x1[ok]))
        ys.append(tr.voltage_v[ok])
    im = np.concatenate([r[0] for r in rows])
    x1 = np.concatenate([r[1] for r in rows])
    y = np.concatenate(ys)
    if y.size == 0:
        raise EmptyRegressorError("no finite voltage samples to initialise from")
    best = None
    for w9 in w9_grid:
        H = np.column_stack([np.ones_like(x1), im, 1.0 / (x1 + w9), x1])
        th, *_ = np.linalg.lstsq(H, y, rcond=None)
        err = float(np.sum((H @ th - y) ** 2))
        if best is None or err < best[0]:
            best = (err, float(w9), th)
    _, w9, th = best
    return FilterStateParams([0.0, 0.9, 0.0, 0.99, 0.01, th[0], th[1], th[2], w9, th[3], 0.0, 0.0])


def state_sensitivity(dxdw_prev: np.ndarray, x_prev, w) -> np.ndarray:
    """dx_k/dW = (partial x_k / partial W) + A_{k-1} dx_{k-1}/dW."""
    x1, x2, x3, x4 = (float(v) for v in x_prev)
    partial = np.zeros((4, N_FILTER_WEIGHTS))
    partial[1, 0:3] = (x1, x2, 1.0)
    partial[2, 3:5] = (x3, x4)
    partial[3, 3:5] = (x4, -x3)
    return partial + filter_state_matrix(w) @ dxdw_prev


def output_partials(x, imod: float, w, gain: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """(partial y/partial W, partial y/partial x) at state x."""
    x1, _, x3, x4 = (float(v) for v in x)
    den = x1 + w[8]
    if den == 0.0:
        raise DomainError("x1 + w9 = 0 in the filter model output")
    dw = np.zeros(N_FILTER_WEIGHTS)
    dw[5] = 1.0
    dw[6] = imod
    dw[7] = 1.0 / den
    dw[8] = -w[7] / den ** 2
    dw[9:12] = (x1, x3, x4)
    dx = np.array([w[9] - w[7] / den ** 2, gain, w[10], w[11]])
    return dw, dx


def total_derivative_step(dxdw_prev: np.ndarray, x_prev, x, i: float, w, cell: CellParams,
                          gain: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Total derivative dy_k/dW and the updated stored dx_k/dW.

    ``x_prev=None`` marks the first sample, where the initial state does not
    depend on W and ``dxdw_prev`` is carried through unchanged.
    """
    w = np.asarray(w, dtype=float)
    dxdw = dxdw_prev if x_prev is None else state_sensitivity(dxdw_prev, x_prev, w)
    imod = float(peukert_currents(i, cell))
    dw, dx = output_partials(x, imod, w, gain)
    return dw + dx @ dxdw, dxdw


def _project(w: np.ndarray, cfg: EkfConfig) -> np.ndarray:
    if not cfg.project_stable:
        return w
    w = w.copy()
    r = cfg.max_pole_radius
    w[1] = min(max(w[1], -r), r)
    rad = math.hypot(w[3], w[4])
    if rad > r:
        w[3:5] *= r / rad
    w[8] = max(w[8], cfg.min_w9)
    return w


@dataclass
class IdentReport:
    family: str
    passes: int
    n_samples: int
    innovation: np.ndarray = field(repr=False)
    innovation_rms_per_pass: list[float] = field(default_factory=list)
    final_cov_diag: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    multi_pass: bool = True
    final_cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def final_innovation_rms(self) -> float:
        return self.innovation_rms_per_pass[-1] if self.innovation_rms_per_pass else math.nan

    def as_dict(self) -> dict:
        return {"method": "ekf", "family": self.family, "passes": self.passes,
                "multi_pass": self.multi_pass, "n_samples": self.n_samples,
                "innovation_rms_per_pass_v": self.innovation_rms_per_pass,
                "final_innovation_rms_v": self.final_innovation_rms,
                "final_cov_diag": self.final_cov_diag, "warnings": self.warnings}


def _as_list(traces) -> list[Trace]:
    return [traces] if isinstance(traces, Trace) else list(traces)


def ekf_identify(traces, template: FilterStateParams, cell: CellParams,
                 config: EkfConfig | None = None, soc0: float | None = None,
                 init: EkfState | None = None,
                 on_step=None) -> tuple[FilterStateParams, IdentReport]:
    """Fit filter-model weights by extended Kalman filtering.

    Each trace starts from rest: x = [soc0, 0, 0, 0] with soc0 taken from
    ``soc0`` or the trace's ``meta["soc0"]``.  ``on_step(k, w, P, c, L)`` is
    an optional probe called after every update.
    """
    cfg = config or EkfConfig()
    traces = _as_list(traces)
    gain_const = float(template.fixed_output_gain)
    if init is None:
        w = template.w.copy()
        P = cfg.initial_covariance(N_FILTER_WEIGHTS)
        r_meas = cfg.r_meas
    else:
        w, P, r_meas = init.w_hat.copy(), init.p_cov.copy(), init.r_meas
    if not 0.0 < r_meas <= 1.0:
        raise ValueError("r_meas must lie in (0, 1]")

    n_total = sum(len(t) for t in traces)
    innov = np.full(n_total, np.nan)
    rms_per_pass = []
    step = 0
    for p in range(cfg.passes if n_total else 0):
        pos = 0
        for tr in traces:
            c_tr = cell.with_period_s(tr.period_s) if len(tr) > 1 else cell
            imod = peukert_currents(tr.current_a, c_tr)
            d = tr.voltage_v
            s0 = float(tr.meta.get("soc0", 1.0) if soc0 is None else soc0)
            x = np.array([s0, 0.0, 0.0, 0.0])
            dxdw = np.zeros((4, N_FILTER_WEIGHTS))
            for k in range(len(tr)):
                if k:
                    dxdw = state_sensitivity(dxdw, x, w)
                    x1, x2, x3, x4 = x
                    im = imod[k - 1]
                    x = np.array([min(max(x1 - im, 0.0), 1.0), w[0] * x1 + w[1] * x2 + w[2],
                                  w[3] * x3 + w[4] * x4, -w[4] * x3 + w[3] * x4 + im])
                dw, dx = output_partials(x, imod[k], w, gain_const)
                y = (w[5] + w[6] * imod[k] + w[7] / (x[0] + w[8]) + w[9] * x[0]
                     + gain_const * x[1] + w[10] * x[2] + w[11] * x[3])
                if not math.isfinite(d[k]):
                    pos += 1
                    continue
                c = dw + dx @ dxdw
                e = float(d[k] - y)
                w, P, L = kalman_weight_update(w, P, c, e, r_meas)
                w = _project(w, cfg)
                innov[pos] = e
                pos += 1
                step += 1
                if on_step is not None:
                    on_step(step, w, P, c, L)
                if not math.isfinite(e) or step % 256 == 0:
                    _check_blowup(P, cfg.blowup_limit, f"pass {p + 1}, step {k}",
                                  w_hat=w.tolist())
                    if not math.isfinite(e):
                        raise CovarianceBlowupError(
                            f"non-finite innovation at pass {p + 1}, step {k}",
                            {"w_hat": w.tolist()})
        _check_blowup(P, cfg.blowup_limit, f"end of pass {p + 1}", w_hat=w.tolist())
        rms_per_pass.append(float(np.sqrt(np.nanmean(innov ** 2))))

    fitted = FilterStateParams(w, gain_const)
    report = IdentReport("filter_state", cfg.passes if n_total else 0, n_total, innov,
                         rms_per_pass, np.diag(P).tolist(),
                         ["unstable fitted weights: " + v for v in fitted.stability_violations()],
                         cfg.passes > 1, P)
    return fitted, report


# ---------------------------------------------------------------------------
# RBF network

@dataclass
class RbfEkfConfig:
    """Kalman training settings for RBF networks.

    Prior variances are set per parameter group.  ``mode="weights"`` adapts
    only the output weights and bias, holding centers and widths fixed.
    """

    p0_weights: float = 1e2
    p0_centers: float = 1e-4
    p0_widths: float = 1e-4
    r_meas: float = 1e-4
    passes: int = 3
    mode: str = "full"
    sigma_min: float = SIGMA_MIN
    blowup_limit: float = 1e6

    def __post_init__(self):
        if self.mode not in ("full", "weights"):
            raise ValueError("mode must be 'full' or 'weights'")
        if not 0.0 < self.r_meas <= 1.0:
            raise ValueError("r_meas must lie in (0, 1]")


def rbf_to_vector(p: RbfParams) -> np.ndarray:
    return np.concatenate([p.weights, p.centers.ravel(), p.widths])


def rbf_from_vector(theta: np.ndarray, template: RbfParams) -> RbfParams:
    n, d = template.centers.shape
    return RbfParams(theta[n + 1:n + 1 + n * d].reshape(n, d), theta[n + 1 + n * d:],
                     theta[:n + 1], template.input_layout,
                     template.input_min, template.input_max)


def _bind_views(p: RbfParams, theta: np.ndarray):
    # the network reads its arrays straight out of theta during training
    n, d = p.centers.shape
    p.weights = theta[:n + 1]
    p.centers = theta[n + 1:n + 1 + n * d].reshape(n, d)
    p.widths = theta[n + 1 + n * d:]


def rbf_gradient(z: np.ndarray, p: RbfParams) -> tuple[float, np.ndarray]:
    """Output and its gradient w.r.t. [weights, bias, centers, widths] at normalised z."""
    diff = z - p.centers
    dist2 = np.einsum("nd,nd->n", diff, diff)
    phi = np.exp(-dist2 / p.widths ** 2)
    wphi = p.weights[:-1] * phi
    y = float(wphi.sum() + p.weights[-1])
    g_centers = (2.0 * wphi / p.widths ** 2)[:, None] * diff
    g_widths = 2.0 * wphi * dist2 / p.widths ** 3
    return y, np.concatenate([phi, [1.0], g_centers.ravel(), g_widths])


def init_rbf(U: np.ndarray, n_kernels: int, layout: Sequence[str], seed: int = 0,
             targets: np.ndarray | None = None) -> RbfParams:
    """k-means++ centers over the normalised training inputs.

    Widths start at the median inter-center distance, kernel weights at zero
    and the bias at the target mean.
    """
    from scipy.cluster.vq import kmeans2
    from scipy.spatial.distance import pdist

    layout = check_layout(layout)
    U = np.asarray(U, dtype=float)
    lo, hi = U.min(axis=0), U.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    Z = 2.0 * (U - lo) / span - 1.0
    rng = np.random.default_rng(seed)
    if n_kernels == 1:
        centers = Z.mean(axis=0, keepdims=True)
        width = 1.0
    else:
        centers, _ = kmeans2(Z, n_kernels, seed=rng, minit="++")
        dists = pdist(centers)
        width = float(np.median(dists[dists > 0])) if np.any(dists > 0) else 1.0
    weights = np.zeros(n_kernels + 1)
    weights[-1] = 0.0 if targets is None else float(np.mean(targets))
    return RbfParams(centers, np.full(n_kernels, max(width, SIGMA_MIN)), weights, layout,
                     lo, hi)


def fit_rbf_ekf(U: np.ndarray, d: np.ndarray, init: RbfParams,
                config: RbfEkfConfig | None = None,
                on_step=None) -> tuple[RbfParams, IdentReport]:
    """Kalman-train an RBF network on raw inputs ``U`` (n, d) and targets ``d``."""
    cfg = config or RbfEkfConfig()
    U = np.asarray(U, dtype=float)
    d = np.asarray(d, dtype=float)
    p = init.copy()
    n, dim = p.centers.shape
    theta = rbf_to_vector(p)
    _bind_views(p, theta)
    n_w = n + 1
    n_active = n_w if cfg.mode == "weights" else theta.size
    prior = np.concatenate([np.full(n_w, cfg.p0_weights), np.full(n * dim, cfg.p0_centers),
                            np.full(n, cfg.p0_widths)])[:n_active]
    P = np.diag(prior)
    Z = p.normalize(U)
    innov = np.full(d.size, np.nan)
    rms = []
    step = 0
    ok = np.isfinite(d) & np.all(np.isfinite(Z), axis=1)
    for ps in range(cfg.passes if d.size else 0):
        for k in np.flatnonzero(ok):
            y, grad = rbf_gradient(Z[k], p)
            e = float(d[k] - y)
            active, P, L = kalman_weight_update(theta[:n_active], P, grad[:n_active], e,
                                                cfg.r_meas)
            theta[:n_active] = active
            if cfg.mode == "full":
                np.maximum(theta[n_w + n * dim:], cfg.sigma_min, out=theta[n_w + n * dim:])
            innov[k] = e
            step += 1
            if on_step is not None:
                on_step(step, theta, P, grad[:n_active], L)
            if step % 512 == 0:
                _check_blowup(P, cfg.blowup_limit, f"pass {ps + 1}, sample {k}")
        _check_blowup(P, cfg.blowup_limit, f"end of pass {ps + 1}")
        rms.append(float(np.sqrt(np.nanmean(innov ** 2))))
    report = IdentReport("rbf", cfg.passes if d.size else 0, int(d.size), innov, rms,
                         np.diag(P).tolist(), [], cfg.passes > 1, P)
    return rbf_from_vector(theta.copy(), p), report


def rbf_training_data(traces, layout: Sequence[str], cell: CellParams,
                      soc0: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked raw inputs and voltage targets; ``prev_voltage`` uses the
    measured previous voltage (series-parallel training)."""
    Us, ds = [], []
    for tr in _as_list(traces):
        c_tr = cell.with_period_s(tr.period_s) if len(tr) > 1 else cell
        s0 = float(tr.meta.get("soc0", 1.0) if soc0 is None else soc0)
        soc = soc_trajectory(tr, s0, c_tr)
        Us.append(rbf_inputs(layout, tr.current_a, soc, tr.voltage_v, c_tr))
        ds.append(tr.voltage_v)
    return np.vstack(Us), np.concatenate(ds)


def ekf_identify_rbf(traces, init: RbfParams | int, cell: CellParams,
                     config: RbfEkfConfig | None = None, soc0: float | None = None,
                     layout: Sequence[str] | None = None,
                     seed: int = 0) -> tuple[RbfParams, IdentReport]:
    """Train an RBF cell model on traces.

    ``init`` is either a ready RbfParams or a kernel count, in which case the
    network is seeded by :func:`init_rbf` with ``layout``.
    """
    lay = init.input_layout if isinstance(init, RbfParams) else check_layout(
        layout or ("prev_voltage", "soc", "current"))
    U, d = rbf_training_data(traces, lay, cell, soc0)
    if not isinstance(init, RbfParams):
        ok = np.isfinite(d)
        init = init_rbf(U[ok], int(init), lay, seed, d[ok])
    return fit_rbf_ekf(U, d, init, config)


# ---------------------------------------------------------------------------
# current-scheduled filter model

def bin_of_trace(trace: Trace, bounds: Sequence[float]) -> int:
    """Bin of a trace's test level, taken as its peak |i|."""
    return int(np.searchsorted(bounds, float(np.max(np.abs(trace.current_a))), side="right"))


def fit_scheduled(traces, template: FilterStateParams, cell: CellParams,
                  bounds: Sequence[float] | None = None, config: EkfConfig | None = None,
                  soc0: float | None = None) -> tuple[ScheduledParams, list[IdentReport]]:
    """One filter-model fit per |i| bin.

    Traces are grouped by their peak current (one test level per trace, as
    in a ±1C / ±2C / ±4C pulse suite).  Every bin needs data.
    """
    bounds = list(default_bin_bounds(cell) if bounds is None else bounds)
    groups: dict[int, list[Trace]] = {j: [] for j in range(len(bounds))}
    for tr in _as_list(traces):
        groups[bin_of_trace(tr, bounds)].append(tr)
    empty = [j for j, g in groups.items() if not g]
    if empty:
        raise EmptyBinError(empty, bounds)
    params, reports = [], []
    for j in range(len(bounds)):
        fitted, rep = ekf_identify(groups[j], template, cell, config, soc0)
        params.append(fitted)
        reports.append(rep)
    return ScheduledParams(bounds, params), reports
