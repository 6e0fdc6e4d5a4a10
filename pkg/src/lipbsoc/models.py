"""Cell model families: single-state output models, the four-state filter
model and the Gaussian RBF network, plus a common ``simulate`` driver.

All three families take SOC (a state) and current (an input) and return a
loaded terminal voltage.  Parameter files are JSON documents of the form
``{"family": ..., "params": {...}}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .core import CellParams, Trace, peukert_currents, soc_trajectory

#: SOC is held inside this band before the log/reciprocal output models
SOC_CLAMP = (1e-4, 1.0 - 1e-4)
#: rest voltage used by the printed single-state models
V_FULL = 4.2


class DomainError(ValueError):
    """A model was evaluated outside its domain.

    ``index`` is the offending sample when raised from :func:`simulate`.
    """

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"{message} (sample {index})"
        super().__init__(message)
        self.index = index


def _soc_value(soc) -> float:
    return float(getattr(soc, "value", soc))


def _check_open_unit(soc: float, what: str):
    if not 0.0 < soc < 1.0:
        raise DomainError(f"{what} needs 0 < soc < 1, got {soc!r}")


# ---------------------------------------------------------------------------
# single-state output models

def shepherd_output(soc, i: float, r: float, k1: float) -> float:
    soc = _soc_value(soc)
    if soc <= 0.0:
        raise DomainError("shepherd model has a pole at soc = 0")
    return V_FULL - r * i - k1 / soc


def unnewehr_output(soc, i: float, r: float, ki: float) -> float:
    return V_FULL - r * i - ki * _soc_value(soc)


def nernst_output(soc, i: float, r: float, k1: float) -> float:
    soc = _soc_value(soc)
    if soc <= 0.0:
        raise DomainError("nernst model needs soc > 0")
    return V_FULL - r * i + k1 * math.log(soc)


def modified_nernst_output(soc, i: float, r: float, k2: float, k3: float) -> float:
    soc = _soc_value(soc)
    _check_open_unit(soc, "modified nernst model")
    return V_FULL - r * i + k2 * math.log(soc) + k3 * math.log(1.0 - soc)


@dataclass(frozen=True)
class CombinedParams:
    k0: float
    r_discharge: float
    r_charge: float
    k1: float
    k2: float
    k3: float
    k4: float

    def __post_init__(self):
        vals = self.as_theta()
        if not np.all(np.isfinite(vals)):
            raise ValueError("combined model coefficients must be finite")
        if self.r_discharge < 0 or self.r_charge < 0:
            raise ValueError("resistances must be non-negative")

    def as_theta(self) -> np.ndarray:
        """Coefficient vector [K0, R+, R-, K1, K2, K3, K4]."""
        return np.array([self.k0, self.r_discharge, self.r_charge,
                         self.k1, self.k2, self.k3, self.k4])

    @classmethod
    def from_theta(cls, theta) -> "CombinedParams":
        return cls(*map(float, theta))


def combined_output(soc, i: float, p: CombinedParams) -> float:
    soc = _soc_value(soc)
    _check_open_unit(soc, "combined model")
    r = p.r_discharge if i > 0 else p.r_charge
    return (p.k0 - r * i - p.k1 / soc - p.k2 * soc
            + p.k3 * math.log(soc) + p.k4 * math.log(1.0 - soc))


def combined_outputs(soc, current, p: CombinedParams) -> np.ndarray:
    """Vectorised combined model with SOC held inside :data:`SOC_CLAMP`."""
    s = np.clip(np.asarray(soc, dtype=float), *SOC_CLAMP)
    i = np.asarray(current, dtype=float)
    r = np.where(i > 0, p.r_discharge, p.r_charge)
    return (p.k0 - r * i - p.k1 / s - p.k2 * s
            + p.k3 * np.log(s) + p.k4 * np.log1p(-s))


# ---------------------------------------------------------------------------
# four-state filter model

N_FILTER_WEIGHTS = 12


@dataclass
class FilterStateParams:
    """Weights w1..w12 stored zero-based: ``w[0]`` is w1.

    x1 is SOC, x2 a filtered SOC, (x3, x4) an oscillatory filter pair driven
    by the Peukert-corrected current.  The x2 output coefficient is the
    fixed constant ``fixed_output_gain``, not a weight.
    """

    w: np.ndarray
    fixed_output_gain: float = 10.0

    def __post_init__(self):
        self.w = np.array(self.w, dtype=float).reshape(-1)
        if self.w.size != N_FILTER_WEIGHTS:
            raise ValueError(f"expected {N_FILTER_WEIGHTS} weights, got {self.w.size}")

    def copy(self, w=None) -> "FilterStateParams":
        return FilterStateParams(self.w.copy() if w is None else w, self.fixed_output_gain)

    def pole_radii(self) -> tuple[float, float]:
        """Magnitudes of the x2 pole and the (x3, x4) pole pair."""
        w = self.w
        return abs(w[1]), math.hypot(w[3], w[4])

    def stability_violations(self) -> list[str]:
        out = []
        r2, r34 = self.pole_radii()
        if not r2 < 1.0:
            out.append(f"|w2| = {r2:.6g} >= 1")
        if not r34 < 1.0:
            out.append(f"sqrt(w4^2 + w5^2) = {r34:.6g} >= 1")
        if not self.w[8] > 0:
            out.append(f"w9 = {self.w[8]:.6g} <= 0 puts a pole in the SOC range")
        return out

    @property
    def is_stable(self) -> bool:
        return not self.stability_violations()


def filter_state_matrix(w) -> np.ndarray:
    """State transition matrix; also the state Jacobian of the recursion."""
    return np.array([[1.0, 0.0, 0.0, 0.0],
                     [w[0], w[1], 0.0, 0.0],
                     [0.0, 0.0, w[3], w[4]],
                     [0.0, 0.0, -w[4], w[3]]])


def _imod(i: float, cell: CellParams) -> float:
    return float(peukert_currents(i, cell))


def filter_state_step(x, i: float, p: FilterStateParams, cell: CellParams) -> np.ndarray:
    x1, x2, x3, x4 = (float(v) for v in x)
    w = p.w
    im = _imod(i, cell)
    return np.array([
        min(max(x1 - im, 0.0), 1.0),
        w[0] * x1 + w[1] * x2 + w[2],
        w[3] * x3 + w[4] * x4,
        -w[4] * x3 + w[3] * x4 + im,
    ])


def filter_state_output(x, i: float, p: FilterStateParams, cell: CellParams) -> float:
    x1, x2, x3, x4 = (float(v) for v in x)
    w = p.w
    den = x1 + w[8]
    if den == 0.0:
        raise DomainError("x1 + w9 = 0 in the filter model output")
    im = _imod(i, cell)
    return (w[5] + w[6] * im + w[7] / den
            + w[9] * x1 + p.fixed_output_gain * x2 + w[10] * x3 + w[11] * x4)


def _run_filter(weights: np.ndarray, gains: np.ndarray, which: np.ndarray,
                imod: np.ndarray, x0) -> tuple[np.ndarray, np.ndarray]:
    """Inner loop shared by plain and scheduled filter models.

    ``weights`` is (K, 12); sample k uses row ``which[k]``.
    """
    n = imod.size
    states = np.empty((n, 4))
    y = np.empty(n)
    x1, x2, x3, x4 = (float(v) for v in x0)
    table = [tuple(map(float, row)) for row in weights]
    gains = [float(g) for g in gains]
    which = which.tolist()
    imod = imod.tolist()
    for k in range(n):
        j = which[k]
        w1, w2, w3, w4, w5, w6, w7, w8, w9, w10, w11, w12 = table[j]
        im = imod[k]
        states[k] = (x1, x2, x3, x4)
        den = x1 + w9
        if den == 0.0:
            raise DomainError("x1 + w9 = 0 in the filter model output", k)
        y[k] = w6 + w7 * im + w8 / den + w10 * x1 + gains[j] * x2 + w11 * x3 + w12 * x4
        x1, x2, x3, x4 = (min(max(x1 - im, 0.0), 1.0),
                          w1 * x1 + w2 * x2 + w3,
                          w4 * x3 + w5 * x4,
                          -w5 * x3 + w4 * x4 + im)
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise DomainError("filter model output is not finite", int(bad[0]))
    return y, states


@dataclass
class ScheduledParams:
    """Filter-model weight sets selected per sample by |i|.

    ``bounds[j]`` is the exclusive upper |i| limit (amps) of bin j; the last
    bound is always ``inf``.
    """

    bounds: list[float]
    params: list[FilterStateParams]

    def __post_init__(self):
        self.bounds = [float(b) for b in self.bounds]
        if len(self.bounds) != len(self.params) or not self.bounds:
            raise ValueError("need one parameter set per bin")
        if any(b2 <= b1 for b1, b2 in zip(self.bounds, self.bounds[1:])):
            raise ValueError("bin bounds must be strictly increasing")
        if self.bounds[-1] != math.inf:
            raise ValueError("the final bin bound must be +inf")

    def bin_index(self, current) -> np.ndarray:
        return np.searchsorted(self.bounds, np.abs(np.asarray(current, dtype=float)),
                               side="right")

    def select(self, i: float) -> FilterStateParams:
        return self.params[int(self.bin_index(i))]


def default_bin_bounds(cell: CellParams) -> list[float]:
    """|i| bins [0, 1.5C), [1.5C, 3C), [3C, inf)."""
    return [cell.c_rate(1.5), cell.c_rate(3.0), math.inf]


# ---------------------------------------------------------------------------
# RBF network

#: [previous voltage, SOC, current]
DEFAULT_RBF_LAYOUT = ("prev_voltage", "soc", "current")
#: lower bound on kernel widths, in normalised input units
SIGMA_MIN = 1e-3


def _lowpass_tau(name: str) -> float | None:
    if name.startswith("lowpass:"):
        tau = float(name.split(":", 1)[1])
        if not tau > 0:
            raise ValueError(f"bad time constant in {name!r}")
        return tau
    return None


def check_layout(layout: Sequence[str]) -> tuple[str, ...]:
    """Validate RBF input signal names.

    Known signals: ``prev_voltage`` (y[k-1], fed back from the prediction
    when simulating), ``soc``, ``current`` (i[k]), ``prev_current`` (i[k-1])
    and ``lowpass:<tau_s>``, the current through a first-order low-pass with
    time constant tau seconds (state form, so it lags i by one sample).
    """
    layout = tuple(layout)
    for name in layout:
        if name in ("prev_voltage", "soc", "current", "prev_current"):
            continue
        if _lowpass_tau(name) is None:
            raise ValueError(f"unknown RBF input signal {name!r}")
    if not layout:
        raise ValueError("empty RBF input layout")
    return layout


@dataclass
class RbfParams:
    """Gaussian RBF network.

    ``centers`` (N, d) and ``widths`` (N,) live in normalised input space:
    each raw input component is mapped affinely from
    [input_min, input_max] onto [-1, 1].  ``weights`` holds the N kernel
    weights followed by the output bias.
    """

    centers: np.ndarray
    widths: np.ndarray
    weights: np.ndarray
    input_layout: tuple[str, ...] = DEFAULT_RBF_LAYOUT
    input_min: np.ndarray | None = None
    input_max: np.ndarray | None = None

    def __post_init__(self):
        self.input_layout = check_layout(self.input_layout)
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.widths = np.asarray(self.widths, dtype=float).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n, d = self.centers.shape
        if d != len(self.input_layout):
            raise ValueError("center dimension does not match the input layout")
        if self.widths.size != n or self.weights.size != n + 1:
            raise ValueError("need N widths and N + 1 weights")
        if np.any(self.widths <= 0):
            raise ValueError("kernel widths must be positive")
        if (self.input_min is None) != (self.input_max is None):
            raise ValueError("set both input_min and input_max, or neither")
        if self.input_min is not None:
            self.input_min = np.asarray(self.input_min, dtype=float).reshape(d)
            self.input_max = np.asarray(self.input_max, dtype=float).reshape(d)

    @property
    def n_kernels(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def normalize(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.input_min is None:
            return u
        span = self.input_max - self.input_min
        span = np.where(span > 0, span, 1.0)
        return 2.0 * (u - self.input_min) / span - 1.0

    def copy(self) -> "RbfParams":
        return RbfParams(self.centers.copy(), self.widths.copy(), self.weights.copy(),
                         self.input_layout,
                         None if self.input_min is None else self.input_min.copy(),
                         None if self.input_max is None else self.input_max.copy())


def rbf_kernels(z, p: RbfParams) -> np.ndarray:
    """Kernel activations for normalised inputs ``z`` of shape (..., d)."""
    diff = np.asarray(z, dtype=float)[..., None, :] - p.centers
    return np.exp(-np.einsum("...nd,...nd->...n", diff, diff) / p.widths ** 2)


def rbf_output(u, p: RbfParams) -> float | np.ndarray:
    """Network output for raw input vector(s) ``u`` laid out per ``input_layout``."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != p.dim:
        raise ValueError(f"input has dimension {u.shape[-1]}, layout needs {p.dim}")
    phi = rbf_kernels(p.normalize(u), p)
    out = phi @ p.weights[:-1] + p.weights[-1]
    return float(out) if out.ndim == 0 else out


def rbf_inputs(layout: Sequence[str], current, soc, voltage=None,
               cell: CellParams | None = None) -> np.ndarray:
    """Assemble the raw RBF input matrix (n, d).

    ``prev_voltage`` is taken from ``voltage`` (teacher forcing); its first
    row repeats voltage[0].
    """
    current = np.asarray(current, dtype=float)
    n = current.size
    cols = []
    for name in check_layout(layout):
        if name == "soc":
            cols.append(np.asarray(soc, dtype=float))
        elif name == "current":
            cols.append(current)
        elif name == "prev_current":
            cols.append(np.concatenate([[0.0], current[:-1]]))
        elif name == "prev_voltage":
            if voltage is None:
                raise ValueError("prev_voltage input needs a voltage series")
            v = np.asarray(voltage, dtype=float)
            cols.append(np.concatenate([v[:1], v[:-1]]))
        else:
            cols.append(lowpass(current, _lowpass_tau(name),
                                (cell or CellParams()).sample_period_s))
    return np.column_stack(cols) if n else np.empty((0, len(cols)))


def lowpass(current, tau_s: float, period_s: float) -> np.ndarray:
    """z[k] = a z[k-1] + (1 - a) i[k-1], z[0] = 0, a = exp(-period/tau)."""
    from scipy.signal import lfilter

    a = math.exp(-period_s / tau_s)
    return lfilter([0.0, 1.0 - a], [1.0, -a], np.asarray(current, dtype=float))


# ---------------------------------------------------------------------------
# simulation

Model = Union[CombinedParams, FilterStateParams, ScheduledParams, RbfParams]


@dataclass
class Simulation:
    voltage: np.ndarray
    soc: np.ndarray
    states: np.ndarray | None = field(default=None, repr=False)


def simulate(model: Model, trace, cell: CellParams, soc0: float = 1.0,
             x0=None, v0: float | None = None) -> Simulation:
    """Predict terminal voltage for a current profile.

    ``trace`` is a :class:`Trace` or a bare current array.  ``x0`` overrides
    the initial filter state (default [soc0, 0, 0, 0]).  ``v0`` seeds the
    fed-back previous voltage of an RBF model; it defaults to the trace's
    first voltage sample when known, else the network bias.
    """
    if isinstance(trace, Trace):
        current = trace.current_a
        v_meas = trace.voltage_v
    else:
        current = np.asarray(trace, dtype=float)
        v_meas = None

    if isinstance(model, CombinedParams):
        soc = soc_trajectory(current, soc0, cell)
        return Simulation(combined_outputs(soc, current, model), soc)

    if isinstance(model, (FilterStateParams, ScheduledParams)):
        if x0 is None:
            x0 = (soc0, 0.0, 0.0, 0.0)
        imod = peukert_currents(current, cell)
        if isinstance(model, ScheduledParams):
            weights = np.array([p.w for p in model.params])
            gains = np.array([p.fixed_output_gain for p in model.params])
            which = model.bin_index(current)
        else:
            weights, gains = model.w[None, :], np.array([model.fixed_output_gain])
            which = np.zeros(current.size, dtype=int)
        y, states = _run_filter(weights, gains, which, imod, x0)
        return Simulation(y, states[:, 0].copy(), states)

    if isinstance(model, RbfParams):
        soc = soc_trajectory(current, soc0, cell)
        if "prev_voltage" not in model.input_layout:
            u = rbf_inputs(model.input_layout, current, soc, cell=cell)
            return Simulation(np.atleast_1d(rbf_output(u, model)), soc)
        if v0 is None:
            v0 = float(v_meas[0]) if v_meas is not None and np.isfinite(v_meas[0]) \
                else float(model.weights[-1])
        # placeholder voltage column; overwritten with the fed-back prediction
        u = rbf_inputs(model.input_layout, current, soc, np.zeros(current.size), cell)
        col = model.input_layout.index("prev_voltage")
        y = np.empty(current.size)
        prev = v0
        for k in range(current.size):
            u[k, col] = prev
            prev = y[k] = rbf_output(u[k], model)
            if not math.isfinite(prev):
                raise DomainError("RBF output is not finite", k)
        return Simulation(y, soc)

    raise TypeError(f"unsupported model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# parameter files

def _family(model: Model) -> str:
    return {CombinedParams: "combined", FilterStateParams: "filter_state",
            ScheduledParams: "scheduled", RbfParams: "rbf"}[type(model)]


def params_to_dict(model: Model) -> dict:
    if isinstance(model, CombinedParams):
        params = {k: float(getattr(model, k)) for k in
                  ("k0", "r_discharge", "r_charge", "k1", "k2", "k3", "k4")}
    elif isinstance(model, FilterStateParams):
        params = {"w": model.w.tolist(), "fixed_output_gain": float(model.fixed_output_gain)}
    elif isinstance(model, ScheduledParams):
        # JSON has no infinity; the open final bound is written as null
        params = {"bins": [
            {"upper_bound_a": None if math.isinf(b) else b,
             "params": params_to_dict(p)["params"]}
            for b, p in zip(model.bounds, model.params)]}
    elif isinstance(model, RbfParams):
        params = {
            "n_kernels": model.n_kernels,
            "centers": model.centers.tolist(),
            "widths": model.widths.tolist(),
            "weights": model.weights.tolist(),
            "input_layout": list(model.input_layout),
            "input_min": None if model.input_min is None else model.input_min.tolist(),
            "input_max": None if model.input_max is None else model.input_max.tolist(),
        }
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    return {"family": _family(model), "params": params}


def params_from_dict(doc: dict) -> Model:
    family, params = doc["family"], doc["params"]
    if family == "combined":
        return CombinedParams(**params)
    if family == "filter_state":
        return FilterStateParams(params["w"], params.get("fixed_output_gain", 10.0))
    if family == "scheduled":
        bins = params["bins"]
        return ScheduledParams(
            [math.inf if b["upper_bound_a"] is None else b["upper_bound_a"] for b in bins],
            [FilterStateParams(b["params"]["w"], b["params"].get("fixed_output_gain", 10.0))
             for b in bins])
    if family == "rbf":
        rbf = RbfParams(params["centers"], params["widths"], params["weights"],
                        tuple(params["input_layout"]), params.get("input_min"),
                        params.get("input_max"))
        if rbf.n_kernels != params.get("n_kernels", rbf.n_kernels):
            raise ValueError("n_kernels does not match the stored centers")
        return rbf
    raise ValueError(f"unknown model family {family!r}")


def save_params(model: Model, path) -> str:
    """Write a parameter file; returns the JSON text written."""
    text = json.dumps(params_to_dict(model), indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


def load_params(path) -> Model:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def relaxation_time_constant_s(p: FilterStateParams, cell: CellParams) -> float:
    """Decay time constant of the (x3, x4) current-filter pair, in seconds."""
    _, radius = p.pole_radii()
    if not 0.0 < radius < 1.0:
        raise ValueError("filter pair is not strictly stable")
    return -cell.sample_period_s / math.log(radius)
