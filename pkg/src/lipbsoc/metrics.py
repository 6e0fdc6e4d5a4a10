"""Prediction-error metrics and rest-interval analysis."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import CellParams


def rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x ** 2))) if x.size else float("nan")


def rest_intervals(current, min_len: int = 2) -> list[tuple[int, int]]:
    """[start, stop) index ranges where the current is exactly zero."""
    zero = np.concatenate([[False], np.asarray(current) == 0.0, [False]])
    edges = np.flatnonzero(np.diff(zero.astype(int)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2]) if b - a >= min_len]


def envelope_decays(v, n_windows: int = 5, slack: float = 1e-9) -> bool:
    """True when the peak distance from the final value shrinks window by window."""
    dev = np.abs(np.asarray(v, dtype=float) - v[-1])
    peaks = [w.max() for w in np.array_split(dev, n_windows) if w.size]
    return all(b <= a + slack for a, b in zip(peaks, peaks[1:]))


def segment_labels(current, cell: CellParams) -> np.ndarray:
    """Label each sample by current level: rest, or the |i| bin in C-rate."""
    i = np.abs(np.asarray(current, dtype=float))
    c = cell.nominal_capacity_ah
    labels = np.full(i.size, "rest", dtype=object)
    labels[(i > 0) & (i < 1.5 * c)] = "lt_1.5C"
    labels[(i >= 1.5 * c) & (i < 3 * c)] = "1.5C_3C"
    labels[i >= 3 * c] = "ge_3C"
    return labels


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class MetricsReport:
    rms_mv: float
    max_abs_mv: float
    segment_rms_mv: dict = field(default_factory=dict)
    n_samples: int = 0
    family: str = ""
    params_sha256: str = ""
    config_sha256: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_report(residual_v, current, cell: CellParams, family: str = "",
                   params_sha256: str = "") -> MetricsReport:
    r = np.asarray(residual_v, dtype=float)
    ok = np.isfinite(r)
    labels = segment_labels(current, cell)
    seg = {lab: rms(r[ok & (labels == lab)]) * 1e3
           for lab in ("rest", "lt_1.5C", "1.5C_3C", "ge_3C") if np.any(ok & (labels == lab))}
    return MetricsReport(rms(r[ok]) * 1e3, float(np.max(np.abs(r[ok]))) * 1e3 if ok.any() else 0.0,
                         seg, int(ok.sum()), family, params_sha256)
