import math

import numpy as np
import pytest

from lipbsoc.core import CellParams
from lipbsoc.metrics import (envelope_decays, file_sha256, metrics_report, rest_intervals, rms,
                             segment_labels)

CELL = CellParams()


def test_rms():
    assert rms([3.0, -4.0]) == pytest.approx(math.sqrt(12.5))
    assert math.isnan(rms([]))


def test_rest_intervals():
    i = np.array([0, 0, 8, 8, 0, 0, 0, -8, 0])
    assert rest_intervals(i) == [(0, 2), (4, 7)]
    assert rest_intervals(i, min_len=1) == [(0, 2), (4, 7), (8, 9)]


def test_envelope_decays():
    t = np.arange(500)
    assert envelope_decays(np.exp(-t / 50) * np.cos(t / 5))
    assert not envelope_decays(np.sin(t / 3) * t / 500)


def test_segment_labels():
    labels = segment_labels([0.0, 8.0, -12.0, 12.0, -30.0], CELL)
    assert labels.tolist() == ["rest", "lt_1.5C", "1.5C_3C", "1.5C_3C", "ge_3C"]


def test_metrics_report_skips_missing(tmp_path):
    path = tmp_path / "p"
    path.write_bytes(b"abc")
    rep = metrics_report([1e-3, np.nan, -3e-3], [0.0, 8.0, 8.0], CELL, "combined",
                         file_sha256(path))
    assert rep.n_samples == 2
    assert rep.rms_mv == pytest.approx(math.sqrt(5.0))
    assert rep.max_abs_mv == pytest.approx(3.0)
    assert rep.segment_rms_mv == {"rest": pytest.approx(1.0), "lt_1.5C": pytest.approx(3.0)}
    assert rep.params_sha256.startswith("ba7816bf")
