"""CSV writers and figure renderers."""

import csv

import numpy as np
import pytest

from camalign.evaluation import SweepCurve
from camalign.reporting import (render_decomposition, render_histograms,
                                render_sweep, write_histogram_csv,
                                write_sweep_csv)
from camalign.training import SimStats


@pytest.fixture
def curve():
    return SweepCurve(
        thresholds=[0.0, 0.5, 1.0],
        accuracy_per_iou={0.5: [1.0, 0.5, 0.0], 0.3: [1.0, 1.0, 0.25]})


def test_sweep_csv_round_trips_values(curve, tmp_path):
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, curve)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["tau", "acc@0.3", "acc@0.5"]   # deltas ascending
    got = np.array(rows[1:], dtype=float)
    np.testing.assert_allclose(got[:, 0], curve.thresholds)
    np.testing.assert_allclose(got[:, 1], curve.accuracy_per_iou[0.3])
    np.testing.assert_allclose(got[:, 2], curve.accuracy_per_iou[0.5])


def test_histogram_csv_layout(tmp_path):
    path = tmp_path / "hist.csv"
    write_histogram_csv(path, edges=[0.0, 0.5, 1.0], counts=[3, 7])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["bin_low", "bin_high", "count"],
                    ["0", "0.5", "3"], ["0.5", "1", "7"]]


def test_renderers_produce_png(curve, tmp_path):
    stats = SimStats(
        mean_inmask_sim=0.2, inbox_sim_mass_above_half=0.4,
        hist_sim_counts=[1, 2, 3], hist_sim_edges=[-1.0, -0.5, 0.0, 0.5],
        hist_norm_counts=[4, 5, 6], hist_norm_edges=[0.0, 0.25, 0.5, 0.75])
    targets = {
        "sweep.png": lambda p: render_sweep(p, curve),
        "hist.png": lambda p: render_histograms(p, stats),
        "dec.png": lambda p: render_decomposition(
            p, {"cam": np.eye(4), "sim": np.zeros((4, 4))}),
        "one.png": lambda p: render_decomposition(p, {"cam": np.eye(4)}),
    }
    for name, render in targets.items():
        path = tmp_path / name
        render(str(path))
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n", name
