import json
import os

import numpy as np
import pandas as pd
import pytest

from finsler_lab.errors import ConvergenceError, StabilityError
from finsler_lab.geodesics import GeodesicPath
from finsler_lab.harness import MarginReport
from finsler_lab.models import CheckName, CheckStatus, RunReport, Scenario
from finsler_lab.reports import (
    load_summary,
    margin_vs_t,
    ray_profile,
    resummarize,
    write_check,
    write_counterexample,
    write_diagnostics,
    write_metrics,
    write_paths,
    write_summary,
)

SCENARIO = {
    "name": "unit",
    "metric": {"family": "euclidean", "dim": 2},
    "grid": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "points": [3, 3]},
    "solve": {"dt": 0.1, "final_time": 1.0},
    "ball": {"center": [0.0, 0.0], "radius": 0.5},
    "estimate": {"A": 1.0},
    "checks": ["liyau", "harnack"],
}


def _grid_records(margin_shift=0.0):
    """Margins on a 3x3 grid at t = 0.5 and t = 1.0."""
    x1, x2 = np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], indexing="ij")
    frames = []
    for t in (0.5, 1.0):
        rhs = np.full(9, 2.0)
        lhs = t * (x1.ravel() ** 2 + x2.ravel() ** 2)
        frames.append(
            pd.DataFrame(
                {
                    "x1": x1.ravel(),
                    "x2": x2.ravel(),
                    "t": t,
                    "lhs": lhs,
                    "rhs": rhs,
                    "margin": rhs - lhs + margin_shift,
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def _run_report(checks):
    return RunReport(
        scenario=Scenario.model_validate(SCENARIO),
        checks={c.name.value: c for c in checks},
        version="0.1.0",
        timings={"solve": 1.0},
    )


def test_margin_vs_t_takes_the_smallest_margin_per_time():
    # Call
    table = margin_vs_t(_grid_records())

    # Assert
    assert list(table["t"]) == [0.5, 1.0]
    assert list(table["min_margin"]) == [1.0, 0.0]
    assert list(table["points"]) == [9, 9]


def test_margin_vs_t_of_empty_records():
    # Call
    table = margin_vs_t(pd.DataFrame())

    # Assert
    assert table.empty
    assert list(table.columns) == ["t", "min_margin", "points"]


def test_ray_profile_follows_the_first_axis_through_the_center():
    # Call
    ray = ray_profile(_grid_records(), center=[0.0, 0.0])

    # Assert
    assert list(ray["x1"]) == [-1.0, 0.0, 1.0]
    assert set(ray["x2"]) == {0.0}
    assert set(ray["t"]) == {1.0}
    assert list(ray["lhs"]) == [1.0, 0.0, 1.0]


def test_write_check_and_resummarize_roundtrip(tmp_path):
    # Mock
    directory = str(tmp_path)
    report = MarginReport(CheckName.LIYAU, _grid_records(), 1e-12)
    write_check(report, directory)
    write_summary(_run_report([report.summary()]), directory)

    # Call
    checks = resummarize(directory)

    # Assert
    assert checks["liyau"].status == CheckStatus.PASSED
    assert checks["liyau"].min_margin == pytest.approx(0.0)
    assert checks["liyau"].argmin == {"x1": -1.0, "x2": -1.0, "t": 1.0}


def test_resummarize_picks_up_edited_records(tmp_path):
    # Mock
    directory = str(tmp_path)
    report = MarginReport(CheckName.LIYAU, _grid_records(), 1e-12)
    write_check(report, directory)
    write_summary(_run_report([report.summary()]), directory)
    _grid_records(margin_shift=-0.5).to_csv(
        os.path.join(directory, "checks", "liyau.csv"), index=False
    )

    # Call
    checks = resummarize(directory)

    # Assert
    assert checks["liyau"].status == CheckStatus.FAILED
    assert checks["liyau"].min_margin == pytest.approx(-0.5)


def test_resummarize_keeps_statuses_decided_outside_the_margins(tmp_path):
    # Mock
    directory = str(tmp_path)
    report = MarginReport(
        CheckName.LIYAU,
        _grid_records(),
        1e-12,
        forced_status=CheckStatus.HYPOTHESES_NOT_MET,
    )
    write_check(report, directory)
    write_summary(_run_report([report.summary()]), directory)

    # Call
    checks = resummarize(directory)

    # Assert
    assert checks["liyau"].status == CheckStatus.HYPOTHESES_NOT_MET


def test_summary_excludes_timings(tmp_path):
    # Mock
    directory = str(tmp_path)

    # Call
    path = write_summary(_run_report([]), directory)

    # Assert
    with open(path) as fh:
        doc = json.load(fh)
    assert "timings" not in doc
    assert load_summary(directory).scenario.name == "unit"


def test_counterexample_bundle(tmp_path):
    # Mock
    directory = str(tmp_path)
    report = MarginReport(CheckName.LIYAU, _grid_records(margin_shift=-1.0), 1e-12)

    # Call
    bundle = write_counterexample(
        report, Scenario.model_validate(SCENARIO), None, directory, rows=3
    )

    # Assert
    assert sorted(os.listdir(bundle)) == [
        "params.json",
        "records.csv",
        "scenario.json",
        "summary.json",
    ]
    records = pd.read_csv(os.path.join(bundle, "records.csv"))
    assert len(records) == 3
    assert records["margin"].iloc[0] == pytest.approx(-1.0)


@pytest.mark.parametrize(
    "error, key, expected",
    [
        (StabilityError("dt too large", ratio=3.5), "ratio", 3.5),
        (StabilityError("non-finite values", ratio=np.inf), "ratio", None),
        (ConvergenceError("stalled", 0.25), "residual", 0.25),
    ],
)
def test_write_diagnostics(tmp_path, error, key, expected):
    # Call
    path = write_diagnostics(str(tmp_path), error, {"stage": "solve"})

    # Assert
    with open(path) as fh:
        doc = json.load(fh)
    assert doc["error"] == type(error).__name__
    assert doc["stage"] == "solve"
    assert doc[key] == expected


def test_write_metrics_exposes_the_registry(tmp_path):
    # Call
    path = write_metrics(str(tmp_path))

    # Assert
    with open(path) as fh:
        text = fh.read()
    assert "finsler_lab_active_runs" in text
    assert "finsler_lab_checks_total" in text


def test_write_paths(tmp_path):
    # Mock
    s = np.linspace(0.0, 1.0, 3)
    path = GeodesicPath(s, np.stack([s, 0 * s], axis=1), np.tile([1.0, 0.0], (3, 1)))

    # Call
    written = write_paths({"ray+e1": path}, str(tmp_path))

    # Assert
    frame = pd.read_csv(written[0])
    assert list(frame.columns[:3]) == ["s", "x1", "x2"]
    assert list(frame["x1"]) == [0.0, 0.5, 1.0]
