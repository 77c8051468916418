"""Files written by a scenario run.

Layout under the output directory::

    summary.json                  run report (timings excluded)
    checks/<name>.csv             per-point margin records
    counterexamples/<name>/       failing records, resolved parameters, scenario echo
    plots/<name>_margin_vs_t.csv  smallest margin per time
    plots/<name>_ray.csv          lhs/rhs along the first axis through the ball centre
    fields/                       solution snapshots and manifest
    paths/                        geodesic polylines
    metrics.prom                  prometheus text exposition
    diagnostics.json              written on numeric aborts only
"""

import json
import logging
import os
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
from prometheus_client import write_to_textfile

from .geodesics import GeodesicPath
from .harness import MarginReport
from .metrics import REGISTRY
from .models import CheckStatus, CheckSummary, EstimateParams, RunReport, Scenario

logger = logging.getLogger(__name__)

CHECKS_DIR = "checks"
COUNTEREXAMPLES_DIR = "counterexamples"
PLOTS_DIR = "plots"
FIELDS_DIR = "fields"
PATHS_DIR = "paths"
SUMMARY_FILE = "summary.json"
DIAGNOSTICS_FILE = "diagnostics.json"
METRICS_FILE = "metrics.prom"


def _write_json(path: str, doc: Any) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_check(report: MarginReport, directory: str) -> str:
    path = os.path.join(directory, CHECKS_DIR, f"{report.name.value}.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    report.records.to_csv(path, index=False)
    return path


def write_counterexample(
    report: MarginReport,
    scenario: Scenario,
    params: Optional[EstimateParams],
    directory: str,
    rows: int,
) -> str:
    """Archive the worst failing points with everything needed to rerun them."""
    bundle = os.path.join(directory, COUNTEREXAMPLES_DIR, report.name.value)
    os.makedirs(bundle, exist_ok=True)
    report.failures(rows).to_csv(os.path.join(bundle, "records.csv"), index=False)
    _write_json(
        os.path.join(bundle, "summary.json"), report.summary().model_dump(mode="json")
    )
    _write_json(
        os.path.join(bundle, "params.json"),
        params.model_dump(mode="json") if params is not None else None,
    )
    _write_json(os.path.join(bundle, "scenario.json"), scenario.model_dump(mode="json"))
    logger.warning(
        f"{report.name.value} failed; counterexample bundle written to {bundle}"
    )
    return bundle


def margin_vs_t(records: pd.DataFrame) -> pd.DataFrame:
    if records.empty or "t" not in records:
        return pd.DataFrame(columns=["t", "min_margin", "points"])
    grouped = records.groupby("t")["margin"]
    return pd.DataFrame(
        {"min_margin": grouped.min(), "points": grouped.size()}
    ).reset_index()


def ray_profile(
    records: pd.DataFrame, center: Sequence[float], axis: int = 0
) -> pd.DataFrame:
    """Last-time rows on the coordinate line through ``center`` along ``axis``."""
    cols = [f"x{i + 1}" for i in range(len(center))]
    if records.empty or not all(c in records for c in cols):
        return pd.DataFrame(columns=[*cols, "t", "lhs", "rhs", "margin"])
    last = records[records["t"] == records["t"].max()]
    keep = np.ones(len(last), dtype=bool)
    for i, c in enumerate(cols):
        if i == axis:
            continue
        values = last[c].to_numpy()
        # nearest grid line to the centre
        nearest = (
            values[np.argmin(np.abs(values - center[i]))] if len(values) else center[i]
        )
        keep &= np.isclose(values, nearest)
    out = last[keep].sort_values(cols[axis])
    return out[[*cols, "t", "lhs", "rhs", "margin"]].reset_index(drop=True)


def write_plots(
    report: MarginReport, center: Sequence[float], directory: str
) -> list[str]:
    base = os.path.join(directory, PLOTS_DIR)
    os.makedirs(base, exist_ok=True)
    name = report.name.value
    margin_path = os.path.join(base, f"{name}_margin_vs_t.csv")
    margin_vs_t(report.records).to_csv(margin_path, index=False)
    ray_path = os.path.join(base, f"{name}_ray.csv")
    ray_profile(report.records, center).to_csv(ray_path, index=False)
    return [margin_path, ray_path]


def write_paths(paths: dict[str, GeodesicPath], directory: str) -> list[str]:
    base = os.path.join(directory, PATHS_DIR)
    os.makedirs(base, exist_ok=True)
    written = []
    for name, path in sorted(paths.items()):
        target = os.path.join(base, f"{name}.csv")
        path.to_frame().to_csv(target, index=False)
        written.append(target)
    return written


def write_summary(report: RunReport, directory: str) -> str:
    path = os.path.join(directory, SUMMARY_FILE)
    _write_json(path, report.model_dump(mode="json"))
    return path


def write_diagnostics(
    directory: str, error: BaseException, context: dict[str, Any]
) -> str:
    path = os.path.join(directory, DIAGNOSTICS_FILE)
    doc = {"error": type(error).__name__, "message": str(error), **context}
    for key in ("ratio", "residual", "value"):
        if hasattr(error, key):
            value = getattr(error, key)
            doc[key] = None if value is None or not np.isfinite(value) else float(value)
    _write_json(path, doc)
    return path


def write_metrics(directory: str) -> str:
    path = os.path.join(directory, METRICS_FILE)
    write_to_textfile(path, REGISTRY)
    return path


def load_summary(directory: str) -> RunReport:
    with open(os.path.join(directory, SUMMARY_FILE)) as fh:
        return RunReport.model_validate(json.load(fh))


def resummarize(directory: str) -> dict[str, CheckSummary]:
    """Recompute each check summary from its CSV records.

    Statuses decided outside the margins (hypotheses, applicability,
    expected failures) are carried over from the stored summary.
    """
    stored = load_summary(directory)
    out: dict[str, CheckSummary] = {}
    for name, summary in stored.checks.items():
        path = os.path.join(directory, CHECKS_DIR, f"{name}.csv")
        if not os.path.exists(path):
            out[name] = summary
            continue
        records = pd.read_csv(path)
        report = MarginReport(
            summary.name,
            records,
            summary.tol,
            summary.exclusions,
            extras=dict(summary.extras),
        )
        fresh = report.summary()
        if summary.status not in (CheckStatus.PASSED, CheckStatus.FAILED):
            fresh = fresh.model_copy(update={"status": summary.status})
        out[name] = fresh
    return out
