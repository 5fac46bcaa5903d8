"""Deterministic report files: summary.json, curve.csv, runs.csv, config.echo, report.txt."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .config import emit_config
from .runner import ExperimentReport

FORMATS = ("json", "csv", "human")


class ReportError(RuntimeError):
    pass


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def summary_json(report: ExperimentReport) -> str:
    body = {"kind": report.kind, "summary": _clean(report.summary), "warnings": list(report.warnings)}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def _csv(header: Iterable[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def human_table(report: ExperimentReport) -> str:
    lines = [f"experiment: {report.kind}", ""]
    flat = _flatten(_clean(report.summary))
    width = max((len(k) for k in flat), default=0)
    for k in sorted(flat):
        lines.append(f"{k.ljust(width)}  {flat[k]}")
    for w in report.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def emit_report(
    report: ExperimentReport, out_dir: Union[str, Path], formats: Iterable[str] = FORMATS
) -> list[Path]:
    """Write the report's files; contents depend only on the report."""
    formats = tuple(formats)
    for f in formats:
        if f not in FORMATS:
            raise ValueError(f"unknown format {f!r}")
    if report.kind != "chung" and report.kind != "apt" and not report.runs:
        raise ReportError("no runs")
    if report.kind == "apt" and report.summary.get("path") == "sgd" and not report.runs:
        raise ReportError("no runs")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create output directory {out}: {exc}") from exc
    files = {"config.echo": emit_config(report.config)}
    if "json" in formats:
        files["summary.json"] = summary_json(report)
    if "csv" in formats:
        if report.curve_header:
            files["curve.csv"] = _csv(report.curve_header, report.curve)
        if report.runs_header:
            files["runs.csv"] = _csv(report.runs_header, report.runs)
    if "human" in formats:
        files["report.txt"] = human_table(report)
    written = []
    for name in sorted(files):
        path = out / name
        try:
            path.write_text(files[name])
        except OSError as exc:
            raise ReportError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
