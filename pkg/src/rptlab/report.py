"""Experiment reports and the files they are written to.

Every report echoes its config next to per-record data; aggregates are
whatever :func:`recompute` rebuilds from those records alone.  Files are written
atomically (temp file then rename).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._version import __version__
from .errors import ReportValidationError

SCHEMA_VERSION = 1
HIST_BINS = 50
FORMATS = ("csv", "json", "svg", "png")

SYNTHETIC_COLUMNS = ["base_noise", "ratio", "trial", "ntp_tv", "rpt_tv", "ntp_max", "rpt_max", "kappa", "rpt_factor"]


@dataclass
class ExperimentReport:
    command: str
    config: dict
    columns: list
    records: list
    aggregates: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return clean(
            {
                "command": self.command,
                "config": self.config,
                "version": self.version,
                "schema_version": self.schema_version,
                "columns": self.columns,
                "records": self.records,
                "aggregates": self.aggregates,
                "histograms": self.histograms,
                "failures": self.failures,
                "summary": self.summary,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, data) -> "ExperimentReport":
        return cls(
            command=data["command"],
            config=data["config"],
            columns=data["columns"],
            records=data["records"],
            aggregates=data.get("aggregates", []),
            histograms=data.get("histograms", []),
            failures=data.get("failures", []),
            summary=data.get("summary", {}),
            version=data.get("version", __version__),
            schema_version=data.get("schema_version", SCHEMA_VERSION),
        )


def clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _num(x):
    return math.nan if x is None else float(x)


def mean_se(values):
    v = np.array([_num(x) for x in values], dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def histogram(values, bins=HIST_BINS, lo=0.0, hi=None):
    v = np.array([_num(x) for x in values], dtype=float)
    v = v[np.isfinite(v)]
    if hi is None:
        hi = float(v.max()) if v.size else 1.0
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges.tolist(), counts.tolist()


def _cells(records, keys):
    cells = {}
    for r in records:
        cells.setdefault(tuple(r[k] for k in keys), []).append(r)
    return cells


def synthetic_aggregates(records):
    aggregates, histograms = [], []
    for (bn, ratio), rows in _cells(records, ("base_noise", "ratio")).items():
        agg = {"base_noise": bn, "ratio": ratio, "n": len(rows)}
        for col in SYNTHETIC_COLUMNS[3:]:
            agg[f"{col}_mean"], agg[f"{col}_se"] = mean_se(r[col] for r in rows)
        ntp, rpt = agg["ntp_tv_mean"], agg["rpt_tv_mean"]
        agg["relative_improvement"] = 1.0 - rpt / ntp if ntp > 0 else math.nan
        aggregates.append(agg)
        for metric in ("tv", "max"):
            both = [_num(r[f"{m}_{metric}"]) for r in rows for m in ("ntp", "rpt")]
            hi = max(both) if both else 1.0
            for method in ("ntp", "rpt"):
                edges, counts = histogram([r[f"{method}_{metric}"] for r in rows], hi=hi)
                histograms.append(
                    {"base_noise": bn, "ratio": ratio, "metric": metric, "method": method, "edges": edges, "counts": counts}
                )
    return aggregates, histograms


def trace_aggregates(records):
    """Mean loss per head over the last tenth of training."""
    if not records:
        return [], []
    steps = sorted(r["step"] for r in records)
    cut = steps[int(0.9 * (len(steps) - 1))]
    tail = [r for r in records if r["step"] >= cut]
    agg = {"from_step": cut, "n": len(tail)}
    for col in records[0]:
        if col.endswith("_loss"):
            agg[f"{col}_tail_mean"], agg[f"{col}_tail_se"] = mean_se(r[col] for r in tail)
    return [agg], []


def improvement_aggregates(records, tol=1e-10):
    diffs = np.array([_num(r["diff"]) for r in records], dtype=float)
    improved = int((diffs > tol).sum())
    worsened = int((diffs < -tol).sum())
    total = int(diffs.size)
    decided = improved + worsened
    agg = {
        "total": total,
        "improved": improved,
        "worsened": worsened,
        "ties": total - decided,
        "fraction": improved / total if total else math.nan,
        "fraction_excluding_ties": improved / decided if decided else math.nan,
        "degenerate": decided == 0,
    }
    lim = float(np.abs(diffs).max()) if total else 0.0
    lim = lim if lim > 0 else 1.0
    counts, edges = np.histogram(diffs, bins=HIST_BINS, range=(-lim, lim))
    hist = {"metric": "diff", "method": "rpt_minus_ntp", "edges": edges.tolist(), "counts": counts.tolist()}
    return [agg], [hist]


AGGREGATORS = {
    "synthetic": synthetic_aggregates,
    "train-toy": trace_aggregates,
    "improve-hist": improvement_aggregates,
}


def recompute(report: ExperimentReport):
    fn = AGGREGATORS.get(report.command)
    if fn is None:
        return [], []
    if not report.records:
        return [], []
    return fn(report.records)


def finalize(report: ExperimentReport) -> ExperimentReport:
    report.aggregates, report.histograms = recompute(report)
    return report


def _same(a, b) -> bool:
    a, b = clean(a), clean(b)
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return a is b
        return math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-15)
    return a == b


def validate_report(report: ExperimentReport):
    if report.aggregates and not report.records:
        raise ReportValidationError("aggregates present but there are no records to recompute them from")
    aggregates, histograms = recompute(report)
    if not _same(aggregates, report.aggregates):
        raise ReportValidationError("aggregates do not match the records")
    if not _same(histograms, report.histograms):
        raise ReportValidationError("histograms do not match the records")
    for r in report.records:
        missing = [c for c in report.columns if c not in r]
        if missing:
            raise ReportValidationError(f"record lacks columns {missing}")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_synthetic_report(configs, records, failures, command="synthetic") -> ExperimentReport:
    from dataclasses import asdict

    rows = [{c: r[c] for c in SYNTHETIC_COLUMNS} for r in records]
    rep = ExperimentReport(
        command=command,
        config={"cells": [asdict(c) for c in configs]},
        columns=list(SYNTHETIC_COLUMNS),
        records=rows,
        failures=list(failures),
    )
    return finalize(rep)


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------


def _fmt(x):
    x = clean(x)
    if x is None:
        return "nan"
    if isinstance(x, float):
        return repr(x)
    if isinstance(x, list):
        return " ".join(str(v) for v in x)
    return str(x)


def to_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report.columns)
    for r in report.records:
        writer.writerow([_fmt(r.get(c)) for c in report.columns])
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _svg_panel(out, x0, y0, w, h, title, series, colors):
    """One histogram panel; ``series`` is a list of ``(label, edges, counts)``."""
    pad_l, pad_b, pad_t = 34, 22, 16
    pw, ph = w - pad_l - 6, h - pad_b - pad_t
    ox, oy = x0 + pad_l, y0 + pad_t + ph
    top = max((max(c) for _, _, c in series if c), default=0) or 1
    lo = min(e[0] for _, e, _ in series)
    hi = max(e[-1] for _, e, _ in series)
    span = (hi - lo) or 1.0
    out.append(f'<g class="panel" data-top="{top}">')
    out.append(f'<text x="{x0 + w / 2:.1f}" y="{y0 + 11}" font-size="10" text-anchor="middle">{title}</text>')
    out.append(f'<line x1="{ox}" y1="{oy}" x2="{ox + pw}" y2="{oy}" stroke="black"/>')
    out.append(f'<line x1="{ox}" y1="{oy}" x2="{ox}" y2="{oy - ph}" stroke="black"/>')
    out.append(f'<text x="{ox - 3}" y="{oy - ph + 4}" font-size="8" text-anchor="end">{top}</text>')
    out.append(f'<text x="{ox}" y="{oy + 10}" font-size="8" text-anchor="middle">{lo:.3g}</text>')
    out.append(f'<text x="{ox + pw}" y="{oy + 10}" font-size="8" text-anchor="middle">{hi:.3g}</text>')
    for (label, edges, counts), color in zip(series, colors):
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            if c == 0:
                continue
            bx = ox + (left - lo) / span * pw
            bw = max((right - left) / span * pw, 0.5)
            bh = c / top * ph
            out.append(
                f'<rect class="bar" data-series="{label}" data-count="{c}" x="{bx:.3f}" y="{oy - bh:.3f}" '
                f'width="{bw:.3f}" height="{bh:.3f}" fill="{color}" fill-opacity="0.55"/>'
            )
    for i, ((label, _, _), color) in enumerate(zip(series, colors)):
        ly = y0 + pad_t + 4 + 10 * i
        out.append(f'<rect x="{ox + pw - 40}" y="{ly}" width="8" height="8" fill="{color}"/>')
        out.append(f'<text x="{ox + pw - 29}" y="{ly + 7}" font-size="8">{label}</text>')
    out.append("</g>")


def svg_document(panels, cols, panel_w=240, panel_h=160, title="") -> str:
    """Grid of histogram panels; ``panels`` holds ``(title, series)`` pairs in row-major order."""
    rows = math.ceil(len(panels) / cols) if panels else 1
    width, height = cols * panel_w, rows * panel_h + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="14" font-size="12" text-anchor="middle">{title}</text>',
    ]
    colors = ["#1f77b4", "#d62728", "#2ca02c"]
    for i, (ptitle, series) in enumerate(panels):
        r, c = divmod(i, cols)
        _svg_panel(out, c * panel_w, 20 + r * panel_h, panel_w, panel_h, ptitle, series, colors)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_files(report: ExperimentReport) -> dict:
    """File name to SVG text.  Synthetic reports get one grid per base noise."""
    if report.command == "synthetic":
        out = {}
        noises = sorted({h["base_noise"] for h in report.histograms})
        for bn in noises:
            hs = [h for h in report.histograms if h["base_noise"] == bn]
            ratios = sorted({h["ratio"] for h in hs})
            panels = []
            for metric in ("max", "tv"):
                for ratio in ratios:
                    series = [
                        (h["method"].upper(), h["edges"], h["counts"])
                        for h in hs
                        if h["ratio"] == ratio and h["metric"] == metric
                    ]
                    panels.append((f"{metric} error, ratio {ratio:g}", series))
            out[f"synthetic_hist_noise{bn:g}.svg"] = svg_document(
                panels, len(ratios), title=f"base noise {bn:g}"
            )
        return out
    if report.histograms:
        panels = [(h.get("metric", ""), [(h.get("method", ""), h["edges"], h["counts"])]) for h in report.histograms]
        return {f"{report.command}_hist.svg": svg_document(panels, min(3, len(panels)), title=report.command)}
    return {}


def emit_report(report: ExperimentReport, formats, out_dir) -> list:
    """Validate ``report`` and write the requested formats; returns written paths."""
    formats = list(dict.fromkeys(formats))
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ReportValidationError(f"unknown formats {unknown}")
    validate_report(report)
    out_dir = Path(out_dir)
    written = []
    if "csv" in formats:
        p = out_dir / f"{report.command}.csv"
        atomic_write_text(p, to_csv(report))
        written.append(p)
    if "json" in formats:
        p = out_dir / f"{report.command}.json"
        atomic_write_text(p, report.to_json())
        written.append(p)
    if "svg" in formats:
        for name, text in svg_files(report).items():
            p = out_dir / name
            atomic_write_text(p, text)
            written.append(p)
    if "png" in formats:
        from .figures import render_figures

        written.extend(render_figures(report, out_dir))
    return written
