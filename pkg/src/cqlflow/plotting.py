"""CSV + standalone SVG line charts of RunLog metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .runlog import ORACLE_FIELDS, RunLog

COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 160, "top": 30, "bottom": 45}


@dataclass
class PlotSpec:
    series: list  # (run_id, metric) pairs
    x_label: str = "gradient step"
    y_label: str = ""
    markers: list = field(default_factory=list)  # (step, label) vertical lines
    title: str = ""
    allow_oracle: bool = False


def _column(log: RunLog, metric: str, allow_oracle: bool) -> dict:
    if metric in ORACLE_FIELDS and not allow_oracle:
        raise KeyError(f"{metric} is analysis-only; set allow_oracle to plot it")
    if log.records and all(metric not in r for r in log.records):
        raise KeyError(f"metric {metric!r} not in run log")
    return {r["step"]: r.get(metric) for r in log.records}


def emit_plot(spec: PlotSpec, logs: dict, out_stem) -> tuple:
    """Write ``<out_stem>.csv`` and ``<out_stem>.svg``; returns both paths.

    ``logs`` maps run ids to RunLogs. CSV cells hold the logged values
    verbatim (same float repr as the JSON source).
    """
    if not spec.series:
        raise ValueError("empty selection")
    cols = []
    for run_id, metric in spec.series:
        if run_id not in logs:
            raise KeyError(f"unknown run {run_id!r}")
        cols.append((f"{run_id}:{metric}", _column(logs[run_id], metric, spec.allow_oracle)))
    steps = sorted({s for _, c in cols for s in c})
    stem = Path(out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [name for name, _ in cols])
        for s in steps:
            row = [s]
            for _, c in cols:
                v = c.get(s)
                row.append("" if v is None else json.dumps(v))
            w.writerow(row)
    svg_path = stem.with_suffix(".svg")
    svg_path.write_text(render_svg(spec, cols, steps))
    return csv_path, svg_path


class Axes:
    """Linear map from data coordinates to the SVG plotting area."""

    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    def x(self, v) -> float:
        return round(self.left + (v - self.x0) / (self.x1 - self.x0) * (self.right - self.left), 3)

    def y(self, v) -> float:
        return round(self.bottom - (v - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top), 3)


def render_svg(spec: PlotSpec, cols, steps) -> str:
    vals = [v for _, c in cols for v in c.values() if v is not None]
    ax = Axes((min(steps), max(steps)), (min(vals), max(vals)) if vals else (0.0, 1.0))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line x1="{ax.left}" y1="{ax.bottom}" x2="{ax.right}" y2="{ax.bottom}" stroke="black"/>',
           f'<line x1="{ax.left}" y1="{ax.top}" x2="{ax.left}" y2="{ax.bottom}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        xv = ax.x0 + frac * (ax.x1 - ax.x0)
        yv = ax.y0 + frac * (ax.y1 - ax.y0)
        out.append(f'<text x="{ax.x(xv)}" y="{ax.bottom + 15}" font-size="10" text-anchor="middle">{xv:g}</text>')
        out.append(f'<text x="{ax.left - 5}" y="{ax.y(yv)}" font-size="10" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{(ax.left + ax.right) / 2}" y="{HEIGHT - 8}" font-size="12" '
               f'text-anchor="middle">{escape(spec.x_label)}</text>')
    if spec.y_label:
        out.append(f'<text x="14" y="{(ax.top + ax.bottom) / 2}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 14 {(ax.top + ax.bottom) / 2})">{escape(spec.y_label)}</text>')
    if spec.title:
        out.append(f'<text x="{(ax.left + ax.right) / 2}" y="18" font-size="13" '
                   f'text-anchor="middle">{escape(spec.title)}</text>')
    for i, (name, c) in enumerate(cols):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{ax.x(s)},{ax.y(v)}" for s, v in sorted(c.items()) if v is not None)
        out.append(f'<polyline class="series" data-name="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{pts}"/>')
        ly = ax.top + 14 * i + 5
        out.append(f'<line x1="{ax.right + 10}" y1="{ly}" x2="{ax.right + 30}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{ax.right + 35}" y="{ly + 4}" font-size="10">{escape(name)}</text>')
    for step, label in spec.markers:
        x = ax.x(step)
        out.append(f'<line class="marker" data-step="{step}" x1="{x}" y1="{ax.top}" x2="{x}" '
                   f'y2="{ax.bottom}" stroke="gray" stroke-dasharray="4 3"/>')
        out.append(f'<text x="{x + 3}" y="{ax.top + 10}" font-size="10">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
