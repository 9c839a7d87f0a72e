"""Experiment reports: schema-versioned JSON, CSV tables and minimal SVG figures."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from ..trace import ProjectionSeries

REPORT_SCHEMA = "pvl-report/1"
FIXED_CLOCK_ENV = "PVL_FIXED_CLOCK"
FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"


def timestamp() -> str:
    if os.environ.get(FIXED_CLOCK_ENV) == "1":
        return FIXED_TIMESTAMP
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _clean(value):
    """JSON-safe scalars: non-finite floats become strings."""
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return _clean(value.item())
    return value


@dataclass
class Table:
    header: list
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
        return buf.getvalue()


@dataclass
class ExperimentReport:
    experiment_id: str
    config: dict
    metrics: dict
    thresholds: dict
    passed: bool
    observations: dict = field(default_factory=dict)  # non-scalar or textual findings
    series: dict = field(default_factory=dict)  # name -> ProjectionSeries
    tables: dict = field(default_factory=dict)  # name -> Table
    figures: dict = field(default_factory=dict)  # name -> SVG text
    artifacts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "experiment_id": self.experiment_id,
            "created": timestamp(),
            "config": _clean(self.config),
            "thresholds": _clean(self.thresholds),
            "metrics": _clean(self.metrics),
            "observations": _clean(self.observations),
            "pass": bool(self.passed),
            "artifacts": list(self.artifacts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, out_dir) -> Path:
        """Write CSV/SVG artifacts, then the JSON report that lists them."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for name, s in sorted(self.series.items()):
            names.append((f"{self.experiment_id}-{name}.csv", s.to_csv()))
        for name, t in sorted(self.tables.items()):
            names.append((f"{self.experiment_id}-{name}.csv", t.to_csv()))
        for name, svg in sorted(self.figures.items()):
            names.append((f"{self.experiment_id}-{name}.svg", svg))
        for fname, text in names:
            (out / fname).write_text(text)
        self.artifacts = [fname for fname, _ in names]
        path = out / f"{self.experiment_id}.json"
        path.write_text(self.to_json())
        return path


def series_table(series: dict[str, ProjectionSeries]) -> Table:
    rows = []
    for name, s in sorted(series.items()):
        for p in s.points:
            rows.append([name, p.turn, p.role.label, p.mean_projection])
    return Table(["series", "turn", "role", "mean_projection"], rows)


# --- SVG ----------------------------------------------------------------------

_W, _H = 640, 400
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 60, 150, 30, 45
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


class _Frame:
    def __init__(self, xs, ys):
        xs = [x for x in xs if math.isfinite(x)] or [0.0]
        ys = [y for y in ys if math.isfinite(y)] or [0.0]
        self.x0, self.x1 = min(xs), max(xs)
        self.y0, self.y1 = min(ys), max(ys)
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y1 + 1

    def px(self, x: float) -> float:
        return _PAD_L + (x - self.x0) / (self.x1 - self.x0) * (_W - _PAD_L - _PAD_R)

    def py(self, y: float) -> float:
        return _H - _PAD_B - (y - self.y0) / (self.y1 - self.y0) * (_H - _PAD_T - _PAD_B)

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [
            f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
            f'<line x1="{_PAD_L}" y1="{_H - _PAD_B}" x2="{_W - _PAD_R}" y2="{_H - _PAD_B}" stroke="black"/>',
            f'<line x1="{_PAD_L}" y1="{_PAD_T}" x2="{_PAD_L}" y2="{_H - _PAD_B}" stroke="black"/>',
            f'<text x="{(_PAD_L + _W - _PAD_R) / 2:.1f}" y="{_H - 8}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
            f'<text x="14" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {_H / 2:.1f})">{_esc(ylabel)}</text>',
        ]
        for x in _ticks(self.x0, self.x1):
            px = self.px(x)
            out.append(f'<line x1="{px:.1f}" y1="{_H - _PAD_B}" x2="{px:.1f}" y2="{_H - _PAD_B + 4}" stroke="black"/>')
            out.append(f'<text x="{px:.1f}" y="{_H - _PAD_B + 16}" text-anchor="middle" font-size="10">{x:.3g}</text>')
        for y in _ticks(self.y0, self.y1):
            py = self.py(y)
            out.append(f'<line x1="{_PAD_L - 4}" y1="{py:.1f}" x2="{_PAD_L}" y2="{py:.1f}" stroke="black"/>')
            out.append(f'<text x="{_PAD_L - 6}" y="{py + 3:.1f}" text-anchor="end" font-size="10">{y:.3g}</text>')
        return out


def _wrap(body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_W} {_H}" width="{_W}" height="{_H}">'
    return "\n".join([head, *body, "</svg>"]) + "\n"


def line_chart(lines: dict, title: str = "", xlabel: str = "x", ylabel: str = "y", hlines=()) -> str:
    """One polyline per named series of ``(xs, ys)``; optional horizontal reference lines."""
    xs = [x for pts in lines.values() for x in pts[0]]
    ys = [y for pts in lines.values() for y in pts[1]] + [float(h) for h in hlines]
    f = _Frame(xs, ys)
    body = f.axes(title, xlabel, ylabel)
    for h in hlines:
        py = f.py(float(h))
        body.append(f'<line x1="{_PAD_L}" y1="{py:.1f}" x2="{_W - _PAD_R}" y2="{py:.1f}" stroke="gray" stroke-dasharray="4 3"/>')
    for i, (name, (lx, ly)) in enumerate(lines.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{f.px(x):.1f},{f.py(y):.1f}" for x, y in zip(lx, ly))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly_ = _PAD_T + 16 * i + 8
        body.append(f'<line x1="{_W - _PAD_R + 10}" y1="{ly_}" x2="{_W - _PAD_R + 28}" y2="{ly_}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{_W - _PAD_R + 32}" y="{ly_ + 4}" font-size="10">{_esc(name)}</text>')
    return _wrap(body)


def scatter_chart(labels, xs, ys, title: str = "", xlabel: str = "x", ylabel: str = "y", groups=None) -> str:
    """Labelled points; ``groups`` (same length) picks a color per point."""
    f = _Frame(xs, ys)
    body = f.axes(title, xlabel, ylabel)
    groups = list(groups) if groups is not None else [0] * len(labels)
    keys = sorted(set(groups), key=str)
    for lab, x, y, g in zip(labels, xs, ys, groups):
        color = _COLORS[keys.index(g) % len(_COLORS)]
        body.append(f'<circle cx="{f.px(x):.1f}" cy="{f.py(y):.1f}" r="4" fill="{color}"/>')
        body.append(f'<text x="{f.px(x) + 5:.1f}" y="{f.py(y) - 5:.1f}" font-size="8">{_esc(lab)}</text>')
    return _wrap(body)


def series_chart(series: dict[str, ProjectionSeries], title: str, hlines=()) -> str:
    lines = {name: ([p.turn for p in s.points], [p.mean_projection for p in s.points]) for name, s in series.items()}
    return line_chart(lines, title, "turn", "projection", hlines)
