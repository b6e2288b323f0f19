"""Summary tables and SVG line charts from result CSVs.

Charts are written by hand with fixed formatting so identical input gives
identical bytes.
"""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .experiments import ResultRow

__all__ = ["aggregate", "format_table", "line_chart_svg", "write_report"]

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
_W, _H = 520, 340
_L, _R, _T, _B = 70, 150, 30, 50


def aggregate(rows) -> list[dict]:
    """Seed-averaged statistics per (scenario, n, noise, observed)."""
    groups: dict[tuple, list[ResultRow]] = defaultdict(list)
    for r in rows:
        groups[(r.scenario, r.n, r.noise, r.observed)].append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], -k[3])):
        g = groups[key]
        entry = dict(zip(("scenario", "n", "noise", "observed"), key))
        for name in ("mean_et", "med_et", "mean_er", "med_er", "time_s"):
            entry[name] = float(np.mean([getattr(r, name) for r in g]))
        entry["seeds"] = len(g)
        out.append(entry)
    return out


def format_table(entries) -> str:
    header = ["scenario", "n", "noise", "observed", "mean_et", "med_et", "mean_er", "med_er",
              "time_s", "seeds"]
    body = []
    for e in entries:
        body.append([e["scenario"], str(e["n"]), f"{e['noise']:g}", f"{e['observed']:g}",
                     f"{e['mean_et']:.4g}", f"{e['med_et']:.4g}", f"{e['mean_er']:.4g}",
                     f"{e['med_er']:.4g}", f"{e['time_s']:.3f}", str(e["seeds"])])
    widths = [max(len(row[c]) for row in [header] + body) for c in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(row, widths)) for row in [header] + body]
    return "\n".join(lines) + "\n"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def line_chart_svg(series: dict[str, list[tuple[str, float]]], title: str, xlabel: str,
                   ylabel: str) -> str:
    """A categorical-x line chart.

    ``series`` maps a legend label to ``(x_label, y)`` points. The x axis lists
    the distinct x labels in first-seen order across series.
    """
    cats: list[str] = []
    for pts in series.values():
        for x, _ in pts:
            if x not in cats:
                cats.append(x)
    ys = [y for pts in series.values() for _, y in pts if np.isfinite(y)]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    lo = min(lo, 0.0)
    if hi <= lo:
        hi = lo + 1.0
    pw, ph = _W - _L - _R, _H - _T - _B

    def px(i: int) -> float:
        return _L + (pw * (i + 0.5) / len(cats) if cats else pw / 2)

    def py(y: float) -> float:
        return _T + ph * (1.0 - (y - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{_L}" y1="{_T + ph}" x2="{_L + pw}" y2="{_T + ph}" stroke="black"/>',
        f'<line x1="{_L}" y1="{_T}" x2="{_L}" y2="{_T + ph}" stroke="black"/>',
    ]
    for t in _ticks(lo, hi):
        y = py(t)
        out.append(f'<line x1="{_L - 4}" y1="{y:.1f}" x2="{_L}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{_L - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for i, c in enumerate(cats):
        x = px(i)
        out.append(f'<line x1="{x:.1f}" y1="{_T + ph}" x2="{x:.1f}" y2="{_T + ph + 4}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{_T + ph + 16}" text-anchor="middle">{escape(c)}</text>')
    out.append(f'<text x="{_L + pw / 2:.1f}" y="{_H - 10}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_T + ph / 2:.1f})">{escape(ylabel)}</text>')
    for s, (label, pts) in enumerate(series.items()):
        color = _PALETTE[s % len(_PALETTE)]
        coords = [(px(cats.index(x)), py(y)) for x, y in pts if np.isfinite(y)]
        if len(coords) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in coords)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5"/>')
        for x, y in coords:
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        ly = _T + 14 * s + 6
        out.append(f'<rect x="{_L + pw + 12}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{_L + pw + 26}" y="{ly + 1}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _sweep_key(scenario: str):
    m = scenario.split("m=", 1)[1]
    return (1, 0) if m == "full" else (0, int(m))


def write_report(rows, out_dir) -> tuple[str, list[Path]]:
    """Write the summary table and charts into ``out_dir``; return (table, chart paths)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = aggregate(rows)
    table = format_table(entries)
    (out_dir / "summary.txt").write_text(table)
    plain = [e for e in entries if not e["scenario"].startswith("subsample-sweep/")]
    sweep = [e for e in entries if e["scenario"].startswith("subsample-sweep/")]
    charts = []

    by_obs: dict[str, list] = defaultdict(list)
    for e in sorted(plain, key=lambda e: (e["scenario"], -e["observed"], e["noise"])):
        by_obs[f"{e['scenario']} {e['observed']:g}%"].append((f"{e['noise']:g}", e["mean_et"]))
    path = out_dir / "error_vs_noise.svg"
    path.write_text(line_chart_svg(dict(by_obs), "Mean location error vs noise",
                                   "noise (%)", "mean location error"))
    charts.append(path)

    by_noise: dict[str, list] = defaultdict(list)
    for e in sorted(plain, key=lambda e: (e["scenario"], e["noise"], -e["observed"])):
        by_noise[f"{e['scenario']} {e['noise']:g}%"].append((f"{e['observed']:g}", e["mean_et"]))
    path = out_dir / "error_vs_observed.svg"
    path.write_text(line_chart_svg(dict(by_noise), "Mean location error vs observed fraction",
                                   "observed (%)", "mean location error"))
    charts.append(path)

    if sweep:
        pts = [(e["scenario"].split("m=", 1)[1], e["time_s"])
               for e in sorted(sweep, key=lambda e: _sweep_key(e["scenario"]))]
        path = out_dir / "runtime_vs_m.svg"
        path.write_text(line_chart_svg({"camera updates": pts}, "Update time vs subsample size",
                                       "m", "time (s)"))
        charts.append(path)
    return table, charts
