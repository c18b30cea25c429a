"""Minimal SVG line/scatter panels, each written next to a CSV twin.

The CSV twin holds every plotted number in long format
(panel, series, x, y) so tests can check figures without parsing SVG.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PANEL_W, PANEL_H, MARGIN = 260, 180, 36
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class Panel:
    title: str
    series: dict = field(default_factory=dict)   # name -> (x, y)
    kind: str = "line"                           # or "scatter"
    xlabel: str = ""
    ylabel: str = ""


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _panel_svg(p: Panel, ox: float, oy: float) -> list[str]:
    xs = [np.asarray(x, float) for x, _ in p.series.values()]
    ys = [np.asarray(y, float) for _, y in p.series.values()]
    allx = np.concatenate(xs) if xs else np.zeros(1)
    ally = np.concatenate(ys) if ys else np.zeros(1)
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    w, h = PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN

    def px(x):
        return ox + MARGIN + (x - x0) / (x1 - x0) * w

    def py(y):
        return oy + MARGIN + h - (y - y0) / (y1 - y0) * h

    out = [f'<rect x="{_fmt(ox + MARGIN)}" y="{_fmt(oy + MARGIN)}" width="{w}" height="{h}" '
           f'fill="none" stroke="#444" stroke-width="0.5"/>',
           f'<text x="{_fmt(ox + PANEL_W / 2)}" y="{_fmt(oy + MARGIN - 8)}" text-anchor="middle" '
           f'font-size="10">{escape(p.title)}</text>',
           f'<text x="{_fmt(ox + PANEL_W / 2)}" y="{_fmt(oy + PANEL_H - 6)}" text-anchor="middle" '
           f'font-size="8">{escape(p.xlabel)} [{x0:.3g}, {x1:.3g}]</text>',
           f'<text x="{_fmt(ox + 8)}" y="{_fmt(oy + PANEL_H / 2)}" font-size="8" '
           f'transform="rotate(-90 {_fmt(ox + 8)} {_fmt(oy + PANEL_H / 2)})" text-anchor="middle">'
           f'{escape(p.ylabel)} [{y0:.3g}, {y1:.3g}]</text>']
    for i, (name, (x, y)) in enumerate(p.series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [(px(a), py(b)) for a, b in zip(np.asarray(x, float), np.asarray(y, float))]
        if p.kind == "scatter":
            out += [f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>' for a, b in pts]
        else:
            path = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1"/>')
        out.append(f'<text x="{_fmt(ox + PANEL_W - MARGIN)}" y="{_fmt(oy + MARGIN + 10 + 9 * i)}" '
                   f'text-anchor="end" font-size="7" fill="{color}">{escape(str(name))}</text>')
    return out


def write_figure(stem, panels: Sequence[Panel], columns: int = 3, title: str = "") -> tuple[Path, Path]:
    """Write ``stem``.svg and ``stem``.csv; returns both paths."""
    stem = Path(stem)
    cols = max(1, min(columns, len(panels)))
    rows = -(-len(panels) // cols)
    top = 20 if title else 0
    width, height = cols * PANEL_W, rows * PANEL_H + top
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
            f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        body.append(f'<text x="{width / 2:.1f}" y="14" text-anchor="middle" font-size="12">{escape(title)}</text>')
    for k, p in enumerate(panels):
        body += _panel_svg(p, (k % cols) * PANEL_W, top + (k // cols) * PANEL_H)
    body.append("</svg>")
    svg_path, csv_path = stem.with_suffix(".svg"), stem.with_suffix(".csv")
    svg_path.write_text("\n".join(body) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["panel", "series", "x", "y"])
        for p in panels:
            for name, (x, y) in p.series.items():
                for a, b in zip(np.asarray(x, float), np.asarray(y, float)):
                    w.writerow([p.title, name, repr(float(a)), repr(float(b))])
    return svg_path, csv_path
