"""Small deterministic SVG line charts.

Output bytes depend only on the data passed in: no timestamps, no library
version strings, stable float formatting. Good enough for sweep curves and
score-over-time traces without pulling in a plotting stack.
"""
from __future__ import annotations

import math

from .errors import ContractError

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 400
_ML, _MR, _MT, _MB = 64.0, 16.0, 28.0, 44.0


def _fmt(v: float) -> str:
    # %.6g keeps coordinates stable across runs and short in the file.
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_chart(
    series: list[tuple[str, list[float], list[float]]],
    path: str,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    hlines: list[tuple[str, float]] | None = None,
) -> None:
    """Write an SVG line chart. ``series`` is an ordered list of
    (label, xs, ys); ``hlines`` adds labeled horizontal reference lines."""
    if not series:
        raise ContractError("line_chart needs at least one series")
    xs_all: list[float] = []
    ys_all: list[float] = []
    for label, xs, ys in series:
        if len(xs) != len(ys):
            raise ContractError(f"series {label!r}: {len(xs)} xs vs {len(ys)} ys")
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                xs_all.append(float(x))
                ys_all.append(float(y))
    for _, v in hlines or []:
        if math.isfinite(v):
            ys_all.append(float(v))
    if not xs_all:
        raise ContractError("line_chart: no finite points")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def py(y: float) -> float:
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_W / 2:g}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>')
    ax = f'stroke="black" stroke-width="1"'
    out.append(f'<line x1="{_ML:g}" y1="{py(y_lo):g}" x2="{_W - _MR:g}" y2="{py(y_lo):g}" {ax}/>')
    out.append(f'<line x1="{_ML:g}" y1="{py(y_lo):g}" x2="{_ML:g}" y2="{py(y_hi):g}" {ax}/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{_fmt(px(t))}" y1="{py(y_lo):g}" x2="{_fmt(px(t))}" y2="{py(y_lo) + 4:g}" {ax}/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{py(y_lo) + 16:g}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{_ML - 4:g}" y1="{_fmt(py(t))}" x2="{_ML:g}" y2="{_fmt(py(t))}" {ax}/>')
        out.append(f'<text x="{_ML - 6:g}" y="{_fmt(py(t) + 4)}" text-anchor="end">{_fmt(t)}</text>')
    if xlabel:
        out.append(f'<text x="{_W / 2:g}" y="{_H - 8:g}" text-anchor="middle">{_esc(xlabel)}</text>')
    if ylabel:
        out.append(
            f'<text x="14" y="{_H / 2:g}" text-anchor="middle" '
            f'transform="rotate(-90 14 {_H / 2:g})">{_esc(ylabel)}</text>')
    for li, (label, v) in enumerate(hlines or []):
        if not math.isfinite(v):
            continue
        out.append(
            f'<line x1="{_ML:g}" y1="{_fmt(py(v))}" x2="{_W - _MR:g}" y2="{_fmt(py(v))}" '
            f'stroke="#888888" stroke-width="1" stroke-dasharray="5,4"/>')
        out.append(f'<text x="{_W - _MR - 4:g}" y="{_fmt(py(v) - 4)}" text-anchor="end" fill="#555555">{_esc(label)}</text>')
    for si, (label, xs, ys) in enumerate(series):
        color = _PALETTE[si % len(_PALETTE)]
        pts = [
            (px(float(x)), py(float(y)))
            for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y)
        ]
        if not pts:
            continue
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="2.5" fill="{color}"/>')
        ly = _MT + 14 * si
        out.append(f'<line x1="{_W - _MR - 120:g}" y1="{ly:g}" x2="{_W - _MR - 100:g}" y2="{ly:g}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _MR - 96:g}" y="{ly + 4:g}">{_esc(label)}</text>')
    out.append("</svg>\n")
    data = "\n".join(out)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(data)
