"""Minimal native SVG line/scatter plots; no plotting dependency."""

from __future__ import annotations

import numpy as np

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 36, 52
_COLORS = ("#1f6fb4", "#d95f02", "#2b9348", "#7b2d8b", "#b8860b")


def _ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, count)
    return raw


def line_plot(path, series, title="", xlabel="", ylabel="",
              logx=False, logy=False) -> None:
    """series: iterable of (label, x array, y array)."""
    tx = (lambda v: np.log10(v)) if logx else (lambda v: np.asarray(v, float))
    ty = (lambda v: np.log10(v)) if logy else (lambda v: np.asarray(v, float))
    xs = np.concatenate([tx(np.asarray(s[1], float)) for s in series])
    ys = np.concatenate([ty(np.asarray(s[2], float)) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    padx = 0.04 * (x1 - x0)
    pady = 0.06 * (y1 - y0)
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady

    def sx(v):
        return _ML + (v - x0) / (x1 - x0) * (_W - _ML - _MR)

    def sy(v):
        return _H - _MB - (v - y0) / (y1 - y0) * (_H - _MT - _MB)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W/2:.0f}" y="20" text-anchor="middle" '
           f'font-size="14">{title}</text>']
    out.append(f'<rect x="{_ML}" y="{_MT}" width="{_W-_ML-_MR}" '
               f'height="{_H-_MT-_MB}" fill="none" stroke="#444"/>')
    for tv in _ticks(x0 + padx, x1 - padx):
        px = sx(tv)
        label = f"{10**tv:.3g}" if logx else f"{tv:.3g}"
        out.append(f'<line x1="{px:.1f}" y1="{_H-_MB}" x2="{px:.1f}" '
                   f'y2="{_H-_MB+5}" stroke="#444"/>')
        out.append(f'<text x="{px:.1f}" y="{_H-_MB+18}" '
                   f'text-anchor="middle">{label}</text>')
    for tv in _ticks(y0 + pady, y1 - pady):
        py = sy(tv)
        label = f"{10**tv:.3g}" if logy else f"{tv:.3g}"
        out.append(f'<line x1="{_ML-5}" y1="{py:.1f}" x2="{_ML}" '
                   f'y2="{py:.1f}" stroke="#444"/>')
        out.append(f'<text x="{_ML-8}" y="{py+4:.1f}" '
                   f'text-anchor="end">{label}</text>')
    out.append(f'<text x="{_W/2:.0f}" y="{_H-14}" '
               f'text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{_H/2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_H/2:.0f})">{ylabel}</text>')
    for i, (label, x, y) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        px = sx(tx(np.asarray(x, float)))
        py = sy(ty(np.asarray(y, float)))
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        for a, b in zip(px, py):
            out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" '
                       f'fill="{color}"/>')
        out.append(f'<text x="{_W-_MR-6}" y="{_MT+16+14*i}" text-anchor="end" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))
