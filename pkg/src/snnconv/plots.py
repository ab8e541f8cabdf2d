"""Minimal deterministic SVG line plots (rate-vs-input curves, metric-vs-T)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .verify import closed_form_rate

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
W, H, PAD = 480, 320, 50


def line_plot(series, title, xlabel, ylabel, logx=False, step=False) -> str:
    """``series`` is a list of ``(label, xs, ys)``. Returns SVG text."""
    xs_all = np.concatenate([np.asarray(x, dtype=float) for _, x, _ in series])
    ys_all = np.concatenate([np.asarray(y, dtype=float) for _, _, y in series])
    tx = np.log2 if logx else (lambda v: np.asarray(v, dtype=float))
    x0, x1 = float(tx(xs_all).min()), float(tx(xs_all).max())
    y0, y1 = min(0.0, float(ys_all.min())), float(ys_all.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return PAD + (float(tx(x)) - x0) / (x1 - x0) * (W - 2 * PAD)

    def py(y):
        return H - PAD - (float(y) - y0) / (y1 - y0) * (H - 2 * PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="15" y="{H / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 15 {H / 2:.1f})">{escape(ylabel)}</text>']
    for v in (y0, (y0 + y1) / 2, y1):
        out.append(f'<text x="{PAD - 5}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    xticks = sorted(set(np.asarray(series[0][1], dtype=float).tolist())) if logx else [xs_all.min(), xs_all.max()]
    for v in xticks:
        out.append(f'<text x="{px(v):.1f}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{v:g}</text>')
    for k, (label, xs, ys) in enumerate(series):
        pts = []
        for i, (x, y) in enumerate(zip(xs, ys)):
            if step and i:
                pts.append(f"{px(x):.2f},{py(ys[i - 1]):.2f}")
            pts.append(f"{px(x):.2f},{py(y):.2f}")
        color = COLORS[k % len(COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        out.append(f'<text x="{W - PAD + 2}" y="{PAD + 14 * k}" font-size="10" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def rate_curve_svg(T, v0s=(0.0, 0.5), points=201) -> str:
    """IF firing rate vs constant input for each initial potential, next to the identity."""
    zs = np.linspace(0, 1, points)
    series = [("identity", zs, zs)]
    for v0 in v0s:
        series.append((f"V0={v0:g}", zs, [closed_form_rate(float(z), T, v0) for z in zs]))
    return line_plot(series, f"IF rate vs input, T={T}", "input z", "rate r", step=True)


def sweep_svg(rows, key="output_mean_err", label=None) -> str:
    Ts = [r["T"] for r in rows]
    ys = [r[key] if r[key] is not None else 0.0 for r in rows]
    return line_plot([(label or key, Ts, ys)], f"{label or key} vs T", "T (steps)", label or key, logx=True)


def write(svg, path):
    Path(path).write_text(svg)
