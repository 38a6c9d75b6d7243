"""Minimal SVG line and bar charts (no plotting dependency)."""

from __future__ import annotations

from xml.sax.saxutils import escape

W, H = 480, 320
PAD_L, PAD_R, PAD_T, PAD_B = 60, 20, 30, 50


def _frame(title: str, xlabel: str, ylabel: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD_L}" y1="{H - PAD_B}" x2="{W - PAD_R}" y2="{H - PAD_B}" stroke="black"/>',
        f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{H - PAD_B}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
    ]


def _yscale(values):
    lo = min(0.0, min(values))
    hi = max(values) if values else 1.0
    if hi <= lo:
        hi = lo + 1.0
    span = H - PAD_T - PAD_B
    return lambda v: H - PAD_B - (v - lo) / (hi - lo) * span, lo, hi


def _yticks(ys, lo, hi) -> list:
    out = []
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        out.append(f'<text x="{PAD_L - 6}" y="{ys(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def line_chart(xs, ys_values, title="", xlabel="", ylabel="") -> str:
    xs = [float(x) for x in xs]
    vals = [float(y) for y in ys_values]
    ys, lo, hi = _yscale(vals)
    x0, x1 = min(xs), max(xs)
    span = W - PAD_L - PAD_R
    xsc = (lambda x: PAD_L + span / 2) if x1 == x0 else (lambda x: PAD_L + 10 + (x - x0) / (x1 - x0) * (span - 20))
    parts = _frame(title, xlabel, ylabel) + _yticks(ys, lo, hi)
    pts = " ".join(f"{xsc(x):.1f},{ys(y):.1f}" for x, y in zip(xs, vals))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for x, y in zip(xs, vals):
        parts.append(f'<circle cx="{xsc(x):.1f}" cy="{ys(y):.1f}" r="4" fill="#1f77b4"/>')
        parts.append(f'<text x="{xsc(x):.1f}" y="{H - PAD_B + 16}" text-anchor="middle" font-size="10">{x:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(labels, values, title="", xlabel="", ylabel="") -> str:
    vals = [float(v) for v in values]
    ys, lo, hi = _yscale(vals)
    n = max(len(vals), 1)
    slot = (W - PAD_L - PAD_R) / n
    parts = _frame(title, xlabel, ylabel) + _yticks(ys, lo, hi)
    for i, (lab, v) in enumerate(zip(labels, vals)):
        x = PAD_L + i * slot + 0.15 * slot
        top = ys(v)
        parts.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{0.7 * slot:.1f}" height="{ys(lo) - top:.1f}" fill="#ff7f0e"/>')
        parts.append(f'<text x="{x + 0.35 * slot:.1f}" y="{H - PAD_B + 16}" text-anchor="middle" font-size="10">'
                     f"{escape(str(lab))}</text>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
