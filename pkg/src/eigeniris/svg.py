"""Minimal deterministic SVG line plots (EER vs factor, DET on normal-deviate axes)."""
from __future__ import annotations

import math
from pathlib import Path
from statistics import NormalDist
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
W, H = 640, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 60

_ND = NormalDist()
DET_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4)


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def probit(p: float, lo: float = DET_TICKS[0], hi: float = 1 - DET_TICKS[0]) -> float:
    return _ND.inv_cdf(min(max(p, lo), hi))


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xr, yr):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{(LEFT + W - RIGHT) / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{(LEFT + W - RIGHT) / 2}" y="{H - 15}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
            f'<text x="18" y="{(TOP + H - BOTTOM) / 2}" text-anchor="middle" font-size="13" '
            f'transform="rotate(-90 18 {(TOP + H - BOTTOM) / 2})">{escape(ylabel)}</text>',
            f'<rect x="{LEFT}" y="{TOP}" width="{W - LEFT - RIGHT}" height="{H - TOP - BOTTOM}" '
            f'fill="none" stroke="black"/>',
        ]

    def px(self, x, y):
        (x0, x1), (y0, y1) = self.xr, self.yr
        u = LEFT + (x - x0) / (x1 - x0 or 1.0) * (W - LEFT - RIGHT)
        v = H - BOTTOM - (y - y0) / (y1 - y0 or 1.0) * (H - TOP - BOTTOM)
        return round(u, 2), round(v, 2)

    def xtick(self, x, label):
        u, _ = self.px(x, self.yr[0])
        self.parts.append(f'<line x1="{u}" y1="{H - BOTTOM}" x2="{u}" y2="{H - BOTTOM + 5}" stroke="black"/>')
        self.parts.append(f'<text x="{u}" y="{H - BOTTOM + 18}" text-anchor="middle" font-size="11">{label}</text>')

    def ytick(self, y, label):
        _, v = self.px(self.xr[0], y)
        self.parts.append(f'<line x1="{LEFT - 5}" y1="{v}" x2="{LEFT}" y2="{v}" stroke="black"/>')
        self.parts.append(f'<line x1="{LEFT}" y1="{v}" x2="{W - RIGHT}" y2="{v}" stroke="#ddd"/>')
        self.parts.append(f'<text x="{LEFT - 8}" y="{v + 4}" text-anchor="end" font-size="11">{label}</text>')

    def series(self, k, name, pts, markers=True):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{u},{v}" for u, v in (self.px(x, y) for x, y in pts))
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        if markers:
            for x, y in pts:
                u, v = self.px(x, y)
                self.parts.append(f'<circle cx="{u}" cy="{v}" r="2.5" fill="{color}"/>')
        ly = TOP + 12 + 18 * k
        self.parts.append(f'<line x1="{W - RIGHT + 12}" y1="{ly}" x2="{W - RIGHT + 32}" y2="{ly}" '
                          f'stroke="{color}" stroke-width="2"/>')
        self.parts.append(f'<text x="{W - RIGHT + 36}" y="{ly + 4}" font-size="11">{escape(name)}</text>')

    def render(self, comment=None):
        out = list(self.parts)
        if comment:
            out.insert(1, f"<!-- {escape(comment)} -->")
        out.append("</svg>")
        return "\n".join(out) + "\n"


def eer_vs_factor(series: dict, title: str, comment: str | None = None) -> str:
    """``series`` maps a legend name to a list of (factor, eer_fraction)."""
    xs = [x for pts in series.values() for x, _ in pts] or [0, 1]
    ys = [y * 100 for pts in series.values() for _, y in pts] or [0]
    top = max(5.0, math.ceil(max(ys) / 5.0) * 5.0)
    c = _Canvas(title, "down-sampling factor", "EER (%)", (min(xs), max(xs)), (0.0, top))
    for x in sorted(set(xs)):
        c.xtick(x, str(x))
    for k in range(6):
        c.ytick(top * k / 5, _fmt(top * k / 5))
    for k, (name, pts) in enumerate(series.items()):
        c.series(k, name, [(x, 100 * y) for x, y in sorted(pts)])
    return c.render(comment)


def det_plot(curves: dict, title: str, comment: str | None = None) -> str:
    """``curves`` maps a legend name to a list of (far, frr) fractions."""
    lo, hi = probit(DET_TICKS[0]), probit(DET_TICKS[-1])
    c = _Canvas(title, "false acceptance rate (%)", "false rejection rate (%)", (lo, hi), (lo, hi))
    for t in DET_TICKS:
        c.xtick(probit(t), _fmt(100 * t))
        c.ytick(probit(t), _fmt(100 * t))
    for k, (name, pts) in enumerate(curves.items()):
        warped = [(min(max(probit(a), lo), hi), min(max(probit(b), lo), hi)) for a, b in pts]
        c.series(k, name, warped, markers=False)
    return c.render(comment)


def write_svg(text: str, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
