"""Tiny standalone SVG line plots with optional shaded bands."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


@dataclass
class Figure:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    logx: bool = False
    logy: bool = False
    width: int = 640
    height: int = 420
    _lines: list = field(default_factory=list)
    _bands: list = field(default_factory=list)
    _points: list = field(default_factory=list)

    def line(self, x, y, label: str = "", color: str | None = None, dashed: bool = False):
        self._lines.append((np.asarray(x, float), np.asarray(y, float), label, color, dashed))

    def band(self, x, lo, hi, color: str | None = None, label: str = ""):
        self._bands.append((np.asarray(x, float), np.asarray(lo, float), np.asarray(hi, float), color, label))

    def points(self, x, y, label: str = "", color: str | None = None):
        self._points.append((np.asarray(x, float), np.asarray(y, float), label, color))

    def _tx(self, v, log):
        v = np.asarray(v, float)
        return np.log10(v) if log else v

    def render(self) -> str:
        margin = dict(left=70, right=20, top=40, bottom=55)
        pw = self.width - margin["left"] - margin["right"]
        ph = self.height - margin["top"] - margin["bottom"]
        xs = [self._tx(s[0], self.logx) for s in self._lines + self._bands + self._points]
        ys = [self._tx(s[1], self.logy) for s in self._lines + self._points]
        ys += [self._tx(b[k], self.logy) for b in self._bands for k in (1, 2)]
        xs = np.concatenate(xs) if xs else np.array([0.0, 1.0])
        ys = np.concatenate(ys) if ys else np.array([0.0, 1.0])
        xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
        x0, x1 = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
        y0, y1 = (ys.min(), ys.max()) if ys.size else (0.0, 1.0)
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

        def px(v):
            return margin["left"] + (self._tx(v, self.logx) - x0) / (x1 - x0) * pw

        def py(v):
            return margin["top"] + ph - (self._tx(v, self.logy) - y0) / (y1 - y0) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
               f'font-family="sans-serif" font-size="12">',
               f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
               f'<rect x="{margin["left"]}" y="{margin["top"]}" width="{pw}" height="{ph}" '
               'fill="none" stroke="#444"/>']
        for frac in np.linspace(0, 1, 5):
            xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
            xpos = margin["left"] + frac * pw
            ypos = margin["top"] + ph - frac * ph
            xt = f"1e{xv:.1f}" if self.logx else f"{xv:.3g}"
            yt = f"1e{yv:.1f}" if self.logy else f"{yv:.3g}"
            out.append(f'<text x="{xpos:.1f}" y="{margin["top"] + ph + 18}" text-anchor="middle">{xt}</text>')
            out.append(f'<text x="{margin["left"] - 6}" y="{ypos + 4:.1f}" text-anchor="end">{yt}</text>')
        n = 0
        legend = []
        for x, lo, hi, color, label in self._bands:
            color = color or PALETTE[n % len(PALETTE)]
            pts = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, hi)]
            pts += [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.25" stroke="none"/>')
            if label:
                legend.append((label, color, "band"))
        for x, y, label, color, dashed in self._lines:
            color = color or PALETTE[n % len(PALETTE)]
            n += 1
            ok = np.isfinite(self._tx(x, self.logx)) & np.isfinite(self._tx(y, self.logy))
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
            dash = ' stroke-dasharray="6,4"' if dashed else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>')
            if label:
                legend.append((label, color, "line"))
        for x, y, label, color in self._points:
            color = color or PALETTE[n % len(PALETTE)]
            n += 1
            for a, b in zip(x, y):
                if np.isfinite(self._tx(a, self.logx)) and np.isfinite(self._tx(b, self.logy)):
                    out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>')
            if label:
                legend.append((label, color, "line"))
        for i, (label, color, kind) in enumerate(legend):
            y = margin["top"] + 14 + 16 * i
            x = margin["left"] + 10
            if kind == "band":
                out.append(f'<rect x="{x}" y="{y - 8}" width="18" height="10" fill="{color}" fill-opacity="0.25"/>')
            else:
                out.append(f'<line x1="{x}" y1="{y - 3}" x2="{x + 18}" y2="{y - 3}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{x + 24}" y="{y + 1}">{escape(label)}</text>')
        out.append(f'<text x="{self.width / 2}" y="22" text-anchor="middle" font-size="14">{escape(self.title)}</text>')
        out.append(f'<text x="{margin["left"] + pw / 2}" y="{self.height - 12}" text-anchor="middle">'
                   f'{escape(self.xlabel)}</text>')
        out.append(f'<text x="16" y="{margin["top"] + ph / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {margin["top"] + ph / 2})">{escape(self.ylabel)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.render())
