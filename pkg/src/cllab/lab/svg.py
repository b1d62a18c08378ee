"""Minimal deterministic SVG plots (fixed viewport, system fonts, fixed precision)."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..control import stability_boundary, stability_map

WIDTH, HEIGHT = 640, 420
MARGIN = (64, 24, 28, 48)  # left, right, top, bottom
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class Axes:
    def __init__(self, xlim, ylim, title: str = "", xlabel: str = "", ylabel: str = "",
                 logy: bool = False, equal: bool = False):
        self.logy = logy
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        x0, x1 = xlim
        y0, y1 = ylim
        if logy:
            y0, y1 = math.log10(y0), math.log10(y1)
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x0 + 0.5
        if y1 <= y0:
            y0, y1 = y0 - 0.5, y0 + 0.5
        l, r, t, b = MARGIN
        self.pw, self.ph = WIDTH - l - r, HEIGHT - t - b
        if equal:
            sx, sy = self.pw / (x1 - x0), self.ph / (y1 - y0)
            s = min(sx, sy)
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            x0, x1 = cx - self.pw / s / 2, cx + self.pw / s / 2
            y0, y1 = cy - self.ph / s / 2, cy + self.ph / s / 2
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        self.parts: list = []

    def X(self, x: float) -> float:
        x0, x1 = self.xlim
        return MARGIN[0] + (x - x0) / (x1 - x0) * self.pw

    def Y(self, y: float) -> float:
        if self.logy:
            y = math.log10(y)
        y0, y1 = self.ylim
        return MARGIN[2] + (1.0 - (y - y0) / (y1 - y0)) * self.ph

    def _ok(self, x, y) -> bool:
        return (x is not None and y is not None and math.isfinite(x) and math.isfinite(y)
                and (not self.logy or y > 0))

    def line(self, xs, ys, color: str, width: float = 1.5, dash: Optional[str] = None) -> None:
        seg: list = []
        segs = [seg]
        for x, y in zip(xs, ys):
            if self._ok(x, y):
                seg.append(f"{_f(self.X(x))},{_f(self.Y(y))}")
            elif seg:
                seg = []
                segs.append(seg)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        for s in segs:
            if len(s) >= 2:
                self.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"'
                                  f'{extra} points="{" ".join(s)}"/>')

    def dots(self, xs, ys, color: str, r: float = 2.0) -> None:
        for x, y in zip(xs, ys):
            if self._ok(x, y):
                self.parts.append(f'<circle cx="{_f(self.X(x))}" cy="{_f(self.Y(y))}" r="{r}" '
                                  f'fill="{color}"/>')

    def rect(self, x0, y0, x1, y1, color: str) -> None:
        X0, X1 = sorted((self.X(x0), self.X(x1)))
        Y0, Y1 = sorted((self.Y(y0), self.Y(y1)))
        self.parts.append(f'<rect x="{_f(X0)}" y="{_f(Y0)}" width="{_f(X1 - X0)}" '
                          f'height="{_f(Y1 - Y0)}" fill="{color}"/>')

    def vline(self, x: float, color: str, label: str = "") -> None:
        X = _f(self.X(x))
        self.parts.append(f'<line x1="{X}" y1="{MARGIN[2]}" x2="{X}" y2="{MARGIN[2] + self.ph}" '
                          f'stroke="{color}" stroke-dasharray="4 3"/>')
        if label:
            self.parts.append(f'<text x="{X}" y="{MARGIN[2] + 12}" font-size="10" '
                              f'fill="{color}">{_esc(label)}</text>')

    def legend(self, items: Sequence[tuple]) -> None:
        x = MARGIN[0] + 8
        for i, (name, color) in enumerate(items):
            y = MARGIN[2] + 14 + 14 * i
            self.parts.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 16}" y2="{y - 4}" '
                              f'stroke="{color}" stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 20}" y="{y}" font-size="11">{_esc(name)}</text>')

    def _ticks(self) -> list:
        out = []
        l, t = MARGIN[0], MARGIN[2]
        x0, x1 = self.xlim
        for v in np.linspace(x0, x1, 5):
            X = self.X(v)
            out.append(f'<text x="{_f(X)}" y="{t + self.ph + 16}" font-size="10" '
                       f'text-anchor="middle">{v:.3g}</text>')
        y0, y1 = self.ylim
        if self.logy:
            vals = [10.0 ** k for k in range(math.floor(y0), math.ceil(y1) + 1)
                    if y0 - 1e-9 <= k <= y1 + 1e-9]
            step = max(1, len(vals) // 6)
            vals = vals[::step]
        else:
            vals = list(np.linspace(y0, y1, 5))
        for v in vals:
            Y = self.Y(v)
            out.append(f'<text x="{l - 6}" y="{_f(Y + 3)}" font-size="10" '
                       f'text-anchor="end">{v:.3g}</text>')
        return out

    def render(self) -> str:
        l, t = MARGIN[0], MARGIN[2]
        head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
                f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
                f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
                f'<clipPath id="plot"><rect x="{l}" y="{t}" width="{self.pw}" height="{self.ph}"/>'
                f'</clipPath>']
        body = ['<g clip-path="url(#plot)">'] + self.parts + ["</g>"]
        frame = [f'<rect x="{l}" y="{t}" width="{self.pw}" height="{self.ph}" fill="none" '
                 f'stroke="black"/>',
                 f'<text x="{WIDTH / 2}" y="{t - 8}" font-size="13" text-anchor="middle">'
                 f'{_esc(self.title)}</text>',
                 f'<text x="{l + self.pw / 2}" y="{HEIGHT - 10}" font-size="11" '
                 f'text-anchor="middle">{_esc(self.xlabel)}</text>',
                 f'<text x="14" y="{t + self.ph / 2}" font-size="11" text-anchor="middle" '
                 f'transform="rotate(-90 14 {t + self.ph / 2})">{_esc(self.ylabel)}</text>']
        return "\n".join(head + body + frame + self._ticks() + ["</svg>"]) + "\n"


def _col(record, name):
    ep, v = [], []
    for r in record.rows:
        if r.get(name) is not None:
            ep.append(r["epoch"])
            v.append(float(r[name]))
    return ep, v


def _pos_range(values) -> tuple:
    vals = [v for v in values if v is not None and math.isfinite(v) and v > 0]
    if not vals:
        return (0.1, 10.0)
    lo, hi = min(vals), max(vals)
    return (10 ** math.floor(math.log10(lo)), 10 ** math.ceil(math.log10(hi) + 1e-12))


def loss_svg(record, boundaries: Sequence = (), title: str = "loss") -> str:
    tr = _col(record, "train_loss")
    te = _col(record, "test_loss")
    epochs = [r["epoch"] for r in record.rows]
    ax = Axes((min(epochs), max(epochs)), _pos_range(tr[1] + te[1]), title, "epoch", "loss",
              logy=True)
    ax.line(*tr, COLORS[0], 1.0, dash="3 2")
    ax.line(*te, COLORS[1], 1.5)
    for e, (lab, color) in zip(boundaries, (("stage 1 end", "#555555"), ("stage 2 end", "#b8860b"))):
        if e is not None:
            ax.vline(e, color, lab)
    ax.legend([("train", COLORS[0]), ("test (closed loop)", COLORS[1])])
    return ax.render()


def spectrum_svg(record, title: str = "dominant eigenvalues of P") -> str:
    _, re = _col(record, "lambda1_re")
    _, im = _col(record, "lambda1_im")
    _, l3 = _col(record, "lambda3")
    rho = _col(record, "rho")[1]
    r = max([1.1] + [abs(v) * 1.05 for v in rho if math.isfinite(v)])
    r = min(r, 3.0)
    ax = Axes((-r, r), (-r, r), title, "Re", "Im", equal=True)
    th = np.linspace(0, 2 * math.pi, 181)
    ax.line(np.cos(th), np.sin(th), "#999999", 1.0, dash="4 3")
    ax.line(re, im, COLORS[0], 1.2)
    ax.line(re, [-v for v in im], COLORS[0], 1.2, dash="2 2")
    ax.dots(l3, [0.0] * len(l3), COLORS[1], 1.2)
    ax.legend([("lambda1 (and conjugate)", COLORS[0]), ("lambda3", COLORS[1])])
    return ax.render()


def gain_svg(record, k1_range=(-1.0, 3.0), k2_range=(-1.0, 4.0), n: int = 41,
             title: str = "effective gain (k1, k2)") -> str:
    smap = stability_map(k1_range, k2_range, n, n, T=50)
    ax = Axes(k1_range, k2_range, title, "k1", "k2")
    shade = {"stable": "#dcecd8", "oscillatory_unstable": "#f4dede", "real_unstable": "#e6e0f0"}
    d1 = (k1_range[1] - k1_range[0]) / (n - 1)
    d2 = (k2_range[1] - k2_range[0]) / (n - 1)
    for i, a in enumerate(smap.k1):
        for j, b in enumerate(smap.k2):
            ax.rect(a - d1 / 2, b - d2 / 2, a + d1 / 2, b + d2 / 2, shade[smap.regime[j, i]])
    ks = np.linspace(k1_range[0], k1_range[1], 81)
    edges = stability_boundary(ks, n_k2=401, k2_range=k2_range)
    kept = [(a, e) for a, e in zip(ks, edges) if e is not None]
    if kept:
        # closed outline of the stable region
        xs = [a for a, _ in kept] + [a for a, _ in reversed(kept)] + [kept[0][0]]
        ys = [e[0] for _, e in kept] + [e[1] for _, e in reversed(kept)] + [kept[0][1][0]]
        ax.line(xs, ys, "black", 1.2)
    e1, k1 = _col(record, "k1")
    e2, k2 = _col(record, "k2")
    common = sorted(set(e1) & set(e2))
    d1m, d2m = dict(zip(e1, k1)), dict(zip(e2, k2))
    ax.line([d1m[e] for e in common], [d2m[e] for e in common], COLORS[0], 1.5)
    if common:
        ax.dots([d1m[common[0]]], [d2m[common[0]]], "#555555", 3.0)
        ax.dots([d1m[common[-1]]], [d2m[common[-1]]], "#b8860b", 3.0)
    _, x1 = _col(record, "k1_exact")
    _, x2 = _col(record, "k2_exact")
    if x1:
        ax.dots(x1, x2, COLORS[1], 1.0)
    return ax.render()


def freq_svg(record, title: str = "loss per frequency component") -> str:
    cols = [c for c in record.columns if c.startswith("freq_loss_")]
    series = [_col(record, c) for c in cols]
    allv = [v for _, vs in series for v in vs]
    epochs = [r["epoch"] for r in record.rows]
    ax = Axes((min(epochs), max(epochs)), _pos_range(allv), title, "epoch", "tracking loss",
              logy=True)
    for (ep, v), color in zip(series, COLORS):
        ax.line(ep, v, color, 1.5)
    ax.legend([(f"omega{i + 1}", c) for i, c in zip(range(len(cols)), COLORS)])
    return ax.render()
