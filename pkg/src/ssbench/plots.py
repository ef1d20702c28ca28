"""Self-contained SVG renderers for benchmark result tables.

No plotting dependency: each artifact is a few dozen rects, paths and text
elements, and emitting them directly keeps every displayed number embedded in
the file. Value labels carry ``data-*`` attributes (method, group, value) so
tests can parse the rendered numbers and compare them against aggregates
recomputed from the same CSV.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .methods import MethodKind
from .metrics import METRIC_FIELDS, CellResult, cells_from_csv


class PlotError(ValueError):
    """Unusable rendering request: unknown method/metric/kind or empty input."""


SUMMARY_KINDS = ("box", "line-by-size", "subpop-bars")

_METHOD_COLORS = {
    "oracle": "#555555",
    "naive": "#e66101",
    "mt_naive": "#fdb863",
    "tnet": "#1b7837",
    "mtnet": "#5aae61",
    "ipw": "#2166ac",
    "imputation": "#67a9cf",
    "kmm": "#762a83",
    "kliep": "#c2a5cf",
    "dann": "#b2182b",
}
_SLICE_COLORS = {
    "selected": "#2166ac",
    "nonselected": "#b2182b",
    "overall": "#555555",
}

_HATCH_DEF = (
    '<pattern id="hatch" width="7" height="7" patternUnits="userSpaceOnUse"'
    ' patternTransform="rotate(45)">'
    '<rect width="7" height="7" fill="#f0f0f0"/>'
    '<line x1="0" y1="0" x2="0" y2="7" stroke="#9a9a9a" stroke-width="2"/>'
    "</pattern>"
)


def _fmt3(v: float) -> str:
    return f"{v:.3f}"


def _fmt_rate(v: float) -> str:
    return f"{v:g}"


def _esc(s: str) -> str:
    return (
        str(s)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _attrs(d: dict) -> str:
    return "".join(f' {k}="{_esc(v)}"' for k, v in d.items())


def _text(x, y, s, *, size=11, anchor="middle", fill="#222222", extra=None, rotate=None):
    a = {"x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": str(size), "text-anchor": anchor, "fill": fill}
    if rotate is not None:
        a["transform"] = f"rotate({rotate} {x:.1f} {y:.1f})"
    if extra:
        a.update(extra)
    return f"<text{_attrs(a)}>{_esc(s)}</text>"


def _rect(x, y, w, h, fill, *, stroke="#ffffff", extra=None):
    a = {
        "x": f"{x:.1f}", "y": f"{y:.1f}", "width": f"{w:.1f}", "height": f"{h:.1f}",
        "fill": fill, "stroke": stroke,
    }
    if extra:
        a.update(extra)
    return f"<rect{_attrs(a)}/>"


def _line(x1, y1, x2, y2, stroke="#cccccc", width=1.0):
    return (
        f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}"'
        f' stroke="{stroke}" stroke-width="{width:g}"/>'
    )


def _svg(width, height, body, *, defs=""):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}"'
        f' viewBox="0 0 {width:.0f} {height:.0f}" font-family="Helvetica, Arial, sans-serif">'
        f"<defs>{defs}</defs><rect width='100%' height='100%' fill='#ffffff'/>"
        f"{body}</svg>\n"
    )


def _load_cells(results_csv) -> list[CellResult]:
    cells = cells_from_csv(results_csv)
    if not cells:
        raise PlotError(f"no result rows in {results_csv}")
    return cells


def _ordered_methods(present: set[str]) -> list[str]:
    known = [k.value for k in MethodKind if k.value in present]
    extra = sorted(present - set(known))
    return known + extra


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _delta_color(delta: float, scale: float) -> str:
    """White at 0, red ramp for positive delta, blue ramp for negative."""
    t = min(abs(delta) / scale, 1.0) if scale > 0 else 0.0
    hi = (214, 96, 77) if delta >= 0 else (67, 147, 195)
    rgb = tuple(round(255 + (c - 255) * t) for c in hi)
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


# ---------------------------------------------------------------------------
# heatmap


def render_heatmap(results_csv, out_path, method: str, metric: str = "auc_overall") -> Path:
    """Grid of (event rate x non-selection rate) cells, each showing the
    oracle group mean of ``metric`` minus the method's, averaged over sizes
    and seeds. Groups with no value on either side render hatched with no
    number. The oracle's own heatmap is identically 0.
    """
    if metric not in METRIC_FIELDS:
        raise PlotError(f"unknown metric {metric!r}; expected one of {', '.join(METRIC_FIELDS)}")
    if method not in {k.value for k in MethodKind}:
        raise PlotError(f"unknown method {method!r}")
    cells = _load_cells(results_csv)
    if not any(c.method == method for c in cells):
        raise PlotError(f"no rows for method {method!r} in {results_csv}")

    events = sorted({c.config.event_rate for c in cells})
    nonsels = sorted({c.config.nonselect_rate for c in cells})

    def group_mean(m: str, e: float, nu: float) -> float | None:
        vals = [
            getattr(c, metric)
            for c in cells
            if c.method == m
            and c.config.event_rate == e
            and c.config.nonselect_rate == nu
            and getattr(c, metric) is not None
        ]
        return _mean_or_none(vals)

    deltas: dict[tuple[float, float], float | None] = {}
    for e in events:
        for nu in nonsels:
            om = group_mean("oracle", e, nu)
            mm = group_mean(method, e, nu)
            deltas[(e, nu)] = None if om is None or mm is None else om - mm

    cw, ch = 72, 46
    left, top, right, bottom = 96, 54, 24, 64
    width = left + cw * len(events) + right
    height = top + ch * len(nonsels) + bottom
    scale = max([abs(d) for d in deltas.values() if d is not None], default=0.0)

    parts = [_text(width / 2, 26, f"{method}: {metric} delta from oracle", size=14)]
    for j, e in enumerate(events):
        parts.append(_text(left + cw * (j + 0.5), top + ch * len(nonsels) + 20, _fmt_rate(e)))
    for i, nu in enumerate(nonsels):
        parts.append(_text(left - 10, top + ch * (i + 0.5) + 4, _fmt_rate(nu), anchor="end"))
    parts.append(_text(left + cw * len(events) / 2, height - 16, "event rate", size=12))
    parts.append(
        _text(24, top + ch * len(nonsels) / 2, "non-selection rate", size=12, rotate=-90)
    )

    for i, nu in enumerate(nonsels):
        for j, e in enumerate(events):
            x, y = left + cw * j, top + ch * i
            d = deltas[(e, nu)]
            tag = {"data-event": _fmt_rate(e), "data-nonselect": _fmt_rate(nu)}
            if d is None:
                parts.append(_rect(x, y, cw, ch, "url(#hatch)", extra=tag))
                continue
            parts.append(_rect(x, y, cw, ch, _delta_color(d, scale), extra=tag))
            label = _fmt3(d)
            parts.append(
                _text(x + cw / 2, y + ch / 2 + 4, label, extra=dict(tag, **{"data-value": label}))
            )

    out = Path(out_path)
    out.write_text(_svg(width, height, "".join(parts), defs=_HATCH_DEF), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# summary plots


def _y_scale(lo: float, hi: float, y0: float, y1: float):
    """Map data [lo, hi] onto pixel [y0, y1] (y0 below y1 on screen)."""
    if hi - lo < 1e-12:
        lo, hi = lo - 0.01, hi + 0.01
    span = hi - lo

    def to_px(v: float) -> float:
        return y1 + (y0 - y1) * (1.0 - (v - lo) / span)

    return to_px, lo, hi


def _y_axis(parts, to_px, lo, hi, x_left, x_right, ticks=5):
    for tv in np.linspace(lo, hi, ticks):
        y = to_px(float(tv))
        parts.append(_line(x_left, y, x_right, y))
        parts.append(_text(x_left - 8, y + 4, f"{tv:.2f}", anchor="end", size=10))


def render_summary(results_csv, out_path, kind: str) -> Path:
    """One of three overview renders of a results CSV.

    box: per-method distribution of auc_overall across all cells.
    line-by-size: per-method mean auc_overall vs dataset size with a +/- one
      standard deviation band (sample std; zero-height band for lone cells).
    subpop-bars: per-method mean AUC bars for the selected, non-selected and
      overall test slices; a slice with no values (the oracle's non-selected
      slice) gets no bar.
    """
    if kind not in SUMMARY_KINDS:
        raise PlotError(f"unknown summary kind {kind!r}; expected one of {', '.join(SUMMARY_KINDS)}")
    cells = _load_cells(results_csv)
    methods = _ordered_methods({c.method for c in cells})
    render = {"box": _render_box, "line-by-size": _render_line_by_size, "subpop-bars": _render_subpop_bars}[kind]
    svg = render(cells, methods)
    out = Path(out_path)
    out.write_text(svg, encoding="utf-8")
    return out


def _render_box(cells: list[CellResult], methods: list[str]) -> str:
    data = {
        m: sorted(c.auc_overall for c in cells if c.method == m and c.auc_overall is not None)
        for m in methods
    }
    data = {m: v for m, v in data.items() if v}
    if not data:
        raise PlotError("no auc_overall values to plot")
    methods = [m for m in methods if m in data]

    slot, box_w = 84, 36
    left, top, bottom = 72, 48, 56
    width = left + slot * len(methods) + 24
    height = 360
    y0, y1 = height - bottom, top
    allv = [v for vals in data.values() for v in vals]
    to_px, lo, hi = _y_scale(min(allv), max(allv), y0, y1)

    parts = [_text(width / 2, 24, "auc_overall by method", size=14)]
    _y_axis(parts, to_px, lo, hi, left, width - 24)
    for k, m in enumerate(methods):
        vals = np.array(data[m])
        q0, q1, q2, q3, q4 = (float(np.quantile(vals, q)) for q in (0, 0.25, 0.5, 0.75, 1))
        cx = left + slot * (k + 0.5)
        color = _METHOD_COLORS.get(m, "#888888")
        parts.append(_line(cx, to_px(q0), cx, to_px(q1), stroke=color))
        parts.append(_line(cx, to_px(q3), cx, to_px(q4), stroke=color))
        parts.append(_line(cx - 10, to_px(q0), cx + 10, to_px(q0), stroke=color))
        parts.append(_line(cx - 10, to_px(q4), cx + 10, to_px(q4), stroke=color))
        parts.append(
            _rect(cx - box_w / 2, to_px(q3), box_w, max(to_px(q1) - to_px(q3), 0.0), "#ffffff",
                  stroke=color)
        )
        parts.append(_line(cx - box_w / 2, to_px(q2), cx + box_w / 2, to_px(q2), stroke=color, width=2))
        label = _fmt3(q2)
        parts.append(
            _text(cx, to_px(q4) - 8, label, size=10,
                  extra={"data-method": m, "data-stat": "median", "data-value": label})
        )
        parts.append(_text(cx, height - bottom + 18, m, size=10, rotate=-30))
    return _svg(width, height, "".join(parts))


def _render_line_by_size(cells: list[CellResult], methods: list[str]) -> str:
    sizes = sorted({c.config.n_total for c in cells})
    stats: dict[str, dict[int, tuple[float, float]]] = {}
    for m in methods:
        per = {}
        for n in sizes:
            vals = [
                c.auc_overall
                for c in cells
                if c.method == m and c.config.n_total == n and c.auc_overall is not None
            ]
            if vals:
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                per[n] = (float(np.mean(vals)), std)
        if per:
            stats[m] = per
    if not stats:
        raise PlotError("no auc_overall values to plot")
    methods = [m for m in methods if m in stats]

    left, top, right, bottom = 72, 48, 150, 56
    plot_w, plot_h = 440, 280
    width = left + plot_w + right
    height = top + plot_h + bottom
    y0, y1 = top + plot_h, top

    lo = min(mu - sd for per in stats.values() for mu, sd in per.values())
    hi = max(mu + sd for per in stats.values() for mu, sd in per.values())
    to_px, lo, hi = _y_scale(lo, hi, y0, y1)

    if len(sizes) > 1:
        smin, smax = sizes[0], sizes[-1]
        to_x = lambda n: left + plot_w * (n - smin) / (smax - smin)
    else:
        to_x = lambda n: left + plot_w / 2

    parts = [_text(width / 2, 24, "auc_overall vs dataset size (band: +/- 1 std)", size=14)]
    _y_axis(parts, to_px, lo, hi, left, left + plot_w)
    for n in sizes:
        parts.append(_text(to_x(n), y0 + 18, str(n), size=10))
    parts.append(_text(left + plot_w / 2, height - 14, "dataset size", size=12))

    for k, m in enumerate(methods):
        color = _METHOD_COLORS.get(m, "#888888")
        pts = [(to_x(n), stats[m][n]) for n in sizes if n in stats[m]]
        upper = " ".join(f"{x:.1f},{to_px(mu + sd):.1f}" for x, (mu, sd) in pts)
        lower = " ".join(f"{x:.1f},{to_px(mu - sd):.1f}" for x, (mu, sd) in reversed(pts))
        parts.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.15"/>')
        path = " ".join(f"{'M' if i == 0 else 'L'}{x:.1f},{to_px(mu):.1f}" for i, (x, (mu, _)) in enumerate(pts))
        parts.append(f'<path d="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for (x, (mu, _)), n in zip(pts, [n for n in sizes if n in stats[m]]):
            parts.append(f'<circle cx="{x:.1f}" cy="{to_px(mu):.1f}" r="2.5" fill="{color}"/>')
            label = _fmt3(mu)
            parts.append(
                _text(x, to_px(mu) - 8, label, size=9,
                      extra={"data-method": m, "data-size": str(n), "data-value": label})
            )
        ly = top + 16 * k
        parts.append(_rect(left + plot_w + 16, ly - 8, 10, 10, _METHOD_COLORS.get(m, "#888888"), stroke="none"))
        parts.append(_text(left + plot_w + 32, ly + 1, m, size=10, anchor="start"))
    return _svg(width, height, "".join(parts))


def _render_subpop_bars(cells: list[CellResult], methods: list[str]) -> str:
    slices = (("selected", "auc_selected"), ("nonselected", "auc_nonselected"), ("overall", "auc_overall"))
    means: dict[str, dict[str, float]] = {}
    for m in methods:
        per = {}
        for label, field in slices:
            vals = [getattr(c, field) for c in cells if c.method == m and getattr(c, field) is not None]
            if vals:
                per[label] = float(np.mean(vals))
        if per:
            means[m] = per
    if not means:
        raise PlotError("no AUC values to plot")
    methods = [m for m in methods if m in means]

    bar_w, gap = 16, 4
    group_w = 3 * bar_w + 2 * gap + 26
    left, top, bottom = 72, 64, 56
    width = left + group_w * len(methods) + 24
    height = 380
    y0, y1 = height - bottom, top
    to_px, lo, hi = _y_scale(0.0, 1.0, y0, y1)

    parts = [_text(width / 2, 24, "mean AUC by test slice", size=14)]
    _y_axis(parts, to_px, lo, hi, left, width - 24)
    for k, (label, _) in enumerate(slices):
        lx = left + 120 * k
        parts.append(_rect(lx, 34, 10, 10, _SLICE_COLORS[label], stroke="none"))
        parts.append(_text(lx + 16, 43, label, size=10, anchor="start"))

    for k, m in enumerate(methods):
        gx = left + group_w * k + 13
        for b, (label, _) in enumerate(slices):
            if label not in means[m]:
                continue
            v = means[m][label]
            x = gx + b * (bar_w + gap)
            parts.append(
                _rect(x, to_px(v), bar_w, y0 - to_px(v), _SLICE_COLORS[label], stroke="none",
                      extra={"data-method": m, "data-slice": label})
            )
            vl = _fmt3(v)
            parts.append(
                _text(x + bar_w / 2 + 3, to_px(v) - 5, vl, size=9, anchor="start", rotate=-90,
                      extra={"data-method": m, "data-slice": label, "data-value": vl})
            )
        parts.append(_text(gx + (3 * bar_w + 2 * gap) / 2, y0 + 18, m, size=10, rotate=-30))
    return _svg(width, height, "".join(parts))
