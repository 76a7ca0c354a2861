"""Static SVG figures for scenario summaries.

One figure per (population, follow-up, max prior, n) group and metric, with
the prior-risk proportion on the x axis, one panel per coefficient, and one
series per model.  The SVG is self-contained: no external stylesheets or
fonts, and the plotted numbers are embedded as a CSV table inside an SVG
comment so a figure can be audited or re-plotted without rerunning anything.
"""

from __future__ import annotations

import math
from typing import Sequence

from .errors import DomainError
from .evaluate import ScenarioSummary, population_id
from .simulate import MODEL_CHFM_STRATA, MODEL_SHFMI_CP, MODEL_SHFMI_GT

__all__ = ["METRICS", "figure_svg", "figure_filename", "render_figures", "write_figures"]

METRICS = ("bias", "coverage", "ci_length")

_METRIC_LABEL = {
    "bias": "Relative bias (%)",
    "coverage": "Coverage of the 95% CI (%)",
    "ci_length": "Average 95% CI length",
}
_METRIC_FIELD = {
    "bias": "relative_bias",
    "coverage": "coverage",
    "ci_length": "avg_ci_length",
}
_REFERENCE = {"bias": 0.0, "coverage": 95.0, "ci_length": None}

_COLORS = {
    MODEL_SHFMI_CP: "#1f77b4",
    MODEL_SHFMI_GT: "#2ca02c",
    MODEL_CHFM_STRATA: "#d62728",
}
_FALLBACK_COLORS = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

# Panel geometry in pixels.
_PANEL_W, _PANEL_H = 250, 190
_MARGIN_L, _MARGIN_T, _GAP = 58, 52, 26
_MARGIN_B = 46


def _color(model: str, fallback_index: int) -> str:
    return _COLORS.get(model, _FALLBACK_COLORS[fallback_index % len(_FALLBACK_COLORS)])


def _fmt_tick(v: float) -> str:
    return f"{v:g}"


def _check_group(group: Sequence[ScenarioSummary]):
    if not group:
        raise DomainError("cannot plot an empty summary group")
    keys = {
        (population_id(s.config), s.config.follow_up_days,
         s.config.max_prior_days, s.config.n)
        for s in group
    }
    if len(keys) != 1:
        raise DomainError(
            "figure groups must share population, follow-up, max prior, and n; "
            f"got {sorted(map(str, keys))}"
        )
    return keys.pop()


def _series(group, metric):
    """Per model: sorted (prop_prior, value-per-coefficient) pairs."""
    field = _METRIC_FIELD[metric]
    models = []
    for s in group:
        for ms in s.models:
            if ms.model not in models:
                models.append(ms.model)
    ordered = sorted(group, key=lambda s: s.config.prop_prior)
    out = {}
    for model in models:
        pts = []
        for s in ordered:
            try:
                ms = s.model(model)
            except KeyError:
                continue
            pts.append((s.config.prop_prior, [float(v) for v in getattr(ms, field)]))
        out[model] = pts
    return out


def _scale(lo: float, hi: float, a: float, b: float):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo

    def to_px(v: float) -> float:
        return a + (v - lo) / span * (b - a)

    return to_px, lo, hi


def _y_ticks(lo: float, hi: float, n: int = 5):
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def figure_svg(group: Sequence[ScenarioSummary], metric: str) -> str:
    """Render one metric for one scenario group as an SVG document."""
    if metric not in METRICS:
        raise DomainError(f"unknown metric {metric!r}; choose from {METRICS}")
    pid, follow_up, max_prior, n = _check_group(group)
    series = _series(group, metric)
    n_coef = group[0].truth.size
    reference = _REFERENCE[metric]

    width = _MARGIN_L + n_coef * _PANEL_W + (n_coef - 1) * _GAP + 20
    height = _MARGIN_T + _PANEL_H + _MARGIN_B
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{_MARGIN_L}" y="20" font-family="sans-serif" font-size="14" '
        f'font-weight="bold">{_METRIC_LABEL[metric]}</text>',
        f'<text x="{_MARGIN_L}" y="37" font-family="sans-serif" font-size="11" '
        f'fill="#444">population {pid}, follow-up {follow_up} d, '
        f'max prior {max_prior} d, n={n}</text>',
    ]

    # shared scales across panels so curves are visually comparable
    props = sorted({s.config.prop_prior for s in group})
    values = [
        v
        for pts in series.values()
        for _, vals in pts
        for v in vals
        if math.isfinite(v)
    ]
    if reference is not None:
        values.append(reference)
    if not values:
        values = [0.0, 1.0]
    vlo, vhi = min(values), max(values)
    pad = 0.08 * (vhi - vlo) or 0.5
    plo, phi = (props[0], props[-1]) if len(props) > 1 else (props[0] - 0.1, props[0] + 0.1)
    xpad = 0.06 * (phi - plo)

    for j in range(n_coef):
        x0 = _MARGIN_L + j * (_PANEL_W + _GAP)
        y0 = _MARGIN_T
        x_px, _, _ = _scale(plo - xpad, phi + xpad, x0, x0 + _PANEL_W)
        y_px, ylo, yhi = _scale(vlo - pad, vhi + pad, y0 + _PANEL_H, y0)
        parts.append(
            f'<rect x="{x0}" y="{y0}" width="{_PANEL_W}" height="{_PANEL_H}" '
            f'fill="none" stroke="#333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x0 + _PANEL_W / 2:.1f}" y="{y0 - 6}" font-family="sans-serif" '
            f'font-size="12" text-anchor="middle">x{j + 1}</text>'
        )
        if reference is not None:
            ry = y_px(reference)
            parts.append(
                f'<line x1="{x0}" y1="{ry:.2f}" x2="{x0 + _PANEL_W}" y2="{ry:.2f}" '
                f'stroke="#888" stroke-width="1" stroke-dasharray="5,4"/>'
            )
        for t in _y_ticks(ylo, yhi):
            ty = y_px(t)
            parts.append(
                f'<line x1="{x0 - 4}" y1="{ty:.2f}" x2="{x0}" y2="{ty:.2f}" '
                f'stroke="#333" stroke-width="1"/>'
            )
            if j == 0:
                parts.append(
                    f'<text x="{x0 - 7}" y="{ty + 3.5:.2f}" font-family="sans-serif" '
                    f'font-size="10" text-anchor="end">{_fmt_tick(t)}</text>'
                )
        for pv in props:
            tx = x_px(pv)
            parts.append(
                f'<line x1="{tx:.2f}" y1="{y0 + _PANEL_H}" x2="{tx:.2f}" '
                f'y2="{y0 + _PANEL_H + 4}" stroke="#333" stroke-width="1"/>'
            )
            parts.append(
                f'<text x="{tx:.2f}" y="{y0 + _PANEL_H + 15}" font-family="sans-serif" '
                f'font-size="10" text-anchor="middle">{_fmt_tick(pv)}</text>'
            )
        parts.append(
            f'<text x="{x0 + _PANEL_W / 2:.1f}" y="{y0 + _PANEL_H + 32}" '
            f'font-family="sans-serif" font-size="11" text-anchor="middle">'
            f'proportion previously at risk</text>'
        )
        for i, (model, pts) in enumerate(series.items()):
            color = _color(model, i)
            finite = [(x_px(p), y_px(v[j])) for p, v in pts if math.isfinite(v[j])]
            if len(finite) > 1:
                path = " ".join(f"{px:.2f},{py:.2f}" for px, py in finite)
                parts.append(
                    f'<polyline points="{path}" fill="none" stroke="{color}" '
                    f'stroke-width="1.8"/>'
                )
            for px, py in finite:
                parts.append(
                    f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}"/>'
                )

    # legend in the top-right corner
    lx = width - 150
    for i, model in enumerate(series):
        ly = 14 + 14 * i
        color = _color(model, i)
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 23}" y="{ly + 3.5}" font-family="sans-serif" '
            f'font-size="11">{model}</text>'
        )

    # embedded data table for auditability
    data_lines = ["prop_prior,model,coefficient,value"]
    for model, pts in series.items():
        for p, vals in pts:
            for j, v in enumerate(vals, start=1):
                data_lines.append(f"{p!r},{model},{j},{v!r}")
    table = "\n".join(data_lines).replace("--", "- -")
    parts.append(f"<!--\n{table}\n-->")
    parts.append("</svg>")
    return "\n".join(parts)


def figure_filename(group: Sequence[ScenarioSummary], metric: str) -> str:
    pid, follow_up, max_prior, n = _check_group(group)
    return f"fig_{metric}_pop{pid}_fu{follow_up}_prior{max_prior}_n{n}.svg"


def render_figures(summaries: Sequence[ScenarioSummary]) -> dict:
    """Map of filename to SVG text, one entry per scenario group and metric."""
    groups = {}
    for s in summaries:
        key = (population_id(s.config), s.config.follow_up_days,
               s.config.max_prior_days, s.config.n)
        groups.setdefault(key, []).append(s)
    rendered = {}
    for key in sorted(groups, key=str):
        group = groups[key]
        for metric in METRICS:
            rendered[figure_filename(group, metric)] = figure_svg(group, metric)
    return rendered


def write_figures(summaries: Sequence[ScenarioSummary], out_dir) -> list:
    """One figure per metric and scenario group; returns the written paths."""
    from pathlib import Path

    out_dir = Path(out_dir)
    written = []
    for name, svg in render_figures(summaries).items():
        path = out_dir / name
        path.write_text(svg)
        written.append(path)
    return written
