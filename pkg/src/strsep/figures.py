"""Dependency-free SVG line charts, each written next to a CSV of the plotted data."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .io import write_matrix_csv

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
PANEL_W, PANEL_H = 560, 220
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 140, 28, 36


@dataclass
class Panel:
    title: str
    x: np.ndarray
    series: dict[str, np.ndarray] = field(default_factory=dict)
    log_y: bool = False


@dataclass
class Figure:
    name: str
    panels: list[Panel]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def _panel_svg(panel: Panel, top: float) -> list[str]:
    x = np.asarray(panel.x, float)
    ys = {k: np.asarray(v, float) for k, v in panel.series.items()}
    if panel.log_y:
        ys = {k: np.log10(np.maximum(v, 1e-300)) for k, v in ys.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()]) if ys else np.array([0.0])
    y_lo, y_hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0
    w = PANEL_W - MARGIN_L - MARGIN_R
    h = PANEL_H - MARGIN_T - MARGIN_B
    left, base = MARGIN_L, top + MARGIN_T

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * w

    def py(v):
        return base + h - (v - y_lo) / (y_hi - y_lo) * h

    out = [f'<text x="{left}" y="{top + 18}" font-size="13" font-weight="bold">{escape(panel.title)}</text>',
           f'<rect x="{left}" y="{base}" width="{w}" height="{h}" fill="none" stroke="#444"/>']
    for t in _ticks(y_lo, y_hi):
        label = _fmt(10 ** t) if panel.log_y else _fmt(t)
        out.append(f'<line x1="{left - 4}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.2f}" font-size="10" text-anchor="end">{label}</text>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{px(t):.2f}" y="{base + h + 14}" font-size="10" text-anchor="middle">{_fmt(t)}</text>')
    for i, (name, y) in enumerate(ys.items()):
        color = PALETTE[i % len(PALETTE)]
        ok = np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.3" points="{pts}"/>')
        ly = base + 12 + 14 * i
        out.append(f'<line x1="{left + w + 10}" y1="{ly - 4}" x2="{left + w + 26}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + w + 30}" y="{ly}" font-size="10">{escape(name)}</text>')
    return out


def render_svg(fig: Figure) -> str:
    height = PANEL_H * len(fig.panels)
    body = []
    for i, panel in enumerate(fig.panels):
        body.extend(_panel_svg(panel, i * PANEL_H))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" '
            f'viewBox="0 0 {PANEL_W} {height}" font-family="sans-serif">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def figure_table(fig: Figure) -> tuple[np.ndarray, list[str]]:
    """All panels share the x axis of the first panel; columns are ``panel:series``."""
    x = np.asarray(fig.panels[0].x, float)
    cols, header = [x], ["x"]
    for panel in fig.panels:
        if len(panel.x) != len(x) or not np.array_equal(np.asarray(panel.x, float), x):
            raise ValueError("panels of one figure must share the x axis")
        for name, y in panel.series.items():
            cols.append(np.asarray(y, float))
            header.append(f"{panel.title}:{name}".replace(",", ";"))
    return np.column_stack(cols), header


def write_figure(fig: Figure, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    svg_path, csv_path = out_dir / f"{fig.name}.svg", out_dir / f"{fig.name}.csv"
    table, header = figure_table(fig)
    write_matrix_csv(table, csv_path, header=header)
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_svg(fig))
    return svg_path, csv_path


# ---------------------------------------------------------------------------
# the three figure groups
# ---------------------------------------------------------------------------

def _column(records, key):
    return np.array([r[key] for r in records], dtype=float)


def _per_branch(records, key, label):
    arr = np.array([r[key] for r in records], dtype=float)
    return {f"{label}{k + 1}": arr[:, k] for k in range(arr.shape[1])}


def training_figure(records: list[dict]) -> Figure:
    it = _column(records, "iter")
    losses = {name: _column(records, f"loss_{name}")
              for name in ("total", "rec", "str", "sep", "smooth")}
    panels = [Panel("losses (log10)", it, {k: np.abs(v) for k, v in losses.items()}, log_y=True),
              Panel("per-branch structural loss (log10)", it,
                    _per_branch(records, "branch_str", "branch "), log_y=True)]
    if all("mac" in r for r in records):
        panels.append(Panel("MAC", it, {"MAC": _column(records, "mac")}))
        panels.append(Panel("matched correlation", it, _per_branch(records, "branch_corr", "branch ")))
    return Figure("fig_training", panels)


def structure_figure(records: list[dict]) -> Figure:
    it = _column(records, "iter")
    panels = [Panel("expected patch scale", it, _per_branch(records, "expected_scale", "branch ")),
              Panel("log-scale center", it, _per_branch(records, "center", "branch ")),
              Panel("locality slope", it, _per_branch(records, "alpha", "branch "), log_y=True)]
    if all("matched_index" in r for r in records):
        panels.append(Panel("matched reference index", it,
                            _per_branch(records, "matched_index", "branch ")))
    return Figure("fig_structure", panels)


def sources_figure(S_aligned: np.ndarray, X_ref: np.ndarray) -> Figure:
    S_aligned, X_ref = np.asarray(S_aligned, float), np.asarray(X_ref, float)
    if S_aligned.shape != X_ref.shape:
        raise ValueError("aligned estimates and references differ in shape")
    t = np.arange(S_aligned.shape[0], dtype=float)
    panels = [Panel(f"source {j + 1}", t, {"reference": X_ref[:, j], "estimate": S_aligned[:, j]})
              for j in range(S_aligned.shape[1])]
    return Figure("fig_sources", panels)
