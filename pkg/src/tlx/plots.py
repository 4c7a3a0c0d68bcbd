"""Deterministic SVG 1.1 renderings: stacked beats over cluster bands,
correlation heatmaps, keypoint frequency bars, phase and uncertainty grids.

No timestamps or randomness anywhere, so identical inputs give byte-identical
files. Band opacity encodes certainty: 1 - u / ln K, zero at uniform entropy.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .explain import Explanation

# fixed qualitative palette; cluster i draws palette[i mod 20]
PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    "#1f77b4", "#aec7e8", "#2ca02c", "#98df8a", "#d62728",
    "#ff9896", "#9467bd", "#c5b0d5", "#8c564b", "#c49c94",
)


def cluster_color(k: int, palette: tuple = PALETTE) -> str:
    return palette[k % len(palette)]


def band_opacity(u: float, K: int) -> float:
    """1 at a certain assignment, 0 at uniform entropy ln K."""
    if K < 2:
        raise ConfigError("opacity needs K >= 2")
    return float(np.clip(1.0 - u / math.log(K), 0.0, 1.0))


def _f(v: float) -> str:
    return f"{v:.2f}"


def _svg(width: float, height: float, body: list) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{_f(width)}" height="{_f(height)}" '
            f'viewBox="0 0 {_f(width)} {_f(height)}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _rect(x, y, w, h, fill, opacity=None, extra=""):
    op = f' fill-opacity="{_f(opacity)}"' if opacity is not None else ""
    return (f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
            f'fill="{fill}"{op}{extra}/>')


def _text(x, y, s, size=10, anchor="start", fill="#333333"):
    return (f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}" '
            f'fill="{fill}">{s}</text>')


def _polyline(points, stroke="#111111", width=1.0):
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points)
    return (f'<polyline points="{pts}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_f(width)}"/>')


# ---------------------------------------------------------------------------
# Stacked beats over cluster bands
# ---------------------------------------------------------------------------

def stacked_beat_svg(ecg, explanation: Explanation, r_peaks: list,
                     window_ms: tuple = (300.0, 500.0), lead: int = 1,
                     palette: tuple = PALETTE, opacity_from_entropy: bool = True,
                     ) -> str:
    """One row per R peak: the beat trace drawn over its cluster bands.

    Bands come from the explanation cells that overlap the beat window; band
    opacity falls with assignment entropy when opacity_from_entropy is set.
    """
    fs = ecg.fs
    L = ecg.samples.shape[0]
    n_before = int(round(window_ms[0] * fs / 1000.0))
    n_after = int(round(window_ms[1] * fs / 1000.0))
    win = n_before + n_after
    rows = [int(r) for r in r_peaks if r - n_before >= 0 and r + n_after <= L]
    if not rows:
        raise ConfigError("no beat window fits inside the record")
    K = explanation.assignment.probs.shape[1]
    row_h, plot_w, left = 44.0, 440.0, 46.0
    height = 16.0 + row_h * len(rows) + 8.0
    body = [_rect(0, 0, left + plot_w + 10, height, "#ffffff")]
    traces = ecg.samples[:, lead].astype(np.float64)
    lo = min(traces[r - n_before:r + n_after].min() for r in rows)
    hi = max(traces[r - n_before:r + n_after].max() for r in rows)
    span = (hi - lo) or 1.0

    for row_i, r in enumerate(rows):
        y0 = 16.0 + row_i * row_h
        a, b = r - n_before, r + n_after
        body.append(f'<g class="beat-row" id="beat{row_i}">')
        for j, (c0, c1) in enumerate(explanation.timeline):
            s, e = max(a, c0), min(b, c1)
            if s >= e:
                continue
            k = int(explanation.labels[j])
            op = band_opacity(float(explanation.entropy[j]), K) \
                if opacity_from_entropy else 1.0
            body.append(_rect(left + (s - a) / win * plot_w, y0,
                              (e - s) / win * plot_w, row_h - 4,
                              cluster_color(k, palette), opacity=op))
        pts = [(left + i / win * plot_w,
                y0 + (row_h - 4) * (1.0 - (traces[a + i] - lo) / span))
               for i in range(win)]
        body.append(_polyline(pts))
        body.append(_text(4, y0 + row_h / 2, f"beat {row_i}", size=9))
        body.append("</g>")
    return _svg(left + plot_w + 10, height, body)


# ---------------------------------------------------------------------------
# Correlation heatmap
# ---------------------------------------------------------------------------

def _diverging(r: float) -> str:
    """Blue (-1) through white (0) to red (+1)."""
    r = float(np.clip(r, -1.0, 1.0))
    if r >= 0:
        g = int(round(255 * (1 - r)))
        return f"#ff{g:02x}{g:02x}"
    g = int(round(255 * (1 + r)))
    return f"#{g:02x}{g:02x}ff"


def correlation_heatmap_svg(report, alpha: float = 0.05) -> str:
    """Outcome x cluster grid colored by r; a dot marks p > alpha cells."""
    n_out, K = report.r.shape
    cell, left, top = 22.0, 90.0, 24.0
    width = left + K * cell + 10
    height = top + n_out * cell + 10
    body = [_rect(0, 0, width, height, "#ffffff")]
    for k in range(K):
        body.append(_text(left + (k + 0.5) * cell, top - 8, str(k), size=8,
                          anchor="middle"))
    for i in range(n_out):
        y = top + i * cell
        body.append(_text(left - 6, y + cell * 0.65, str(report.outcome_names[i]),
                          size=9, anchor="end"))
        for k in range(K):
            x = left + k * cell
            fill = "#dddddd" if report.degenerate[i, k] else _diverging(report.r[i, k])
            body.append(_rect(x, y, cell - 1, cell - 1, fill))
            if report.degenerate[i, k] or report.p[i, k] > alpha:
                body.append(f'<circle cx="{_f(x + cell / 2)}" cy="{_f(y + cell / 2)}" '
                            f'r="2.00" fill="#333333"/>')
    return _svg(width, height, body)


# ---------------------------------------------------------------------------
# Keypoint frequency bars
# ---------------------------------------------------------------------------

def keypoint_bar_svg(freq: dict, palette: tuple = PALETTE) -> str:
    """Grid of bars, one row per cluster, one column per keypoint.

    The TP column is drawn on a 0-1 scale; the point keypoints on 0-0.5 so
    small local frequencies stay visible.
    """
    columns = freq["columns"]
    table = np.asarray(freq["table"], dtype=np.float64)
    K, Q = table.shape
    cell_w, cell_h, left, top = 34.0, 30.0, 64.0, 26.0
    width = left + Q * cell_w + 10
    height = top + K * cell_h + 10
    body = [_rect(0, 0, width, height, "#ffffff")]
    for q, name in enumerate(columns):
        body.append(_text(left + (q + 0.5) * cell_w, top - 8, name, size=7,
                          anchor="middle"))
    for k in range(K):
        y = top + k * cell_h
        body.append(_text(left - 6, y + cell_h * 0.65, f"cluster {k}", size=8,
                          anchor="end"))
        for q, name in enumerate(columns):
            scale = 1.0 if name == "TP" else 0.5
            v = float(np.clip(table[k, q] / scale, 0.0, 1.0))
            x = left + q * cell_w
            body.append(_rect(x + 2, y, cell_w - 6, cell_h - 4, "#f0f0f0"))
            if v > 0:
                bar_h = (cell_h - 4) * v
                body.append(_rect(x + 2, y + (cell_h - 4) - bar_h, cell_w - 6,
                                  bar_h, cluster_color(k, palette)))
    return _svg(width, height, body)


# ---------------------------------------------------------------------------
# Sequential heatmaps (phase frequencies, uncertainty by phase)
# ---------------------------------------------------------------------------

def _sequential(v: float) -> str:
    v = float(np.clip(v, 0.0, 1.0))
    r = int(round(255 - 177 * v))
    g = int(round(255 - 134 * v))
    b = int(round(255 - 88 * v))
    return f"#{r:02x}{g:02x}{b:02x}"


def grid_heatmap_svg(row_names: list, col_names: list, values: np.ndarray,
                     vmin: float | None = None, vmax: float | None = None,
                     absent: np.ndarray | None = None) -> str:
    """Generic labeled heatmap; NaN or masked cells draw gray."""
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    lo = vmin if vmin is not None else (finite.min() if finite.size else 0.0)
    hi = vmax if vmax is not None else (finite.max() if finite.size else 1.0)
    span = (hi - lo) or 1.0
    n_r, n_c = values.shape
    cell, left, top = 30.0, 84.0, 24.0
    width = left + n_c * cell + 10
    height = top + n_r * cell + 10
    body = [_rect(0, 0, width, height, "#ffffff")]
    for c, name in enumerate(col_names):
        body.append(_text(left + (c + 0.5) * cell, top - 8, str(name), size=8,
                          anchor="middle"))
    for r_i, name in enumerate(row_names):
        y = top + r_i * cell
        body.append(_text(left - 6, y + cell * 0.65, str(name), size=9,
                          anchor="end"))
        for c in range(n_c):
            v = values[r_i, c]
            masked = (absent is not None and absent[r_i, c]) or not np.isfinite(v)
            fill = "#dddddd" if masked else _sequential((v - lo) / span)
            body.append(_rect(left + c * cell, y, cell - 1, cell - 1, fill))
    return _svg(width, height, body)


def phase_heatmap_svg(freq: dict) -> str:
    table = np.asarray(freq["table"], dtype=np.float64)
    rows = [f"cluster {k}" for k in range(table.shape[0])]
    return grid_heatmap_svg(rows, freq["columns"], table, vmin=0.0, vmax=1.0)


def uncertainty_heatmap_svg(by_phase: dict) -> str:
    """Phase rows x outcome-group columns of mean transformed entropy."""
    if not by_phase:
        raise ConfigError("no phase data to plot")
    groups: list = []
    for grp in by_phase.values():
        for g in grp:
            if g not in groups:
                groups.append(g)
    groups.sort(key=lambda g: (0, g, "") if isinstance(g, (int, float))
                else (1, int(str(g).split("-")[0]), str(g)))
    phases = list(by_phase)
    values = np.full((len(phases), len(groups)), np.nan)
    for i, ph in enumerate(phases):
        for j, g in enumerate(groups):
            if g in by_phase[ph]:
                values[i, j] = by_phase[ph][g]
    return grid_heatmap_svg(phases, groups, values, vmin=0.0, vmax=1.0)


# ---------------------------------------------------------------------------
# Saliency track (Grad-CAM comparison)
# ---------------------------------------------------------------------------

def saliency_svg(ecg, explanation: Explanation, saliency: np.ndarray,
                 lead: int = 1, palette: tuple = PALETTE) -> str:
    """Two aligned tracks: cluster bands and a red saliency band, with the
    lead trace over each, for eyeballing where attribution mass sits."""
    saliency = np.asarray(saliency, dtype=np.float64).ravel()
    D = explanation.D
    if saliency.size != D:
        raise ConfigError(f"saliency length {saliency.size} != {D} cells")
    L = ecg.samples.shape[0]
    trace = ecg.samples[:, lead].astype(np.float64)
    lo, hi = trace.min(), trace.max()
    span = (hi - lo) or 1.0
    K = explanation.assignment.probs.shape[1]

    plot_w, row_h, left = 520.0, 80.0, 70.0
    height = 16.0 + 2 * row_h + 10
    body = [_rect(0, 0, left + plot_w + 10, height, "#ffffff")]
    smax = saliency.max() or 1.0
    for track, y0 in (("clusters", 16.0), ("saliency", 16.0 + row_h)):
        body.append(_text(left - 6, y0 + row_h / 2, track, size=9, anchor="end"))
        for j, (c0, c1) in enumerate(explanation.timeline):
            x = left + c0 / L * plot_w
            w = (c1 - c0) / L * plot_w
            if track == "clusters":
                op = band_opacity(float(explanation.entropy[j]), K)
                body.append(_rect(x, y0, w, row_h - 8,
                                  cluster_color(int(explanation.labels[j]), palette),
                                  opacity=op))
            else:
                body.append(_rect(x, y0, w, row_h - 8, "#d62728",
                                  opacity=float(saliency[j] / smax)))
        step = max(1, L // 2000)
        pts = [(left + i / L * plot_w,
                y0 + (row_h - 8) * (1.0 - (trace[i] - lo) / span))
               for i in range(0, L, step)]
        body.append(_polyline(pts, width=0.8))
    return _svg(left + plot_w + 10, height, body)
