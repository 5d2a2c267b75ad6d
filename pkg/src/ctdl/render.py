"""Figure data for explanations: grid-world SVG/ASCII and mountain-car CSV.

Grid cells are drawn with y growing upwards, so the start (0, 0) sits in the
bottom-left corner. Each explanation entry becomes a star on the cell its
memory rounds to, with a glyph for the stored action.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from . import env as envs
from .errors import ConfigurationError, ExplanationFormatError

CELL = 40
ARROWS = {envs.UP: "↑", envs.DOWN: "↓", envs.LEFT: "←", envs.RIGHT: "→"}
ASCII_ARROWS = {envs.UP: "^", envs.DOWN: "v", envs.LEFT: "<", envs.RIGHT: ">"}


@dataclass
class GridRendering:
    svg: str
    ascii: str
    stars: list = field(default_factory=list)  # [(x, y, action)] in entry order


def _entry_cell(spec: envs.GridWorldSpec, entry, index: int) -> tuple[int, int]:
    raw = envs.denormalize(spec, entry.memory)
    cell = tuple(int(round(v)) for v in raw)
    if len(cell) != 2 or not spec.in_bounds(cell):
        raise ExplanationFormatError(f"state {tuple(float(v) for v in raw)} lies outside the "
                                     f"{spec.width}x{spec.height} grid", f"entries[{index}].state_norm")
    return cell


def _trace_cells(trace) -> list[tuple[int, int]]:
    if trace is None:
        return []
    steps = getattr(trace, "steps", trace)
    cells = []
    for s in steps:
        state = getattr(s, "state", s)
        cells.append(tuple(int(round(float(v))) for v in state))
    return cells


def _star_path(cx: float, cy: float, r_out: float, r_in: float) -> str:
    pts = []
    for k in range(10):
        r = r_out if k % 2 == 0 else r_in
        ang = -math.pi / 2 + k * math.pi / 5
        pts.append(f"{cx + r * math.cos(ang):.2f},{cy + r * math.sin(ang):.2f}")
    return " ".join(pts)


def render_gridworld(spec: envs.GridWorldSpec, explanation, trace=None) -> GridRendering:
    if not isinstance(spec, envs.GridWorldSpec):
        raise ConfigurationError("render_gridworld needs a grid-world spec")
    entries = list(explanation.entries) if explanation is not None else []
    stars = [(*_entry_cell(spec, e, i), e.action) for i, e in enumerate(entries)]
    path = _trace_cells(trace)
    W, H = spec.width, spec.height

    def px(x, y):
        # centre of cell (x, y), y flipped so row 0 is at the bottom
        return (x + 0.5) * CELL, (H - 1 - y + 0.5) * CELL

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * CELL}" height="{H * CELL}" '
           f'viewBox="0 0 {W * CELL} {H * CELL}">',
           '<g id="grid">']
    for y in range(H):
        for x in range(W):
            out.append(f'<rect class="cell" x="{x * CELL}" y="{(H - 1 - y) * CELL}" width="{CELL}" '
                       f'height="{CELL}" fill="white" stroke="#999"/>')
    out.append("</g>")
    for (x, y) in sorted(spec.penalty_cells):
        out.append(f'<rect class="penalty" data-x="{x}" data-y="{y}" x="{x * CELL}" y="{(H - 1 - y) * CELL}" '
                   f'width="{CELL}" height="{CELL}" fill="#e57373"/>')
    for cls, (x, y), color in (("start", spec.start, "#64b5f6"), ("goal", spec.goal, "#81c784")):
        out.append(f'<rect class="{cls}" data-x="{x}" data-y="{y}" x="{x * CELL}" y="{(H - 1 - y) * CELL}" '
                   f'width="{CELL}" height="{CELL}" fill="{color}"/>')
    if path:
        pts = " ".join("{:.1f},{:.1f}".format(*px(x, y)) for x, y in path)
        out.append(f'<polyline class="trajectory" points="{pts}" fill="none" stroke="#333" '
                   'stroke-dasharray="4 3" stroke-width="2"/>')
    for i, (x, y, action) in enumerate(stars):
        cx, cy = px(x, y)
        glyph = ARROWS.get(action, "?") if isinstance(action, int) else f"{float(np.ravel(action)[0]):+.2f}"
        out.append(f'<polygon class="star" data-index="{i}" data-x="{x}" data-y="{y}" '
                   f'points="{_star_path(cx, cy, CELL * 0.42, CELL * 0.18)}" fill="#fdd835" stroke="#333"/>')
        out.append(f'<text class="action" data-index="{i}" x="{cx:.1f}" y="{cy + 5:.1f}" font-size="14" '
                   f'text-anchor="middle">{escape(glyph)}</text>')
    out.append("</svg>")
    return GridRendering("\n".join(out), _ascii(spec, stars, path), [(x, y, a) for x, y, a in stars])


def _ascii(spec: envs.GridWorldSpec, stars, path) -> str:
    grid = [["." for _ in range(spec.width)] for _ in range(spec.height)]
    for x, y in path:
        if spec.in_bounds((x, y)):
            grid[y][x] = "o"
    for x, y in spec.penalty_cells:
        grid[y][x] = "X"
    grid[spec.start[1]][spec.start[0]] = "S"
    grid[spec.goal[1]][spec.goal[0]] = "G"
    for x, y, action in stars:
        grid[y][x] = ASCII_ARROWS.get(action, "*") if isinstance(action, int) else "*"
    rows = ["".join(r) for r in reversed(grid)]
    legend = "S start  G goal  X penalty  o trajectory  ^v<> explanation entry (action)"
    return "\n".join(rows + [legend])


def export_mc_plot_data(trace, explanation, spec: Optional[envs.MountainCarSpec] = None) -> str:
    """CSV text: a trajectory section then an explanation section.

    Explanation states are given in raw units when ``spec`` is known,
    otherwise as stored (normalized).
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["# trajectory"])
    w.writerow(["t", "position", "velocity", "action"])
    steps = [] if trace is None else getattr(trace, "steps", trace)
    for k, s in enumerate(steps):
        pos, vel = (float(v) for v in s.state)
        w.writerow([getattr(s, "t", k), repr(pos), repr(vel), repr(float(np.ravel(s.action)[0]))])
    w.writerow(["# explanation"])
    w.writerow(["position", "velocity", "action", "value", "beta"])
    for e in ([] if explanation is None else explanation.entries):
        state = envs.denormalize(spec, e.memory) if spec is not None else np.asarray(e.memory)
        w.writerow([repr(float(state[0])), repr(float(state[1])), repr(float(np.ravel(e.action)[0])),
                    repr(float(e.value)), repr(float(e.beta))])
    return buf.getvalue()


def write_text(text: str, path) -> None:
    with open(path, "w") as f:
        f.write(text)
