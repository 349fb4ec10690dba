"""Minimal SVG writer for TEB projections and planned/tracked trajectories."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .grid import GridSpec

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class Canvas:
    """World-to-pixel mapping with y pointing up; elements are appended as SVG strings."""

    def __init__(self, lo, hi, width: int = 480, pad: int = 40):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        span = self.hi - self.lo
        self.scale = (width - 2 * pad) / span[0]
        self.pad = pad
        self.width = width
        self.height = int(round(span[1] * self.scale + 2 * pad))
        self.items: list[str] = []

    def px(self, x, y) -> tuple[float, float]:
        return (
            round(self.pad + (x - self.lo[0]) * self.scale, 3),
            round(self.height - self.pad - (y - self.lo[1]) * self.scale, 3),
        )

    def rect(self, x0, y0, x1, y1, fill="none", stroke="black", opacity=1.0, width=1.0):
        a = self.px(x0, y1)
        b = self.px(x1, y0)
        self.items.append(
            f'<rect x="{a[0]}" y="{a[1]}" width="{round(b[0] - a[0], 3)}" height="{round(b[1] - a[1], 3)}" '
            f'fill="{fill}" fill-opacity="{opacity}" stroke="{stroke}" stroke-width="{width}"/>'
        )

    def cells(self, spec: GridSpec, mask: np.ndarray, fill: str, opacity: float = 0.5, dx: float = 0.0, dy: float = 0.0):
        """One square per true cell of a 2-D mask, centred on its node."""
        hx, hy = spec.spacing[0] / 2, spec.spacing[1] / 2
        xs, ys = spec.axis(0), spec.axis(1)
        for i, j in zip(*np.nonzero(mask)):
            x, y = xs[i] + dx, ys[j] + dy
            self.rect(x - hx, y - hy, x + hx, y + hy, fill=fill, stroke="none", opacity=opacity)

    def polyline(self, pts, stroke="black", width=1.5, dash: str | None = None):
        if len(pts) < 2:
            return
        coords = " ".join(f"{a},{b}" for a, b in (self.px(x, y) for x, y in pts))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{width}"{extra}/>')

    def circle(self, x, y, r_px=2.5, fill="none", stroke="black"):
        c = self.px(x, y)
        self.items.append(f'<circle cx="{c[0]}" cy="{c[1]}" r="{r_px}" fill="{fill}" stroke="{stroke}"/>')

    def text(self, x_px, y_px, s, size=12, color="black"):
        self.items.append(f'<text x="{x_px}" y="{y_px}" font-size="{size}" font-family="sans-serif" fill="{color}">{escape(s)}</text>')

    def axes(self, xlabel="x (m)", ylabel="y (m)"):
        self.rect(*self.lo, *self.hi, stroke="#444")
        self.text(self.pad, self.height - 8, f"{xlabel}: [{self.lo[0]:g}, {self.hi[0]:g}]", size=11)
        self.text(4, 14, f"{ylabel}: [{self.lo[1]:g}, {self.hi[1]:g}]", size=11)

    def render(self) -> str:
        body = "\n".join(self.items)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def teb_comparison(tebs: dict, ys=(0.0, 0.6)) -> str:
    """Planar TEB projections of several cases at a few global y values.

    ``tebs`` maps a case label to a :class:`~gpteb.hji.Teb`; each (case, y)
    pair gets its own colour and legend entry with the projected area.
    """
    planes = [t.plane for t in tebs.values()]
    lo = np.min([p.lo for p in planes], axis=0)
    hi = np.max([p.hi for p in planes], axis=0)
    cv = Canvas(lo, hi)
    cv.axes("x_r (m)", "y_r (m)")
    k = 0
    line = 0
    for name, teb in tebs.items():
        for y in ys:
            mask = teb.projection_at(y)
            color = PALETTE[k % len(PALETTE)]
            cv.cells(teb.plane, mask, color, opacity=0.3)
            line += 1
            cv.text(cv.width - 210, 14 * line, f"{name}, y={y:g}: area {teb.area(y):.3f} m^2", size=11, color=color)
            k += 1
    return cv.render()


def trajectory_figure(workspace, blocked: np.ndarray | None, plan=None, log=None, title: str = "") -> str:
    """Workspace with obstacles, augmented cells, goal, planned points and the tracked path."""
    cv = Canvas(workspace.lo, workspace.hi)
    cv.axes()
    if blocked is not None:
        cv.cells(workspace.lattice, blocked & ~workspace.obstacle_mask, "#ff9999", opacity=0.6)
    cv.cells(workspace.lattice, workspace.obstacle_mask, "#222222", opacity=0.8)
    for (x0, y0), (x1, y1) in workspace.obstacles:
        cv.rect(x0, y0, x1, y1, stroke="black", width=1.5)
    (gx0, gy0), (gx1, gy1) = workspace.goal
    cv.rect(gx0, gy0, gx1, gy1, fill="#2ca02c", stroke="#2ca02c", opacity=0.35)
    if plan is not None and len(plan.points):
        for x, y in plan.points:
            cv.circle(x, y, 2.5, stroke="#1f77b4")
    if log is not None and log.s:
        cv.polyline([(s[0], s[1]) for s in log.s], stroke="#8b0000", width=1.8)
    if title:
        cv.text(cv.pad, 16, title, size=13)
    return cv.render()
