"""Static SVG figures written as plain text (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
           "#7f7f7f", "#bcbd22")


class _Frame:
    """Maps data coordinates to an SVG canvas with equal or free aspect."""

    def __init__(self, xlim, ylim, width=720, height=540, pad=50, equal=True):
        self.pad = pad
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        w, h = width - 2 * pad, height - 2 * pad
        sx = w / max(self.x1 - self.x0, 1e-9)
        sy = h / max(self.y1 - self.y0, 1e-9)
        if equal:
            sx = sy = min(sx, sy)
        self.sx, self.sy = sx, sy
        self.width = int(round(2 * pad + sx * (self.x1 - self.x0)))
        self.height = int(round(2 * pad + sy * (self.y1 - self.y0)))

    def px(self, x):
        return self.pad + (x - self.x0) * self.sx

    def py(self, y):
        return self.height - self.pad - (y - self.y0) * self.sy


def _num(v: float) -> str:
    return f"{v:.2f}"


def _polyline(frame, xs, ys, color, width=1.5, dash=None) -> str:
    pts = " ".join(f"{_num(frame.px(x))},{_num(frame.py(y))}" for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'


def _circle(frame, cx, cy, r, stroke, fill="none", dash=None, opacity=1.0) -> str:
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<circle cx="{_num(frame.px(cx))}" cy="{_num(frame.py(cy))}" r="{_num(r * frame.sx)}" '
            f'stroke="{stroke}" fill="{fill}" fill-opacity="{opacity}"{extra}/>')


def _axes(frame, xlabel, ylabel) -> list:
    left, right = frame.pad, frame.width - frame.pad
    top, bottom = frame.pad, frame.height - frame.pad
    out = [f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="#444"/>']
    for v in np.linspace(frame.x0, frame.x1, 6):
        x = _num(frame.px(v))
        out.append(f'<text x="{x}" y="{bottom + 16}" font-size="11" text-anchor="middle">{v:.4g}</text>')
    for v in np.linspace(frame.y0, frame.y1, 6):
        y = _num(frame.py(v))
        out.append(f'<text x="{left - 6}" y="{y}" font-size="11" text-anchor="end">{v:.4g}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{frame.height - 8}" font-size="12" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{(top + bottom) / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {(top + bottom) / 2})">{ylabel}</text>')
    return out


def _document(frame, body, title) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width}" height="{frame.height}" '
            f'viewBox="0 0 {frame.width} {frame.height}">')
    caption = f'<text x="{frame.width / 2}" y="20" font-size="14" text-anchor="middle">{title}</text>'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', caption, *body, "</svg>"]) + "\n"


def trajectory_svg(trajectories, scenario, title="trajectories") -> str:
    pos = [np.asarray(t.states)[:, :2] for t in trajectories]
    pts = np.concatenate(pos)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    for o in scenario.obstacles:
        r = o.radius_m + scenario.d_obstacle_safe
        lo = np.minimum(lo, o.center - r)
        hi = np.maximum(hi, o.center + r)
    margin = 0.05 * max(hi - lo) + 1.0
    frame = _Frame((lo[0] - margin, hi[0] + margin), (lo[1] - margin, hi[1] + margin))
    body = _axes(frame, "x [m]", "y [m]")
    for o in scenario.obstacles:
        body.append(_circle(frame, o.center[0], o.center[1], o.radius_m + scenario.d_obstacle_safe,
                            "#999", fill="#ccc", dash="4 3", opacity=0.3))
        body.append(_circle(frame, o.center[0], o.center[1], o.radius_m, "#333", fill="#666", opacity=0.6))
    for i, p in enumerate(pos):
        color = PALETTE[i % len(PALETTE)]
        body.append(_circle(frame, p[0, 0], p[0, 1], scenario.d_comm, color, dash="2 6", opacity=0.0))
        body.append(_polyline(frame, p[:, 0], p[:, 1], color))
        body.append(f'<circle cx="{_num(frame.px(p[0, 0]))}" cy="{_num(frame.py(p[0, 1]))}" r="3" fill="{color}"/>')
        body.append(f'<text x="{_num(frame.px(p[-1, 0]) + 4)}" y="{_num(frame.py(p[-1, 1]))}" '
                    f'font-size="10" fill="{color}">{i}</text>')
    return _document(frame, body, title)


def time_convergence_svg(iteration_trace, title="final times") -> str:
    if not iteration_trace:
        frame = _Frame((0, 1), (0, 1), equal=False)
        return _document(frame, _axes(frame, "iteration", "t_N [s]"), title)
    its = np.array([row["iteration"] for row in iteration_trace], dtype=float)
    times = np.array([row["times"] for row in iteration_trace], dtype=float)
    lo, hi = float(times.min()), float(times.max())
    span = max(hi - lo, 1e-3)
    frame = _Frame((its[0], max(its[-1], its[0] + 1)), (lo - 0.05 * span, hi + 0.05 * span), equal=False)
    body = _axes(frame, "iteration", "t_N [s]")
    for i in range(times.shape[1]):
        body.append(_polyline(frame, its, times[:, i], PALETTE[i % len(PALETTE)], width=1.2))
    return _document(frame, body, title)


def write_svgs(out_dir, solution, scenario) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a = out / "trajectories.svg"
    a.write_text(trajectory_svg(solution.trajectories, scenario, f"{scenario.name}: trajectories"))
    b = out / "time_convergence.svg"
    b.write_text(time_convergence_svg(solution.iteration_trace, f"{scenario.name}: final times"))
    return [a, b]
