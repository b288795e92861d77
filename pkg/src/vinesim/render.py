"""Deterministic SVG snapshots of a trajectory in its scene.

The view box is fixed over the whole trajectory so frames line up when
viewed in sequence. World y points up; the SVG group flips it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .constraints import contact_eval
from .environment import Circle, HalfPlane, RoundedPolygon, Scene
from .model import VineModel, endpoints, site_positions
from .stepper import Trajectory

CONTACT_TOLERANCE = 1e-4  # contact sites within this distance of an obstacle are highlighted


def frame_indices(count: int, stride: int) -> list[int]:
    """Every ``stride``-th frame starting at 0, always including the last one."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if count < 1:
        return []
    idx = list(range(0, count, stride))
    if idx[-1] != count - 1:
        idx.append(count - 1)
    return idx


def _fmt(x: float) -> str:
    return f"{x:.5f}".rstrip("0").rstrip(".") if np.isfinite(x) else "0"


def _bounds(model: VineModel, traj: Trajectory, scene: Scene, pad: float = 0.05):
    prox, dist = endpoints(model, traj.q)
    pts = np.concatenate([prox.reshape(-1, 2), dist.reshape(-1, 2)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    for ob in scene.obstacles:
        if isinstance(ob, Circle):
            c = np.asarray(ob.center)
            lo, hi = np.minimum(lo, c - ob.radius), np.maximum(hi, c + ob.radius)
        elif isinstance(ob, RoundedPolygon):
            v = np.asarray(ob.vertices)
            lo = np.minimum(lo, v.min(axis=0) - ob.corner_radius)
            hi = np.maximum(hi, v.max(axis=0) + ob.corner_radius)
    span = max(float(np.max(hi - lo)), 1e-3)
    return lo - pad * span, hi + pad * span


def _clip_half_plane(ob: HalfPlane, lo, hi) -> np.ndarray:
    """Polygon of the view rectangle lying inside the half-plane's solid."""
    box = [np.array(p, dtype=float) for p in [(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])]]
    nrm, p0 = np.asarray(ob.normal), np.asarray(ob.point)
    side = [float((p - p0) @ nrm) for p in box]
    out = []
    for i in range(4):
        a, b = box[i], box[(i + 1) % 4]
        sa, sb = side[i], side[(i + 1) % 4]
        if sa <= 0:
            out.append(a)
        if (sa < 0) != (sb < 0) and sa != sb:
            out.append(a + (b - a) * sa / (sa - sb))
    return np.array(out).reshape(-1, 2)


def _obstacle_svg(ob, lo, hi) -> str:
    style = 'fill="#c8ccd2" stroke="#6b7280" stroke-width="0.002"'
    if isinstance(ob, Circle):
        return f'<circle cx="{_fmt(ob.center[0])}" cy="{_fmt(ob.center[1])}" r="{_fmt(ob.radius)}" {style}/>'
    if isinstance(ob, HalfPlane):
        poly = _clip_half_plane(ob, lo, hi)
        if len(poly) < 3:
            return ""
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in poly)
        return f'<polygon points="{pts}" {style}/>'
    # a convex polygon dilated by a disc is the polygon stroked with round joins
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in ob.vertices)
    return (
        f'<polygon points="{pts}" fill="#c8ccd2" stroke="#c8ccd2" '
        f'stroke-width="{_fmt(2 * ob.corner_radius)}" stroke-linejoin="round"/>'
    )


def render_frame(model: VineModel, scene: Scene, q: np.ndarray, bounds, label: str = "") -> str:
    lo, hi = bounds
    w, h = hi - lo
    prox, dist = endpoints(model, q)
    chain = np.empty((2 * model.n, 2))
    chain[0::2], chain[1::2] = prox, dist
    line = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in chain)
    stroke = _fmt(0.004 * max(w, h))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="600" height="{_fmt(600 * h / w)}" '
        f'viewBox="{_fmt(lo[0])} {_fmt(-hi[1])} {_fmt(w)} {_fmt(h)}">',
        f'<rect x="{_fmt(lo[0])}" y="{_fmt(-hi[1])}" width="{_fmt(w)}" height="{_fmt(h)}" fill="white"/>',
        '<g transform="scale(1,-1)">',
    ]
    parts += [s for s in (_obstacle_svg(ob, lo, hi) for ob in scene.obstacles) if s]
    parts.append(f'<polyline points="{line}" fill="none" stroke="#2f6f3e" stroke-width="{stroke}" stroke-linejoin="round"/>')
    bx, by = model.base_position
    parts.append(f'<circle cx="{_fmt(bx)}" cy="{_fmt(by)}" r="{stroke}" fill="#111827"/>')
    if scene.obstacles and model.contact_sites:
        ce = contact_eval(model, scene, q)
        sites = site_positions(model, q)
        touching = sorted({p[0] for p, phi in zip(ce.pairs, ce.phi) if phi <= CONTACT_TOLERANCE})
        for s in touching:
            parts.append(
                f'<circle class="contact" cx="{_fmt(sites[s, 0])}" cy="{_fmt(sites[s, 1])}" '
                f'r="{_fmt(2 * float(stroke))}" fill="#dc2626"/>'
            )
    parts.append("</g>")
    if label:
        size = _fmt(0.04 * h)
        parts.append(f'<text x="{_fmt(lo[0] + 0.02 * w)}" y="{_fmt(-hi[1] + 0.06 * h)}" font-size="{size}" '
                     f'font-family="monospace">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_trajectory(model: VineModel, scene: Scene, traj: Trajectory, out_dir, stride: int = 1) -> list[Path]:
    if traj.q.shape[1] != 3 * model.n:
        raise ValueError(f"trajectory has {traj.q.shape[1] // 3} bodies, the scene model has {model.n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bounds = _bounds(model, traj, scene)
    paths = []
    for k in frame_indices(len(traj), stride):
        st = traj.states[k]
        path = out_dir / f"frame_{k:05d}.svg"
        path.write_text(render_frame(model, scene, st.q, bounds, f"k={k} t={st.time:.3f}s"))
        paths.append(path)
    return paths
