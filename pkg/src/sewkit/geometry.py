"""Bezier-edge geometry, 3D placement, pose perturbation, and rendering.

All functions are pure. Panel-local coordinates put the first edge's start
at the origin; vertices follow from cumulative edge vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pattern import Edge, Panel, SewingPattern

QUAT_TOL = 1e-6


class GeometryError(Exception):
    pass


class DomainError(GeometryError):
    pass


class EmptyPanel(GeometryError):
    pass


class NonUnitQuaternion(GeometryError):
    pass


class DegenerateViewBox(GeometryError):
    pass


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z convention)

def quat_from_axis_angle(axis: tuple[float, float, float], angle: float) -> tuple:
    ax = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(ax)
    if n == 0:
        raise DomainError("zero rotation axis")
    ax = ax / n
    h = 0.5 * angle
    s = math.sin(h)
    return (math.cos(h), ax[0] * s, ax[1] * s, ax[2] * s)


def quat_multiply(a, b) -> tuple:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_rotate(q, v) -> np.ndarray:
    w, x, y, z = q
    u = np.asarray((x, y, z), dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_normalize(q) -> tuple:
    arr = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(arr)
    if n == 0:
        raise DomainError("zero quaternion")
    return tuple((arr / n).tolist())


# ---------------------------------------------------------------------------
# Edge geometry

def control_absolute(e: Edge, start, end) -> np.ndarray:
    """Control point in panel coordinates.

    start + cx * (end - start) + cy * perp(end - start), with perp the 90
    degree counterclockwise rotation.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    chord = end - start
    perp = np.array([-chord[1], chord[0]])
    return start + e.cx * chord + e.cy * perp


def effective_control(e: Edge, start, end) -> np.ndarray:
    """Control point used for vertex and outline extraction.

    The zero-padding sentinel (cx, cy) == (0, 0) parametrizes the chord
    with the control at the start point, which puts the parameter midpoint
    at the quarter point; for geometric sampling it maps to the canonical
    on-chord control (0.5, 0) so midpoints land mid-chord. Everything else
    is taken literally.
    """
    if e.cx == 0.0 and e.cy == 0.0:
        return control_absolute(Edge(e.dx, e.dy, 0.5, 0.0), start, end)
    return control_absolute(e, start, end)


def bezier_point(p0, c, p1, t: float) -> np.ndarray:
    """Quadratic Bezier point (1-t)^2 p0 + 2t(1-t) c + t^2 p1."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"bezier parameter t={t} outside [0, 1]")
    p0 = np.asarray(p0, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    u = 1.0 - t
    return u * u * p0 + 2.0 * t * u * c + t * t * p1


def panel_vertices(panel_edges) -> np.ndarray:
    """Endpoint and Bezier-midpoint vertices, interleaved [end0, mid0, end1, ...].

    Endpoints are the cumulative sums of edge vectors from the origin, so a
    closed panel's last endpoint returns to (0, 0). 2N vertices for N edges.
    """
    edges = list(panel_edges)
    if not edges:
        raise EmptyPanel("panel has no edges")
    out = []
    pos = np.zeros(2)
    for e in edges:
        nxt = pos + np.array([e.dx, e.dy])
        ctrl = effective_control(e, pos, nxt)
        mid = bezier_point(pos, ctrl, nxt, 0.5)
        out.append(nxt)
        out.append(mid)
        pos = nxt
    return np.array(out)


def support_vectors(vertices: np.ndarray) -> np.ndarray:
    """All pairwise displacements vertices[b] - vertices[a] for a < b."""
    verts = np.asarray(vertices, dtype=np.float64)
    n = len(verts)
    if n < 2:
        raise DomainError(f"need at least 2 vertices, got {n}")
    ia, ib = np.triu_indices(n, k=1)
    return verts[ib] - verts[ia]


def support_pair_indices(n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """The (a, b) index arrays behind support_vectors, for reuse elsewhere."""
    return np.triu_indices(n_vertices, k=1)


def loop_residual(panel_edges) -> np.ndarray:
    edges = list(panel_edges)
    if not edges:
        raise EmptyPanel("panel has no edges")
    return np.array([sum(e.dx for e in edges), sum(e.dy for e in edges)])


def place_point(p, rotation, translation) -> np.ndarray:
    """Lift a panel-local 2D point to 3D: rotate (x, y, 0), then translate."""
    q = np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise NonUnitQuaternion(f"quaternion norm {np.linalg.norm(q):.6f}")
    p = np.asarray(p, dtype=np.float64)
    return quat_rotate(rotation, (p[0], p[1], 0.0)) + np.asarray(translation, dtype=np.float64)


# ---------------------------------------------------------------------------
# Pose perturbation: a 72-vector drives a global yaw + xy shift and a
# per-panel in-plane tilt. Element 0 sets yaw, 1-2 the shift, and slot k
# reads its tilt from element 3 + (k mod 69).

def pose_placement(
    rotation, translation, class_id: int, theta: np.ndarray
) -> tuple[tuple, tuple]:
    theta = np.asarray(theta, dtype=np.float64)
    yaw = (math.pi / 4.0) * float(theta[0])
    shift = 0.1 * theta[1:3]
    tilt = 0.2 * float(theta[3 + (class_id % 69)])
    q_yaw = quat_from_axis_angle((0.0, 1.0, 0.0), yaw)
    q_tilt = quat_from_axis_angle((0.0, 0.0, 1.0), tilt)
    rot = quat_normalize(quat_multiply(q_yaw, quat_multiply(rotation, q_tilt)))
    trans = quat_rotate(q_yaw, translation) + np.array([shift[0], shift[1], 0.0])
    return rot, tuple(trans.tolist())


def apply_pose(p: SewingPattern, theta: np.ndarray) -> SewingPattern:
    """Compose the pose perturbation onto every panel's placement."""
    panels = []
    for panel in p.panels:
        rot, trans = pose_placement(panel.rotation, panel.translation, panel.class_id, theta)
        panels.append(Panel(panel.class_id, panel.edges, rot, trans))
    return SewingPattern(panels=panels, stitches=list(p.stitches), metadata=dict(p.metadata))


# ---------------------------------------------------------------------------
# Rasterization

@dataclass(frozen=True)
class RenderConfig:
    num_classes: int = 24
    height: int = 64
    width: int = 64
    view_box: tuple[float, float, float, float] = (-1.6, -1.6, 3.2, 3.2)
    samples_per_edge: int = 16


@dataclass(frozen=True)
class PlacedPanel:
    """A panel outline sampled in its local frame, plus placement.

    The polyline is explicitly closed (first point repeated at the end).
    """

    polyline: np.ndarray
    rotation: tuple
    translation: tuple
    class_id: int


@dataclass(eq=False)
class Raster:
    channels: np.ndarray  # [C, H, W] float32 in [0, 1]
    config: RenderConfig


def sample_outline(panel_edges, samples_per_edge: int = 16) -> np.ndarray:
    """Sample the panel boundary, samples_per_edge points per edge, closed."""
    edges = list(panel_edges)
    if not edges:
        raise EmptyPanel("panel has no edges")
    pts = []
    pos = np.zeros(2)
    for e in edges:
        nxt = pos + np.array([e.dx, e.dy])
        ctrl = effective_control(e, pos, nxt)
        for k in range(samples_per_edge):
            pts.append(bezier_point(pos, ctrl, nxt, k / samples_per_edge))
        pos = nxt
    pts.append(pts[0])
    return np.array(pts)


def place_panel(panel: Panel, samples_per_edge: int = 16) -> PlacedPanel:
    return PlacedPanel(
        polyline=sample_outline(panel.edges, samples_per_edge),
        rotation=panel.rotation,
        translation=panel.translation,
        class_id=panel.class_id,
    )


def _fill_polygon(mask: np.ndarray, poly_xy: np.ndarray, cfg: RenderConfig) -> None:
    """Even-odd scanline fill of a closed polygon onto a [H, W] mask.

    Pixel centers are tested; crossings use the half-open rule so shared
    vertices are not double counted.
    """
    xmin, ymin, w, h = cfg.view_box
    xs = poly_xy[:, 0]
    ys = poly_xy[:, 1]
    x0, x1 = xs[:-1], xs[1:]
    y0, y1 = ys[:-1], ys[1:]
    px = xmin + (np.arange(cfg.width) + 0.5) * (w / cfg.width)
    for row in range(cfg.height):
        yc = ymin + (row + 0.5) * (h / cfg.height)
        crosses = ((y0 <= yc) & (y1 > yc)) | ((y1 <= yc) & (y0 > yc))
        if not crosses.any():
            continue
        t = (yc - y0[crosses]) / (y1[crosses] - y0[crosses])
        xc = np.sort(x0[crosses] + t * (x1[crosses] - x0[crosses]))
        for a, b in zip(xc[0::2], xc[1::2]):
            mask[row, (px >= a) & (px < b)] = 1.0


def render_raster(p: SewingPattern, theta: np.ndarray, cfg: RenderConfig) -> Raster:
    """Render each posed panel as a filled polygon in its class channel.

    Panels are placed in 3D after the pose perturbation and projected
    orthographically along +z (z is dropped). Deterministic.
    """
    _, _, w, h = cfg.view_box
    if w <= 0 or h <= 0 or cfg.width < 1 or cfg.height < 1:
        raise DegenerateViewBox(f"view box {cfg.view_box} at {cfg.width}x{cfg.height}")
    channels = np.zeros((cfg.num_classes, cfg.height, cfg.width), dtype=np.float32)
    posed = apply_pose(p, theta)
    for panel in posed.panels:
        if panel.class_id >= cfg.num_classes:
            continue
        outline = sample_outline(panel.edges, cfg.samples_per_edge)
        pts3 = np.array(
            [place_point(pt, panel.rotation, panel.translation) for pt in outline]
        )
        _fill_polygon(channels[panel.class_id], pts3[:, 0:2], cfg)
    return Raster(channels=channels, config=cfg)


# ---------------------------------------------------------------------------
# SVG output

_STITCH_PALETTE = (
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00",
    "#a65628", "#f781bf", "#17becf", "#bcbd22", "#7f7f7f",
)


def _svg_num(x: float) -> str:
    return format(float(x), ".6g")


def render_svg(p: SewingPattern, pad: float = 0.1) -> str:
    """Deterministic SVG with one group per panel, side by side.

    Stitched edge pairs share a stroke color; free edges are black. Curved
    edges emit quadratic path commands with absolute control points.
    """
    color_of: dict[tuple[int, int], str] = {}
    for i, s in enumerate(sorted(p.stitches)):
        col = _STITCH_PALETTE[i % len(_STITCH_PALETTE)]
        color_of[s.first] = col
        color_of[s.second] = col

    groups = []
    offset_x = 0.0
    max_h = 1.0
    for panel in p.panels:
        verts = [np.zeros(2)]
        pos = np.zeros(2)
        for e in panel.edges:
            pos = pos + np.array([e.dx, e.dy])
            verts.append(pos.copy())
        arr = np.array(verts)
        lo = arr.min(axis=0)
        hi = arr.max(axis=0)
        span = hi - lo
        max_h = max(max_h, span[1] + 2 * pad)
        paths = []
        pos = np.zeros(2)
        for j, e in enumerate(panel.edges):
            nxt = pos + np.array([e.dx, e.dy])
            color = color_of.get((panel.class_id, j), "#000000")
            if e.cy == 0.0 and 0.0 <= e.cx <= 1.0:  # control on the chord: a line
                d = (
                    f"M {_svg_num(pos[0])} {_svg_num(pos[1])} "
                    f"L {_svg_num(nxt[0])} {_svg_num(nxt[1])}"
                )
            else:
                ctrl = control_absolute(e, pos, nxt)
                d = (
                    f"M {_svg_num(pos[0])} {_svg_num(pos[1])} "
                    f"Q {_svg_num(ctrl[0])} {_svg_num(ctrl[1])} "
                    f"{_svg_num(nxt[0])} {_svg_num(nxt[1])}"
                )
            paths.append(
                f'    <path d="{d}" stroke="{color}" stroke-width="0.015" fill="none"/>'
            )
        tx = offset_x - lo[0] + pad
        ty = hi[1] + pad
        groups.append(
            f'  <g id="panel-{panel.class_id}" '
            f'transform="translate({_svg_num(tx)},{_svg_num(ty)}) scale(1,-1)">\n'
            + "\n".join(paths)
            + "\n  </g>"
        )
        offset_x += span[0] + 2 * pad

    width = max(offset_x, 1.0)
    body = "\n".join(groups)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="0 0 {_svg_num(width)} {_svg_num(max_h)}">\n'
        f"{body}\n</svg>\n"
    )
