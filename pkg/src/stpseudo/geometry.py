"""Polygon helpers: shoelace area, even-odd scanline fill, rectangle clipping.

Pixel ``(x, y)`` covers ``[x, x+1) x [y, y+1)`` and is inside a polygon when
its center ``(x + 0.5, y + 0.5)`` is inside under the even-odd rule. Centers
exactly on the boundary follow a half-open rule: inside on a left or bottom
edge, outside on a right or top edge.
"""

from __future__ import annotations

import math

import numpy as np


def as_vertices(points) -> np.ndarray:
    """Return an ``(n, 2)`` float array, dropping a repeated closing vertex."""
    v = np.asarray(points, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2:
        raise ValueError(f"expected (n, 2) vertex array, got shape {v.shape}")
    if len(v) > 1 and np.array_equal(v[0], v[-1]):
        v = v[:-1]
    return v


def polygon_area(vertices: np.ndarray) -> float:
    """Unsigned shoelace area."""
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def scanline_spans(vertices: np.ndarray):
    """Yield ``(y, x_start, x_stop)`` half-open runs of interior pixels.

    Edges use the half-open rule ``min(y0, y1) <= yc < max(y0, y1)`` so a
    scanline through a vertex is counted once and horizontal edges never.
    """
    v = vertices
    if len(v) < 3:
        return
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ylo, yhi = np.minimum(y0, y1), np.maximum(y0, y1)
    keep = ylo != yhi
    # orient every edge bottom-to-top so a shared edge yields bit-identical crossings
    up = y0 <= y1
    x0, x1 = np.where(up, x0, x1)[keep], np.where(up, x1, x0)[keep]
    y0, y1 = ylo[keep], yhi[keep]
    ylo, yhi = y0, y1
    if len(x0) == 0:
        return
    row_lo = math.ceil(float(ylo.min()) - 0.5)
    row_hi = math.ceil(float(yhi.max()) - 0.5)
    for row in range(row_lo, row_hi):
        yc = row + 0.5
        hit = (ylo <= yc) & (yc < yhi)
        if not hit.any():
            continue
        # multiply before dividing: exact crossings for integer vertices
        xs = np.sort(x0[hit] + (yc - y0[hit]) * (x1[hit] - x0[hit]) / (y1[hit] - y0[hit]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            start = math.ceil(xa - 0.5)
            stop = math.ceil(xb - 0.5)
            if stop > start:
                yield row, start, stop


def rasterize_polygon(vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ys, xs)`` integer coordinates of interior pixels, row-major."""
    ys: list[np.ndarray] = []
    xs: list[np.ndarray] = []
    for row, start, stop in scanline_spans(vertices):
        run = np.arange(start, stop, dtype=np.int64)
        xs.append(run)
        ys.append(np.full(len(run), row, dtype=np.int64))
    if not xs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    return np.concatenate(ys), np.concatenate(xs)


def clip_polygon_to_rect(vertices: np.ndarray, width: float, height: float) -> np.ndarray:
    """Sutherland-Hodgman clip against ``[0, width] x [0, height]``.

    Intersection vertices are rounded, so a pixel center lying exactly on a
    shortened edge can land on either side of it.
    """

    def clip(poly, inside, cross):
        out = []
        n = len(poly)
        for i in range(n):
            cur, prev = poly[i], poly[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
        return out

    def at_x(xv):
        def cross(p, q):
            t = (xv - p[0]) / (q[0] - p[0])
            return (xv, p[1] + t * (q[1] - p[1]))
        return cross

    def at_y(yv):
        def cross(p, q):
            t = (yv - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), yv)
        return cross

    poly = [tuple(p) for p in vertices]
    for inside, cross in (
        (lambda p: p[0] >= 0.0, at_x(0.0)),
        (lambda p: p[0] <= width, at_x(float(width))),
        (lambda p: p[1] >= 0.0, at_y(0.0)),
        (lambda p: p[1] <= height, at_y(float(height))),
    ):
        if not poly:
            break
        poly = clip(poly, inside, cross)
    return np.asarray(poly, dtype=float).reshape(-1, 2)
