"""Planar geometry for yaw-rotated boxes: corners, convex clipping, areas."""

import math

import numpy as np

SLIVER_AREA = 1e-12


def normalize_yaw(yaw):
    """Wrap an angle into [-pi, pi)."""
    out = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if out < 0.0:
        out += 2.0 * math.pi
    out -= math.pi
    # fmod rounding can land exactly on +pi
    if out >= math.pi:
        out -= 2.0 * math.pi
    return out


def rect_corners(cx, cy, length, width, yaw):
    """Counter-clockwise BEV corners of a rotated rectangle as a (4, 2) array."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw))
    return np.array([(cx + x * c - y * s, cy + x * s + y * c) for x, y in local])


def polygon_area(poly):
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return 0.5 * area


def clip_convex(subject, clip):
    """Intersect two convex CCW polygons by successive half-plane cuts.

    Returns the list of vertices of the intersection (possibly empty).
    """
    output = [tuple(p) for p in subject]
    m = len(clip)
    for i in range(m):
        if len(output) < 3:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        n = len(inp)
        for j in range(n):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % n]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0.0:
                output.append((px, py))
            if (sp >= 0.0) != (sq >= 0.0):
                t = sp / (sp - sq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output if len(output) >= 3 else []


def intersection_area(corners_a, corners_b):
    """Area of overlap of two convex CCW polygons; slivers count as empty."""
    poly = clip_convex(corners_a, corners_b)
    area = polygon_area(poly)
    return area if area > SLIVER_AREA else 0.0
