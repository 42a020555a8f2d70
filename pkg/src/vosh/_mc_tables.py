"""Marching-cubes case tables, derived at import time.

Corner c of a unit cell sits at offset ((c>>0)&1, (c>>1)&1, (c>>2)&1). The 12
edges connect corners differing in one bit, listed in a fixed order. For each
of the 256 inside/outside configurations the surface polygon loops are found
by pairing crossed edges on each cube face and walking the links into cycles;
loops are fan-triangulated.

On an ambiguous face (two diagonal inside corners) the crossed edges are
paired around each inside corner ("separate" resolution). Because the rule
depends only on the face's corner states, the two cells sharing a face always
agree, so extracted surfaces are crack-free even on ambiguous configurations.

Triangles are oriented with their normal pointing toward the outside
(decreasing field), checked against the trilinear gradient of the 0/1
representative field.
"""

from __future__ import annotations

import numpy as np

CORNER_OFFSETS = np.array(
    [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
)

# edge e = (corner, corner | (1 << axis)); EDGE_AXIS[e] is that axis
EDGES = []
EDGE_AXIS = []
for c in range(8):
    for a in range(3):
        if not c & (1 << a):
            EDGES.append((c, c | (1 << a)))
            EDGE_AXIS.append(a)
EDGES = tuple(EDGES)
EDGE_AXIS = tuple(EDGE_AXIS)
N_EDGES = len(EDGES)  # 12

# faces: (axis, side) -> 4 corners with bit == side
FACES = []
for a in range(3):
    for side in (0, 1):
        FACES.append(tuple(c for c in range(8) if ((c >> a) & 1) == side))


def _edge_faces(e):
    c0, c1 = EDGES[e]
    return [f for f, corners in enumerate(FACES) if c0 in corners and c1 in corners]


_EDGE_FACES = [_edge_faces(e) for e in range(N_EDGES)]


def _face_pairs(face_id, inside):
    """Pair the crossed edges of one face; the pairing separates inside corners."""
    corners = FACES[face_id]
    crossed = []
    for e in range(N_EDGES):
        c0, c1 = EDGES[e]
        if c0 in corners and c1 in corners and inside[c0] != inside[c1]:
            crossed.append(e)
    if not crossed:
        return []
    if len(crossed) == 2:
        return [(crossed[0], crossed[1])]
    # ambiguous: four crossed edges, two diagonal inside corners on this face
    pairs = []
    ins = [c for c in corners if inside[c]]
    if len(ins) != 2:  # two diagonal outside corners: pair around them instead
        ins = [c for c in corners if not inside[c]]
    for corner in ins:
        touching = [e for e in crossed if corner in EDGES[e]]
        pairs.append((touching[0], touching[1]))
    return pairs


def _loops_for_case(case):
    inside = [(case >> c) & 1 for c in range(8)]
    links = {}
    for f in range(6):
        for e0, e1 in _face_pairs(f, inside):
            links.setdefault(e0, []).append(e1)
            links.setdefault(e1, []).append(e0)
    loops = []
    unused = set(links.keys())
    while unused:
        start = min(unused)
        loop = [start]
        unused.discard(start)
        prev = None
        cur = start
        while True:
            a, b = links[cur]
            nxt = b if a == prev else a
            if nxt == start:
                break
            loop.append(nxt)
            unused.discard(nxt)
            prev, cur = cur, nxt
        loops.append(loop)
    return loops, inside


def _edge_midpoint(e):
    c0, c1 = EDGES[e]
    return (CORNER_OFFSETS[c0] + CORNER_OFFSETS[c1]) / 2.0


def _representative_gradient(inside, point):
    """Gradient of the trilinear interpolation of the 0/1 corner field."""
    x, y, z = point
    grad = np.zeros(3)
    for c in range(8):
        v = float(inside[c])
        ox, oy, oz = CORNER_OFFSETS[c]
        wx = x if ox else 1.0 - x
        wy = y if oy else 1.0 - y
        wz = z if oz else 1.0 - z
        dwx = 1.0 if ox else -1.0
        dwy = 1.0 if oy else -1.0
        dwz = 1.0 if oz else -1.0
        grad[0] += v * dwx * wy * wz
        grad[1] += v * wx * dwy * wz
        grad[2] += v * wx * wy * dwz
    return grad


def _build_table():
    table = []
    for case in range(256):
        loops, inside = _loops_for_case(case)
        tris = []
        for loop in loops:
            pts = [_edge_midpoint(e) for e in loop]
            for i in range(1, len(loop) - 1):
                tri = (loop[0], loop[i], loop[i + 1])
                p0, p1, p2 = pts[0], pts[i], pts[i + 1]
                normal = np.cross(p1 - p0, p2 - p0)
                centroid = (p0 + p1 + p2) / 3.0
                grad = _representative_gradient(inside, centroid)
                # outward normal: away from the inside region (field decreasing)
                if normal @ grad > 0:
                    tri = (tri[0], tri[2], tri[1])
                tris.append(tri)
        table.append(tuple(tris))
    return tuple(table)


TRI_TABLE = _build_table()
