"""Pure-numpy versions of the compiled queries.

Same signatures and tie rules as ``_kernels``; they test every face for
every query in chunks instead of walking the BVH, which is exact but
O(queries x faces).
"""

from __future__ import annotations

import numpy as np

CHUNK = 1 << 21  # query-face pairs per chunk


def _chunks(n_queries: int, n_faces: int):
    step = max(1, CHUNK // max(n_faces, 1))
    for s in range(0, n_queries, step):
        yield slice(s, min(s + step, n_queries))


def _closest_on_triangles(p, a, b, c):
    """Vectorised closest point of ``p`` (Q,1,3) on triangles (1,F,3); returns bary (Q,F,3), region (Q,F)."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = np.broadcast(d1, d2).shape
    region = np.zeros(shape, dtype=np.int64)
    bary = np.empty(shape + (3,))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        bary[..., 0], bary[..., 1], bary[..., 2] = 1 - v - w, v, w

        # later assignments must not override earlier regions: apply in reverse priority
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        bary[m] = np.stack([np.zeros_like(t[m]), 1 - t[m], t[m]], -1)
        region[m] = 2

        t = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        bary[m] = np.stack([1 - t[m], np.zeros_like(t[m]), t[m]], -1)
        region[m] = 3

        m = (d6 >= 0) & (d5 <= d6)
        bary[m] = (0.0, 0.0, 1.0)
        region[m] = 6

        t = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        bary[m] = np.stack([1 - t[m], t[m], np.zeros_like(t[m])], -1)
        region[m] = 1

        m = (d3 >= 0) & (d4 <= d3)
        bary[m] = (0.0, 1.0, 0.0)
        region[m] = 5

        m = (d1 <= 0) & (d2 <= 0)
        bary[m] = (1.0, 0.0, 0.0)
        region[m] = 4
    return bary, region


def closest_points(points, verts, faces, *_bvh):
    n = len(points)
    out_face = np.empty(n, dtype=np.int64)
    out_region = np.empty(n, dtype=np.int64)
    out_bary = np.empty((n, 3))
    out_d2 = np.empty(n)
    a, b, c = (verts[faces[:, i]][None] for i in range(3))
    for sl in _chunks(n, len(faces)):
        p = points[sl, None, :]
        bary, region = _closest_on_triangles(p, a, b, c)
        q = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
        d2 = ((p - q) ** 2).sum(-1)
        dmin = d2.min(axis=1, keepdims=True)
        # near-equal distances count as ties; argmax picks the lowest such face index
        best = np.argmax(d2 <= dmin * (1 + 1e-12), axis=1)
        rows = np.arange(len(best))
        out_face[sl] = best
        out_region[sl] = region[rows, best]
        out_bary[sl] = bary[rows, best]
        out_d2[sl] = d2[rows, best]
    return out_face, out_bary, out_region, out_d2


def ray_hits(origins, dirs, verts, faces, *args):
    tmin = args[-1]
    n = len(origins)
    out_t = np.full(n, np.inf)
    out_face = np.full(n, -1, dtype=np.int64)
    out_bary = np.zeros((n, 3))
    a = verts[faces[:, 0]][None]
    e1 = verts[faces[:, 1]][None] - a
    e2 = verts[faces[:, 2]][None] - a
    for sl in _chunks(n, len(faces)):
        o = origins[sl, None, :]
        d = dirs[sl, None, :]
        h = np.cross(d, e2)
        det = np.einsum("...i,...i", e1, h)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = o - a
            u = np.einsum("...i,...i", s, h) * inv
            q = np.cross(s, e1)
            v = np.einsum("...i,...i", d, q) * inv
            t = np.einsum("...i,...i", e2, q) * inv
        ok = (np.abs(det) >= 1e-300) & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > tmin)
        t = np.where(ok, t, np.inf)
        best = np.argmin(t, axis=1)
        rows = np.arange(len(best))
        tb = t[rows, best]
        hit = np.isfinite(tb)
        out_t[sl] = tb
        out_face[sl] = np.where(hit, best, -1)
        ub, vb = u[rows, best], v[rows, best]
        out_bary[sl] = np.where(hit[:, None], np.stack([1 - ub - vb, ub, vb], -1), 0.0)
    return out_t, out_face, out_bary
