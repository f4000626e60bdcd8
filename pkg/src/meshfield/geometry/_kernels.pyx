# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closest-point and ray-cast queries over a flattened BVH.

Region codes for closest points: 0 face interior, 1/2/3 edges AB/BC/CA,
4/5/6 vertices A/B/C. Ties on distance resolve to the lowest face index.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()

DEF STACK = 128


cdef inline double dot3(double ax, double ay, double az, double bx, double by, double bz) nogil:
    return ax * bx + ay * by + az * bz


cdef inline double box_dist2(const double[:, ::1] lo, const double[:, ::1] hi, Py_ssize_t n,
                             double px, double py, double pz) nogil:
    cdef double d = 0.0, t
    t = lo[n, 0] - px
    if t > 0: d += t * t
    t = px - hi[n, 0]
    if t > 0: d += t * t
    t = lo[n, 1] - py
    if t > 0: d += t * t
    t = py - hi[n, 1]
    if t > 0: d += t * t
    t = lo[n, 2] - pz
    if t > 0: d += t * t
    t = pz - hi[n, 2]
    if t > 0: d += t * t
    return d


cdef inline int closest_on_triangle(double px, double py, double pz,
                                    double ax, double ay, double az,
                                    double bx, double by, double bz,
                                    double cx, double cy, double cz,
                                    double *bary) nogil:
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double d1 = dot3(abx, aby, abz, px - ax, py - ay, pz - az)
    cdef double d2 = dot3(acx, acy, acz, px - ax, py - ay, pz - az)
    cdef double d3, d4, d5, d6, va, vb, vc, v, w, denom
    if d1 <= 0 and d2 <= 0:
        bary[0] = 1; bary[1] = 0; bary[2] = 0
        return 4
    d3 = dot3(abx, aby, abz, px - bx, py - by, pz - bz)
    d4 = dot3(acx, acy, acz, px - bx, py - by, pz - bz)
    if d3 >= 0 and d4 <= d3:
        bary[0] = 0; bary[1] = 1; bary[2] = 0
        return 5
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        bary[0] = 1 - v; bary[1] = v; bary[2] = 0
        return 1
    d5 = dot3(abx, aby, abz, px - cx, py - cy, pz - cz)
    d6 = dot3(acx, acy, acz, px - cx, py - cy, pz - cz)
    if d6 >= 0 and d5 <= d6:
        bary[0] = 0; bary[1] = 0; bary[2] = 1
        return 6
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        bary[0] = 1 - w; bary[1] = 0; bary[2] = w
        return 3
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[0] = 0; bary[1] = 1 - w; bary[2] = w
        return 2
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    bary[0] = 1 - v - w; bary[1] = v; bary[2] = w
    return 0


def closest_points(const double[:, ::1] points, const double[:, ::1] verts, const cnp.int64_t[:, ::1] faces,
                   const double[:, ::1] lo, const double[:, ::1] hi,
                   const cnp.int64_t[::1] left, const cnp.int64_t[::1] right,
                   const cnp.int64_t[::1] start, const cnp.int64_t[::1] count,
                   const cnp.int64_t[::1] order):
    cdef Py_ssize_t n = points.shape[0]
    out_face_arr = np.empty(n, dtype=np.int64)
    out_region_arr = np.empty(n, dtype=np.int64)
    out_bary_arr = np.empty((n, 3), dtype=np.float64)
    out_d2_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] out_face = out_face_arr
    cdef cnp.int64_t[::1] out_region = out_region_arr
    cdef double[:, ::1] out_bary = out_bary_arr
    cdef double[::1] out_d2 = out_d2_arr

    cdef Py_ssize_t i, k, f, node, l, r, sp
    cdef Py_ssize_t stack[STACK]
    cdef double px, py, pz, best, d, dl, dr, qx, qy, qz, tol
    cdef double bary[3]
    cdef double bb[3]
    cdef int region, best_region
    cdef Py_ssize_t best_face
    cdef cnp.int64_t ia, ib, ic

    with nogil:
        for i in range(n):
            px = points[i, 0]; py = points[i, 1]; pz = points[i, 2]
            best = INFINITY
            best_face = -1
            best_region = 0
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if box_dist2(lo, hi, node, px, py, pz) > best * (1 + 1e-12):
                    continue
                if left[node] < 0:
                    for k in range(start[node], start[node] + count[node]):
                        f = order[k]
                        ia = faces[f, 0]; ib = faces[f, 1]; ic = faces[f, 2]
                        region = closest_on_triangle(px, py, pz,
                                                     verts[ia, 0], verts[ia, 1], verts[ia, 2],
                                                     verts[ib, 0], verts[ib, 1], verts[ib, 2],
                                                     verts[ic, 0], verts[ic, 1], verts[ic, 2], bary)
                        qx = bary[0] * verts[ia, 0] + bary[1] * verts[ib, 0] + bary[2] * verts[ic, 0]
                        qy = bary[0] * verts[ia, 1] + bary[1] * verts[ib, 1] + bary[2] * verts[ic, 1]
                        qz = bary[0] * verts[ia, 2] + bary[1] * verts[ib, 2] + bary[2] * verts[ic, 2]
                        d = (px - qx) * (px - qx) + (py - qy) * (py - qy) + (pz - qz) * (pz - qz)
                        # near-equal distances count as ties so both backends agree on the face
                        tol = 1e-12 * best if best_face >= 0 else 0.0
                        if best_face < 0 or d < best - tol or (d <= best + tol and f < best_face):
                            if d < best:
                                best = d
                            best_face = f
                            best_region = region
                            bb[0] = bary[0]; bb[1] = bary[1]; bb[2] = bary[2]
                else:
                    l = left[node]
                    r = right[node]
                    dl = box_dist2(lo, hi, l, px, py, pz)
                    dr = box_dist2(lo, hi, r, px, py, pz)
                    # push the farther child first so the nearer one is popped next
                    if dl <= dr:
                        stack[sp] = r; sp += 1
                        stack[sp] = l; sp += 1
                    else:
                        stack[sp] = l; sp += 1
                        stack[sp] = r; sp += 1
            out_face[i] = best_face
            out_region[i] = best_region
            out_bary[i, 0] = bb[0]; out_bary[i, 1] = bb[1]; out_bary[i, 2] = bb[2]
            out_d2[i] = best
    return out_face_arr, out_bary_arr, out_region_arr, out_d2_arr


cdef inline bint ray_box(const double[:, ::1] lo, const double[:, ::1] hi, Py_ssize_t n,
                         double ox, double oy, double oz, double ix, double iy, double iz,
                         double tmax) nogil:
    cdef double t0 = 0.0, t1 = tmax, ta, tb, tmp
    ta = (lo[n, 0] - ox) * ix
    tb = (hi[n, 0] - ox) * ix
    if ta > tb:
        tmp = ta; ta = tb; tb = tmp
    if ta > t0: t0 = ta
    if tb < t1: t1 = tb
    ta = (lo[n, 1] - oy) * iy
    tb = (hi[n, 1] - oy) * iy
    if ta > tb:
        tmp = ta; ta = tb; tb = tmp
    if ta > t0: t0 = ta
    if tb < t1: t1 = tb
    ta = (lo[n, 2] - oz) * iz
    tb = (hi[n, 2] - oz) * iz
    if ta > tb:
        tmp = ta; ta = tb; tb = tmp
    if ta > t0: t0 = ta
    if tb < t1: t1 = tb
    return t0 <= t1


def ray_hits(const double[:, ::1] origins, const double[:, ::1] dirs,
             const double[:, ::1] verts, const cnp.int64_t[:, ::1] faces,
             const double[:, ::1] lo, const double[:, ::1] hi,
             const cnp.int64_t[::1] left, const cnp.int64_t[::1] right,
             const cnp.int64_t[::1] start, const cnp.int64_t[::1] count,
             const cnp.int64_t[::1] order, double tmin):
    """First intersection (Moller-Trumbore) of each ray with the mesh; t = inf on a miss."""
    cdef Py_ssize_t n = origins.shape[0]
    out_t_arr = np.full(n, np.inf)
    out_face_arr = np.full(n, -1, dtype=np.int64)
    out_bary_arr = np.zeros((n, 3), dtype=np.float64)
    cdef double[::1] out_t = out_t_arr
    cdef cnp.int64_t[::1] out_face = out_face_arr
    cdef double[:, ::1] out_bary = out_bary_arr

    cdef Py_ssize_t i, k, f, node, sp
    cdef Py_ssize_t stack[STACK]
    cdef double ox, oy, oz, dx, dy, dz, ix, iy, iz, best, bu, bv
    cdef double e1x, e1y, e1z, e2x, e2y, e2z, hx, hy, hz, sx, sy, sz, qx, qy, qz
    cdef double det, inv, u, v, t
    cdef Py_ssize_t best_face
    cdef cnp.int64_t ia, ib, ic

    with nogil:
        for i in range(n):
            ox = origins[i, 0]; oy = origins[i, 1]; oz = origins[i, 2]
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            ix = 1.0 / dx if dx != 0 else INFINITY
            iy = 1.0 / dy if dy != 0 else INFINITY
            iz = 1.0 / dz if dz != 0 else INFINITY
            best = INFINITY
            best_face = -1
            bu = 0; bv = 0
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if not ray_box(lo, hi, node, ox, oy, oz, ix, iy, iz, best):
                    continue
                if left[node] >= 0:
                    stack[sp] = right[node]; sp += 1
                    stack[sp] = left[node]; sp += 1
                    continue
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    ia = faces[f, 0]; ib = faces[f, 1]; ic = faces[f, 2]
                    e1x = verts[ib, 0] - verts[ia, 0]; e1y = verts[ib, 1] - verts[ia, 1]; e1z = verts[ib, 2] - verts[ia, 2]
                    e2x = verts[ic, 0] - verts[ia, 0]; e2y = verts[ic, 1] - verts[ia, 1]; e2z = verts[ic, 2] - verts[ia, 2]
                    hx = dy * e2z - dz * e2y; hy = dz * e2x - dx * e2z; hz = dx * e2y - dy * e2x
                    det = e1x * hx + e1y * hy + e1z * hz
                    if fabs(det) < 1e-300:
                        continue
                    inv = 1.0 / det
                    sx = ox - verts[ia, 0]; sy = oy - verts[ia, 1]; sz = oz - verts[ia, 2]
                    u = (sx * hx + sy * hy + sz * hz) * inv
                    if u < 0 or u > 1:
                        continue
                    qx = sy * e1z - sz * e1y; qy = sz * e1x - sx * e1z; qz = sx * e1y - sy * e1x
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < 0 or u + v > 1:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if t > tmin and (t < best or (t == best and f < best_face)):
                        best = t
                        best_face = f
                        bu = u; bv = v
            out_t[i] = best
            out_face[i] = best_face
            out_bary[i, 0] = 1 - bu - bv; out_bary[i, 1] = bu; out_bary[i, 2] = bv
    return out_t_arr, out_face_arr, out_bary_arr
