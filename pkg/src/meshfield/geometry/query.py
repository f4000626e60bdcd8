"""Closest-point, signed-distance and ray queries against a triangle mesh.

The sign comes from the angle-weighted pseudonormal of the closest feature
(face, edge or vertex), which is exact for watertight meshes.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import _fallback
from .bvh import FlatBVH, build_bvh
from .mesh import AREA_EPS, MeshError, TriangleMesh

log = logging.getLogger(__name__)

if os.environ.get("MESHFIELD_BACKEND", "").lower() == "python":
    _native = None
else:
    try:
        from . import _kernels as _native
    except ImportError:  # extension not built
        _native = None

BACKEND = "cython" if _native is not None else "python"

FACE, EDGE_AB, EDGE_BC, EDGE_CA, VERTEX_A, VERTEX_B, VERTEX_C = range(7)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class SurfacePoint:
    face: int
    barycentric: np.ndarray  # (b_A, b_B, b_C), opposite-area convention
    position: np.ndarray


@dataclass(frozen=True)
class MeshDecomposition:
    """``point == signed_distance * direction + closest.position``."""

    signed_distance: float
    closest: SurfacePoint
    direction: np.ndarray


@dataclass(frozen=True)
class QueryResult:
    """Batched closest-feature query; every field has leading dimension N."""

    face: np.ndarray
    barycentric: np.ndarray
    region: np.ndarray
    closest: np.ndarray
    signed_distance: np.ndarray
    direction: np.ndarray


class ClosestPointIndex:
    """Immutable BVH plus pseudonormals over one posed mesh; queries are read-only."""

    def __init__(self, mesh: TriangleMesh, backend: str | None = None):
        self.mesh = mesh
        tris = mesh.nodes[mesh.faces]
        self.bvh: FlatBVH = build_bvh(tris)
        self._native = _select(backend)

        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        face_n = _unit(np.cross(b - a, c - a))
        self.face_normals = face_n

        # corner angles for the vertex pseudonormals
        angles = np.empty((mesh.n_faces, 3))
        for i in range(3):
            p, q, r = tris[:, i], tris[:, (i + 1) % 3], tris[:, (i + 2) % 3]
            u, v = _unit(q - p), _unit(r - p)
            angles[:, i] = np.arccos(np.clip(np.einsum("ij,ij->i", u, v), -1.0, 1.0))
        vn = np.zeros((mesh.n_nodes, 3))
        for i in range(3):
            np.add.at(vn, mesh.faces[:, i], angles[:, i, None] * face_n)
        self.vertex_normals = _unit(vn)
        self.edge_normals = _unit(face_n[mesh.edge_faces[:, 0]] + face_n[mesh.edge_faces[:, 1]])

    @property
    def backend(self) -> str:
        return "cython" if self._native is not None else "python"

    def _bvh_args(self):
        b = self.bvh
        return (b.lo, b.hi, b.left, b.right, b.start, b.count, b.order)

    def raw_closest(self, points: np.ndarray):
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        impl = self._native if self._native is not None else _fallback
        return impl.closest_points(points, self.mesh.nodes, self.mesh.faces, *self._bvh_args())

    def pseudonormals(self, face: np.ndarray, region: np.ndarray) -> np.ndarray:
        normals = self.face_normals[face].copy()
        faces = self.mesh.faces
        for local, code in enumerate((EDGE_AB, EDGE_BC, EDGE_CA)):
            m = region == code
            normals[m] = self.edge_normals[self.mesh.face_edges[face[m], local]]
        for local, code in enumerate((VERTEX_A, VERTEX_B, VERTEX_C)):
            m = region == code
            normals[m] = self.vertex_normals[faces[face[m], local]]
        return normals

    def query(self, points: np.ndarray) -> QueryResult:
        """Closest point, signed distance and decomposition direction for (N, 3) points."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        face, bary, region, _ = self.raw_closest(points)
        tri = self.mesh.nodes[self.mesh.faces[face]]
        closest = np.einsum("ni,nij->nj", bary, tri)
        offset = points - closest
        dist = np.linalg.norm(offset, axis=1)
        pseudo = self.pseudonormals(face, region)
        sign = np.where(np.einsum("ij,ij->i", offset, pseudo) < 0, -1.0, 1.0)
        sdf = sign * dist
        with np.errstate(divide="ignore", invalid="ignore"):
            direction = np.where((dist > 0)[:, None], offset / sdf[:, None], pseudo)
        return QueryResult(face, bary, region, closest, sdf, direction)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return self.query(points).signed_distance

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, tmin: float = 0.0):
        """First hit along each ray: ``(t, face, barycentric)``; ``t`` is inf on a miss."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        impl = self._native if self._native is not None else _fallback
        return impl.ray_hits(origins, dirs, self.mesh.nodes, self.mesh.faces, *self._bvh_args(), float(tmin))


def _select(backend: str | None):
    if backend is None:
        return _native
    if backend == "python":
        return None
    if backend == "cython":
        if _native is None:
            raise RuntimeError("compiled geometry kernels are not built")
        return _native
    raise ValueError(f"unknown backend {backend!r}")


def barycentric(face_nodes, p) -> np.ndarray:
    """Opposite-area barycentric coordinates of ``p`` projected onto the triangle plane.

    ``b_A = |PBC| / |ABC|`` and cyclically; signed areas, so points outside
    the triangle get negative entries.
    """
    a, b, c = (np.asarray(x, dtype=np.float64) for x in face_nodes)
    p = np.asarray(p, dtype=np.float64)
    n = np.cross(b - a, c - a)
    area2 = float(np.dot(n, n))
    if 0.5 * np.sqrt(area2) < AREA_EPS:
        raise MeshError("degenerate triangle")
    ba = np.dot(np.cross(c - b, p - b), n) / area2
    bb = np.dot(np.cross(a - c, p - c), n) / area2
    return np.array([ba, bb, 1.0 - ba - bb])


def closest_point(index: ClosestPointIndex, p) -> SurfacePoint:
    r = index.query(np.asarray(p, dtype=np.float64)[None])
    return SurfacePoint(int(r.face[0]), r.barycentric[0], r.closest[0])


def signed_distance(index: ClosestPointIndex, p) -> MeshDecomposition:
    r = index.query(np.asarray(p, dtype=np.float64)[None])
    sp = SurfacePoint(int(r.face[0]), r.barycentric[0], r.closest[0])
    return MeshDecomposition(float(r.signed_distance[0]), sp, r.direction[0])
