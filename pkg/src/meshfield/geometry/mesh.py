"""Triangle meshes: validation, OBJ input/output and a few procedural shapes."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AREA_EPS = 1e-12


class MeshError(ValueError):
    """Raised when a mesh fails to parse or violates a validity invariant."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Watertight, consistently wound triangle mesh.

    ``nodes`` is ``(n, 3)`` float64, ``faces`` is ``(m, 3)`` int64 with
    outward (counter-clockwise seen from outside) winding. ``edges`` holds
    the sorted undirected node pairs, and ``face_edges[f, i]`` is the edge
    index of the face-local edge ``(faces[f, i], faces[f, (i + 1) % 3])``.
    """

    nodes: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(init=False, repr=False)
    face_edges: np.ndarray = field(init=False, repr=False)
    edge_faces: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshError(f"nodes must be (n, 3), got {nodes.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (m, 3), got {faces.shape}")
        nodes.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "faces", faces)
        edges, face_edges, edge_faces = _validate(nodes, faces)
        for arr in (edges, face_edges, edge_faces):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "face_edges", face_edges)
        object.__setattr__(self, "edge_faces", edge_faces)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.nodes[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def volume(self) -> float:
        a, b, c = (self.nodes[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def with_nodes(self, nodes: np.ndarray) -> "TriangleMesh":
        """Same topology, new node positions (the re-posing operation)."""
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.shape != self.nodes.shape:
            raise MeshError(f"node array {nodes.shape} does not match topology {self.nodes.shape}")
        return TriangleMesh(nodes, self.faces)

    def transformed(self, transform: np.ndarray) -> "TriangleMesh":
        """Apply a 4x4 homogeneous transform to the nodes."""
        return self.with_nodes(apply_transform(transform, self.nodes))

    def same_topology(self, other: "TriangleMesh") -> bool:
        return self.nodes.shape == other.nodes.shape and np.array_equal(self.faces, other.faces)


def apply_transform(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    transform = np.asarray(transform, dtype=np.float64)
    return points @ transform[:3, :3].T + transform[:3, 3]


def _validate(nodes: np.ndarray, faces: np.ndarray):
    n = len(nodes)
    if not np.all(np.isfinite(nodes)):
        raise MeshError("node positions must be finite")
    if len(faces) == 0:
        raise MeshError("mesh has no faces")
    if faces.min() < 0 or faces.max() >= n:
        raise MeshError("face references a node index out of range")

    a, b, c = (nodes[faces[:, i]] for i in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    bad = np.flatnonzero(areas <= AREA_EPS)
    if len(bad):
        raise MeshError(f"degenerate faces (area <= {AREA_EPS:g}): {bad[:10].tolist()}")

    directed = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    undirected = np.sort(directed, axis=1)
    uniq, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    open_edges = uniq[counts != 2]
    if len(open_edges):
        raise MeshError(
            "mesh is not watertight; edges not shared by exactly two faces: "
            f"{[tuple(e) for e in open_edges[:20].tolist()]}"
        )
    dir_counts = Counter(map(tuple, directed.tolist()))
    flipped = [e for e, k in dir_counts.items() if k > 1]
    if flipped:
        raise MeshError(f"inconsistent face winding at edges {flipped[:20]}")

    face_edges = inverse.reshape(-1, 3)
    order = np.argsort(inverse, kind="stable")
    edge_faces = (order // 3).reshape(-1, 2)

    volume = np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0
    if volume <= 0:
        raise MeshError("faces are wound inward (negative enclosed volume)")
    return uniq.astype(np.int64), face_edges.astype(np.int64), edge_faces.astype(np.int64)


def load_mesh(path: str | Path) -> TriangleMesh:
    """Read a Wavefront OBJ (``v`` and triangular ``f`` records, 1-based)."""
    path = Path(path)
    nodes, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    nodes.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs three coordinates")
                elif tag == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"{path}:{lineno}: non-triangular face with {len(idx)} vertices")
                    faces.append([i - 1 if i > 0 else len(nodes) + i for i in idx])
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}: {exc}") from None
    if not nodes or not faces:
        raise MeshError(f"{path}: no vertices or faces found")
    return TriangleMesh(np.array(nodes), np.array(faces))


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    # %.17g round-trips float64 exactly
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in mesh.nodes]
    lines += [f"f {a} {b} {c}\n" for a, b, c in mesh.faces + 1]
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(path)


# --- procedural shapes ---------------------------------------------------

def tetrahedron() -> TriangleMesh:
    nodes = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / np.sqrt(3)
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(nodes, faces)


def cube(size: float = 1.0) -> TriangleMesh:
    """Axis-aligned cube centred on the origin, 12 faces."""
    h = size / 2
    nodes = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(nodes, np.array(faces))


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron with all nodes on the sphere (42 nodes / 80 faces at level 1)."""
    t = (1 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def tube(length: float = 0.6, radius: float = 0.12, rings: int = 16, segments: int = 12) -> TriangleMesh:
    """Closed cylinder along x with fan caps; nodes ordered ring by ring."""
    xs = np.linspace(-length / 2, length / 2, segments + 1)
    phi = 2 * np.pi * np.arange(rings) / rings
    ring = np.stack([np.zeros(rings), radius * np.cos(phi), radius * np.sin(phi)], axis=1)
    nodes = [ring + [x, 0, 0] for x in xs]
    nodes = np.concatenate(nodes + [np.array([[-length / 2, 0, 0], [length / 2, 0, 0]])])
    start, end = len(nodes) - 2, len(nodes) - 1
    faces = []
    for s in range(segments):
        for r in range(rings):
            a = s * rings + r
            b = s * rings + (r + 1) % rings
            c, d = a + rings, b + rings
            faces += [(a, b, d), (a, d, c)]
    last = segments * rings
    for r in range(rings):
        faces.append((start, (r + 1) % rings, r))
        faces.append((end, last + r, last + (r + 1) % rings))
    return TriangleMesh(nodes, np.array(faces))


def bend_nodes(nodes: np.ndarray, angle: float, length: float) -> np.ndarray:
    """Bend x-aligned geometry into a circular arc of the given total angle (about z).

    The arc's midpoint stays at the origin with its tangent along +x, so
    small angles reduce to the identity.
    """
    if abs(angle) < 1e-12:
        return np.array(nodes, dtype=np.float64)
    bend_radius = length / angle
    theta = nodes[:, 0] / bend_radius
    r = bend_radius - nodes[:, 1]
    out = np.empty_like(nodes, dtype=np.float64)
    out[:, 0] = r * np.sin(theta)
    out[:, 1] = bend_radius - r * np.cos(theta)
    out[:, 2] = nodes[:, 2]
    return out
