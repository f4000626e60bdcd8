"""Graph Laplacians of mesh topology and per-node positional embeddings.

Three embedding kinds share one container:

* ``laplacian`` - generalized eigenvectors of ``(L, D)`` with the smallest
  nonzero eigenvalues, i.e. the minimiser of ``tr(X^T L X)`` subject to
  ``X^T D X = I``. Depends on connectivity only, so it survives re-posing.
* ``random`` - i.i.d. uniform codes in [-1, 1], frozen after sampling.
* ``learnable`` - same initial values as ``random``; the trainer registers
  them as parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh

KINDS = ("laplacian", "random", "learnable")
ZERO_TOL = 1e-9
DEGENERATE_TOL = 1e-9
MAGIC = b"MFEMB001"


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class MeshGraph:
    n: int
    adjacency: np.ndarray
    degree: np.ndarray  # diagonal entries of D
    laplacian: np.ndarray

    @classmethod
    def from_edges(cls, n: int, edges) -> "MeshGraph":
        a = np.zeros((n, n))
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
        np.fill_diagonal(a, 0.0)
        deg = a.sum(axis=1)
        return cls(n=n, adjacency=a, degree=deg, laplacian=np.diag(deg) - a)


def build_graph(mesh: TriangleMesh) -> MeshGraph:
    """Unweighted adjacency from mesh edges; node positions are never read."""
    return MeshGraph.from_edges(mesh.n_nodes, mesh.edges)


@dataclass(eq=False)
class PositionalEmbedding:
    kind: str
    X: np.ndarray
    seed: int = 0
    raw: np.ndarray | None = None          # D-orthonormal eigenvectors before rescaling
    eigenvalues: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def save(self, path: str | Path) -> None:
        header = MAGIC + struct.pack("<IQQq", KINDS.index(self.kind), self.n, self.k, self.seed)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.X, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PositionalEmbedding":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise SpectralError(f"{path}: not an embedding file")
        kind, n, k, seed = struct.unpack_from("<IQQq", data, 8)
        body = np.frombuffer(data, dtype="<f8", offset=8 + struct.calcsize("<IQQq"))
        if body.size != n * k:
            raise SpectralError(f"{path}: expected {n * k} values, found {body.size}")
        return cls(kind=KINDS[kind], X=body.reshape(n, k).astype(np.float64), seed=seed)


def _order_degenerate(vals: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Order by eigenvalue, breaking near-ties by the index of the largest-magnitude entry."""
    lead = np.argmax(np.abs(vecs), axis=0)
    order = []
    i = 0
    while i < len(vals):
        j = i + 1
        while j < len(vals) and vals[j] - vals[i] <= DEGENERATE_TOL * max(1.0, abs(vals[i])):
            j += 1
        group = list(range(i, j))
        order += sorted(group, key=lambda c: (lead[c], c))
        i = j
    return np.array(order, dtype=np.int64)


def laplacian_embedding(graph: MeshGraph, k: int) -> PositionalEmbedding:
    if k >= graph.n:
        raise SpectralError(f"k must be < node count ({k} >= {graph.n})")
    if k < 1:
        raise SpectralError("k must be >= 1")
    if np.any(graph.degree == 0):
        raise SpectralError("graph is disconnected (isolated node)")
    inv_sqrt = 1.0 / np.sqrt(graph.degree)
    normalized = inv_sqrt[:, None] * graph.laplacian * inv_sqrt[None, :]
    normalized = 0.5 * (normalized + normalized.T)
    vals, vecs = np.linalg.eigh(normalized)
    n_zero = int(np.sum(vals < ZERO_TOL))
    if n_zero > 1:
        raise SpectralError(f"graph is disconnected ({n_zero} zero eigenvalues)")

    # y = D^{-1/2} u turns the symmetric problem's orthonormal u into D-orthonormal y
    vals, raw = vals[1:], inv_sqrt[:, None] * vecs[:, 1:]
    order = _order_degenerate(vals, raw)[:k]
    vals, raw = vals[order], raw[:, order]
    lead = np.argmax(np.abs(raw), axis=0)
    raw = raw * np.sign(raw[lead, np.arange(k)])[None, :]
    X = raw / np.abs(raw).max(axis=0, keepdims=True)
    return PositionalEmbedding(kind="laplacian", X=X, raw=raw, eigenvalues=vals)


def random_embedding(n: int, k: int, seed: int) -> PositionalEmbedding:
    if k < 1:
        raise SpectralError("k must be >= 1")
    X = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, k))
    return PositionalEmbedding(kind="random", X=X, seed=seed)


def learnable_embedding(n: int, k: int, seed: int) -> PositionalEmbedding:
    emb = random_embedding(n, k, seed)
    emb.kind = "learnable"
    return emb


def make_embedding(mesh: TriangleMesh, kind: str, k: int, seed: int = 0) -> PositionalEmbedding:
    if kind == "laplacian":
        emb = laplacian_embedding(build_graph(mesh), k)
        emb.seed = seed
        return emb
    if kind == "random":
        return random_embedding(mesh.n_nodes, k, seed)
    if kind == "learnable":
        return learnable_embedding(mesh.n_nodes, k, seed)
    raise SpectralError(f"unknown embedding kind {kind!r}; expected one of {KINDS}")
