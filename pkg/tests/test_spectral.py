import numpy as np
import pytest
import scipy.linalg
from scipy.spatial import ConvexHull

from meshfield.geometry import TriangleMesh, icosphere, tetrahedron
from meshfield.spectral import (
    MeshGraph,
    PositionalEmbedding,
    SpectralError,
    build_graph,
    laplacian_embedding,
    learnable_embedding,
    make_embedding,
    random_embedding,
)


def random_hull_mesh(seed, n=60):
    """Random connected watertight mesh: convex hull of points on the sphere."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    faces = ConvexHull(pts).simplices.copy()
    a, b, c = (pts[faces[:, i]] for i in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a) < 0
    faces[flip] = faces[flip][:, ::-1]
    return TriangleMesh(pts, faces)


def sign_regions(mesh, values):
    """Flood-fill count of connected node sets sharing a sign."""
    adj = [[] for _ in range(mesh.n_nodes)]
    for i, j in mesh.edges:
        adj[i].append(j)
        adj[j].append(i)
    pos = values > 0
    seen = np.zeros(mesh.n_nodes, bool)
    regions = 0
    for s in range(mesh.n_nodes):
        if seen[s]:
            continue
        regions += 1
        stack = [s]
        seen[s] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v] and pos[v] == pos[u]:
                    seen[v] = True
                    stack.append(v)
    return regions


class TestGraph:
    def test_tetrahedron_is_k4(self):
        g = build_graph(tetrahedron())
        assert np.all(g.degree == 3)
        assert g.adjacency.sum() == 12

    def test_icosphere_degrees(self):
        g = build_graph(icosphere(1))
        deg = g.degree.astype(int)
        assert set(deg) == {5, 6}
        assert np.sum(deg == 5) == 12

    @pytest.mark.parametrize("seed", range(3))
    def test_laplacian_invariants(self, seed):
        g = build_graph(random_hull_mesh(seed))
        assert np.array_equal(g.adjacency, g.adjacency.T)
        assert np.all(np.diag(g.adjacency) == 0)
        np.testing.assert_allclose(g.laplacian.sum(axis=1), 0, atol=1e-12)
        rng = np.random.default_rng(seed)
        for _ in range(20):
            x = rng.normal(size=g.n)
            assert x @ g.laplacian @ x >= -1e-9

    def test_topology_only(self, tube_mesh):
        rng = np.random.default_rng(0)
        moved = tube_mesh.with_nodes(tube_mesh.nodes + rng.normal(scale=0.01, size=tube_mesh.nodes.shape))
        assert np.array_equal(build_graph(tube_mesh).adjacency, build_graph(moved).adjacency)


class TestLaplacianEmbedding:
    def test_cycle_c4(self):
        g = MeshGraph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        emb = laplacian_embedding(g, 1)
        # dense generalized eigensolver as an independent oracle
        vals, vecs = scipy.linalg.eigh(g.laplacian, np.diag(g.degree))
        assert emb.eigenvalues[0] == pytest.approx(vals[1], abs=1e-9)
        span = vecs[:, 1:3]  # eigenvalue 1 has multiplicity 2
        x = emb.raw[:, 0]
        resid = x - span @ np.linalg.lstsq(span, x, rcond=None)[0]
        assert np.linalg.norm(resid) < 1e-9
        assert x @ np.diag(g.degree) @ x == pytest.approx(1, abs=1e-6)
        assert np.all(np.abs(emb.X) <= 1)

    def test_rayleigh_quotient(self, tube_mesh):
        g = build_graph(tube_mesh)
        emb = laplacian_embedding(g, 8)
        for col, lam in zip(emb.raw.T, emb.eigenvalues):
            assert (col @ g.laplacian @ col) / (col @ (g.degree * col)) == pytest.approx(lam, abs=1e-6)
            assert lam > 1e-9

    def test_first_coordinate_has_two_sign_regions(self):
        mesh = icosphere(1)
        emb = laplacian_embedding(build_graph(mesh), 4)
        assert sign_regions(mesh, emb.X[:, 0]) == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_d_orthonormal_and_optimal(self, seed):
        g = build_graph(random_hull_mesh(seed))
        k = 8
        emb = laplacian_embedding(g, k)
        D = np.diag(g.degree)
        np.testing.assert_allclose(emb.raw.T @ D @ emb.raw, np.eye(k), atol=1e-6)
        vals = scipy.linalg.eigh(g.laplacian, D, eigvals_only=True)
        trace = np.trace(emb.raw.T @ g.laplacian @ emb.raw)
        assert trace == pytest.approx(vals[1 : k + 1].sum(), abs=1e-6)
        rng = np.random.default_rng(seed)
        inv_sqrt = 1 / np.sqrt(g.degree)
        for _ in range(20):
            q, _ = np.linalg.qr(rng.normal(size=(g.n, k)))
            competitor = inv_sqrt[:, None] * q  # D-orthonormal
            assert trace <= np.trace(competitor.T @ g.laplacian @ competitor) + 1e-9

    def test_range_and_sign_convention(self, tube_mesh):
        emb = laplacian_embedding(build_graph(tube_mesh), 16)
        assert np.all(np.abs(emb.X) <= 1.0)
        np.testing.assert_allclose(np.abs(emb.X).max(axis=0), 1.0)
        lead = np.argmax(np.abs(emb.X), axis=0)
        assert np.all(emb.X[lead, np.arange(16)] > 0)

    def test_pose_invariance_bitwise(self, tube_mesh):
        rng = np.random.default_rng(1)
        a = make_embedding(tube_mesh, "laplacian", 16)
        moved = tube_mesh.with_nodes(tube_mesh.nodes + rng.normal(scale=0.02, size=tube_mesh.nodes.shape))
        b = make_embedding(moved, "laplacian", 16)
        assert np.array_equal(a.X, b.X)

    def test_proximity_preserved(self, tube_mesh):
        emb = laplacian_embedding(build_graph(tube_mesh), 16)
        X = emb.raw
        adj = np.mean([np.sum((X[i] - X[j]) ** 2) for i, j in tube_mesh.edges])
        rng = np.random.default_rng(2)
        A = build_graph(tube_mesh).adjacency
        far = []
        while len(far) < 1000:
            i, j = rng.integers(0, tube_mesh.n_nodes, 2)
            if i != j and A[i, j] == 0:
                far.append(np.sum((X[i] - X[j]) ** 2))
        assert adj < np.mean(far)

    def test_errors(self):
        mesh = icosphere(1)
        with pytest.raises(SpectralError, match="k must be < node count"):
            laplacian_embedding(build_graph(mesh), 42)
        two = TriangleMesh(
            np.concatenate([tetrahedron().nodes, tetrahedron().nodes + 3]),
            np.concatenate([tetrahedron().faces, tetrahedron().faces + 4]),
        )
        with pytest.raises(SpectralError, match="disconnected"):
            laplacian_embedding(build_graph(two), 2)


class TestRandomEmbeddings:
    def test_deterministic(self):
        assert np.array_equal(random_embedding(10, 4, 7).X, random_embedding(10, 4, 7).X)

    def test_range(self):
        X = random_embedding(10, 4, 0).X
        assert X.shape == (10, 4) and np.all(np.abs(X) <= 1)

    def test_seeds_differ(self):
        assert not np.array_equal(random_embedding(10, 4, 0).X, random_embedding(10, 4, 1).X)

    def test_learnable_initialised_as_random(self):
        assert np.array_equal(learnable_embedding(10, 4, 3).X, random_embedding(10, 4, 3).X)
        assert learnable_embedding(10, 4, 3).kind == "learnable"


def test_embedding_file_round_trip(tmp_path):
    emb = make_embedding(icosphere(1), "laplacian", 8, seed=5)
    emb.save(tmp_path / "e.bin")
    back = PositionalEmbedding.load(tmp_path / "e.bin")
    assert back.kind == "laplacian" and back.seed == 5
    assert back.X.tobytes() == emb.X.tobytes()
