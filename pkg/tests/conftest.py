import numpy as np
import pytest
import torch

from meshfield.geometry import icosphere, tube

torch.set_default_dtype(torch.float64)


def segment_closest(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return a + t * ab


def brute_closest(mesh, p):
    """Independent oracle: plane projection if inside the face, else best of the three edges."""
    best, best_q = np.inf, None
    for tri in mesh.nodes[mesh.faces]:
        a, b, c = tri
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        proj = p - np.dot(p - a, n) * n
        inside = all(np.dot(np.cross(v1 - v0, proj - v0), n) >= 0 for v0, v1 in ((a, b), (b, c), (c, a)))
        if inside:
            cands = [proj]
        else:
            cands = [segment_closest(p, a, b), segment_closest(p, b, c), segment_closest(p, c, a)]
        for q in cands:
            d = np.linalg.norm(p - q)
            if d < best:
                best, best_q = d, q
    return best, best_q


@pytest.fixture(scope="session")
def ico1():
    return icosphere(1)


@pytest.fixture(scope="session")
def ico2():
    return icosphere(2)


@pytest.fixture(scope="session")
def tube_mesh():
    return tube()


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """A 2-camera x 2-pose 16x16 capture of the procedural scene."""
    from meshfield.pipeline.synthetic import make_synthetic

    root = tmp_path_factory.mktemp("synth")
    make_synthetic(0, root, n_cameras=2, n_poses=2, resolution=16)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_synth):
    from meshfield.pipeline.dataset import load_manifest

    return load_manifest(tiny_synth / "manifest.json")[0]


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line ``PASS|FAIL <name>: <detail>`` and fail the test if not ok."""

    def record(ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {request.node.name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
