import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from mesh_core import TriMesh, box, icosphere  # noqa: E402


@pytest.fixture
def tetrahedron() -> TriMesh:
    vertices = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    faces = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    return TriMesh(vertices, faces)


@pytest.fixture
def unit_cube() -> TriMesh:
    return box((0.5, 0.5, 0.5))


@pytest.fixture
def sphere() -> TriMesh:
    return icosphere(2, radius=0.5)


@pytest.fixture
def random_meshes():
    """Randomly scaled, rotated and shifted closed meshes."""
    rng = np.random.default_rng(1234)
    meshes = []
    for index in range(6):
        base = icosphere(1 + index % 2) if index % 3 else box((0.4, 0.3, 0.2))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        scale = rng.uniform(0.5, 1.5, size=3)
        vertices = (base.vertices * scale) @ q.T + rng.uniform(-0.3, 0.3, size=3)
        meshes.append(TriMesh(vertices, base.faces))
    return meshes
