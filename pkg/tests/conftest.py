import numpy as np
import pytest

from surfage.geometry import icosphere
from surfage.mesh import SurfaceMesh
from surfage.tensor import fresh_tape


@pytest.fixture(autouse=True)
def _isolated_tape():
    """Every test runs on its own tape."""
    with fresh_tape():
        yield


@pytest.fixture
def tetrahedron():
    """Regular tetrahedron with outward counter-clockwise faces."""
    verts = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return SurfaceMesh(verts, faces)


@pytest.fixture(scope="session")
def icosphere_642():
    verts, faces = icosphere(2)
    return SurfaceMesh(verts, faces)


@pytest.fixture(scope="session")
def bumpy_mesh():
    """Generic closed mesh without symmetries (breaks feature ties)."""
    rng = np.random.default_rng(42)
    verts, faces = icosphere(2)
    radii = 1.0 + 0.15 * np.sin(3.0 * verts[:, 0]) + 0.1 * verts[:, 2] ** 2
    return SurfaceMesh(verts * radii[:, None], faces)
