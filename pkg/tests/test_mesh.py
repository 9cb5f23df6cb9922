import numpy as np
import pytest

from surfage.errors import (
    ChannelMismatchError,
    MeshParseError,
    MeshValidationError,
    NonManifoldMeshError,
)
from surfage.mesh import (
    SurfaceMesh,
    euler_characteristic,
    load_mesh,
    save_mesh,
    save_sidecar,
)

OFF_TETRA = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""

OBJ_CUBE = """
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


class TestLoadOff:
    def test_tetrahedron_euler_two(self, tmp_path):
        path = tmp_path / "tet.off"
        path.write_text(OFF_TETRA)
        mesh = load_mesh(path)
        assert mesh.vertex_count == 4 and mesh.face_count == 4
        assert euler_characteristic(mesh) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(MeshParseError):
            load_mesh(tmp_path / "nope.off")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("FFO\n1 0 0\n0 0 0\n")
        with pytest.raises(MeshParseError):
            load_mesh(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "short.off"
        path.write_text("OFF\n4 4 0\n0 0 0\n")
        with pytest.raises(MeshParseError):
            load_mesh(path)


class TestLoadObj:
    def test_cube_has_18_unique_edges(self, tmp_path):
        path = tmp_path / "cube.obj"
        path.write_text(OBJ_CUBE)
        mesh = load_mesh(path)
        assert mesh.vertex_count == 8 and mesh.face_count == 12
        assert len(mesh.edges()) == 18  # V - E + F = 2
        assert euler_characteristic(mesh) == 2

    def test_slash_face_syntax(self, tmp_path):
        path = tmp_path / "t.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2//2 3/3/3\n")
        mesh = load_mesh(path)
        assert mesh.face_count == 1


class TestSidecar:
    def test_row_count_mismatch(self, tmp_path):
        mesh_path = tmp_path / "tet.off"
        mesh_path.write_text(OFF_TETRA)
        side = tmp_path / "tet.csv"
        side.write_text(
            "vertex_index,ct,sd,curv,mm\n0,1,2,3,4\n1,1,2,3,4\n2,1,2,3,4\n"
        )
        with pytest.raises(ChannelMismatchError):
            load_mesh(mesh_path, side)

    def test_roundtrip(self, tmp_path):
        mesh_path = tmp_path / "tet.off"
        mesh_path.write_text(OFF_TETRA)
        mesh = load_mesh(mesh_path)
        mesh.channels = {
            "ct": np.array([1.0, 2.0, 3.0, 4.0]),
            "sd": np.zeros(4),
            "curv": np.full(4, 0.5),
            "mm": np.arange(4.0),
        }
        save_sidecar(mesh, tmp_path / "side.csv")
        again = load_mesh(mesh_path, tmp_path / "side.csv")
        for name in ("ct", "sd", "curv", "mm"):
            assert np.array_equal(again.channels[name], mesh.channels[name])

    def test_bad_header_rejected(self, tmp_path):
        mesh_path = tmp_path / "tet.off"
        mesh_path.write_text(OFF_TETRA)
        side = tmp_path / "bad.csv"
        side.write_text("idx,a,b,c,d\n0,1,2,3,4\n")
        with pytest.raises(MeshParseError):
            load_mesh(mesh_path, side)


class TestValidation:
    def test_face_index_out_of_range(self):
        mesh = SurfaceMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))
        with pytest.raises(MeshValidationError):
            mesh.validate()

    def test_degenerate_face(self):
        mesh = SurfaceMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))
        with pytest.raises(MeshValidationError):
            mesh.validate()

    def test_non_manifold_edge(self):
        verts = np.zeros((5, 3))
        faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])  # edge (0,1) in 3 faces
        with pytest.raises(NonManifoldMeshError):
            SurfaceMesh(verts, faces).validate()

    def test_closed_detection(self, tetrahedron):
        assert tetrahedron.is_closed()
        open_mesh = SurfaceMesh(tetrahedron.vertices, tetrahedron.faces[:3])
        assert not open_mesh.is_closed()


class TestSaveMesh:
    def test_byte_identical_roundtrip(self, tmp_path, tetrahedron):
        a, b = tmp_path / "a.off", tmp_path / "b.off"
        save_mesh(tetrahedron, a)
        save_mesh(load_mesh(a), b)
        assert a.read_bytes() == b.read_bytes()
