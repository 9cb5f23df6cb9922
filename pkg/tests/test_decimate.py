import numpy as np
import pytest

from surfage.decimate import MeshConnectivity, decimate_mesh
from surfage.errors import DecimationError
from surfage.geometry import icosphere
from surfage.mesh import SurfaceMesh, euler_characteristic


class TestCollapseDeltas:
    def test_each_collapse_removes_1_vertex_3_edges_2_faces(self, icosphere_642):
        conn = MeshConnectivity(icosphere_642.faces, icosphere_642.vertex_count)
        rng = np.random.default_rng(0)
        edges = icosphere_642.edges()
        for _ in range(50):
            order = rng.permutation(len(edges))
            done = False
            for i in order:
                u, v = int(edges[i][0]), int(edges[i][1])
                if conn.edge_exists(u, v) and conn.is_collapse_legal(u, v):
                    before = (conn.vertex_count, conn.edge_count, conn.face_count)
                    conn.collapse(u, v)
                    after = (conn.vertex_count, conn.edge_count, conn.face_count)
                    assert (before[0] - after[0], before[1] - after[1], before[2] - after[2]) == (1, 3, 2)
                    done = True
                    break
            assert done
        # connectivity still consistent with a closed manifold
        faces = conn.live_faces()
        mesh = SurfaceMesh(np.zeros((len(conn.alive), 3)), faces)
        counts = {}
        for f in faces:
            for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = tuple(sorted(e))
                counts[key] = counts.get(key, 0) + 1
        assert all(c == 2 for c in counts.values())


class TestDecimate:
    def test_target_at_or_above_count_is_identity(self, tetrahedron):
        out = decimate_mesh(tetrahedron, 10)
        assert np.array_equal(out.vertices, tetrahedron.vertices)
        assert np.array_equal(out.faces, tetrahedron.faces)

    def test_icosphere_to_100_keeps_euler_two(self):
        verts, faces = icosphere(2)  # 642 vertices
        mesh = SurfaceMesh(verts, faces)
        out = decimate_mesh(mesh, 100)
        assert out.vertex_count <= 100
        assert euler_characteristic(out) == 2
        assert out.is_closed()

    def test_geometry_preserved_roughly(self):
        verts, faces = icosphere(2)
        out = decimate_mesh(SurfaceMesh(verts, faces), 80)
        radii = np.linalg.norm(out.vertices, axis=1)
        assert radii.min() > 0.9 and radii.max() < 1.05

    def test_target_below_four_rejected(self, tetrahedron):
        with pytest.raises(DecimationError):
            decimate_mesh(tetrahedron, 3)

    def test_open_mesh_rejected(self):
        verts, faces = icosphere(1)
        open_mesh = SurfaceMesh(verts, faces[:-1])  # puncture the sphere
        with pytest.raises(DecimationError):
            decimate_mesh(open_mesh, 20)

    def test_channels_carried_and_averaged(self):
        verts, faces = icosphere(2)
        rng = np.random.default_rng(1)
        mesh = SurfaceMesh(verts, faces, {"ct": np.full(len(verts), 2.5),
                                          "sd": rng.normal(size=len(verts))})
        out = decimate_mesh(mesh, 150)
        assert set(out.channels) == {"ct", "sd"}
        assert len(out.channels["ct"]) == out.vertex_count
        # a constant channel survives averaging exactly
        assert np.allclose(out.channels["ct"], 2.5)
        # averaged values stay within the original range
        assert out.channels["sd"].min() >= mesh.channels["sd"].min() - 1e-12
        assert out.channels["sd"].max() <= mesh.channels["sd"].max() + 1e-12

    def test_deterministic(self):
        verts, faces = icosphere(2)
        a = decimate_mesh(SurfaceMesh(verts, faces), 200)
        b = decimate_mesh(SurfaceMesh(verts, faces), 200)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)
