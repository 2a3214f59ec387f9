import numpy as np
import pytest

from mesh_core import (MeshError, ObjParseError, TriMesh, box, icosphere, laplacian_matrix, load_obj, save_obj,
                       submesh, uniform_laplacian, uv_sphere)


def test_trimesh_rejects_out_of_range_index():
    with pytest.raises(MeshError, match="outside"):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_trimesh_rejects_repeated_index():
    with pytest.raises(MeshError, match="repeats"):
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])


def test_trimesh_is_read_only(tetrahedron):
    with pytest.raises(ValueError):
        tetrahedron.vertices[0, 0] = 5.0


def test_edges_and_one_ring(tetrahedron):
    assert tetrahedron.edges.shape == (6, 2)
    assert (tetrahedron.edges[:, 0] < tetrahedron.edges[:, 1]).all()
    for vertex, ring in enumerate(tetrahedron.one_ring):
        assert sorted(ring.tolist()) == [v for v in range(4) if v != vertex]


def test_face_edges_index_edges(tetrahedron):
    for face, edge_ids in zip(tetrahedron.faces, tetrahedron.face_edges):
        pairs = {tuple(sorted(pair)) for pair in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0]))}
        assert {tuple(tetrahedron.edges[e]) for e in edge_ids} == pairs


@pytest.mark.parametrize("mesh", [box(), icosphere(1), icosphere(2), uv_sphere(6, 8)])
def test_generators_are_watertight(mesh):
    assert mesh.is_watertight()
    assert mesh.degenerate_faces().size == 0
    assert mesh.isolated_vertices().size == 0


def test_uv_sphere_layout_and_orientation():
    mesh = uv_sphere(rings=5, segments=7, radius=2.0)
    assert mesh.vertex_count == 2 + 4 * 7
    assert mesh.face_count == 2 * 7 + 2 * 3 * 7
    np.testing.assert_allclose(mesh.vertices[0], [0.0, 0.0, 2.0])
    np.testing.assert_allclose(mesh.vertices[-1], [0.0, 0.0, -2.0])
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    assert (np.einsum("ij,ij->i", mesh.face_normals(), centers) > 0).all()


def test_uv_sphere_rejects_too_few_rings():
    with pytest.raises(MeshError):
        uv_sphere(rings=1, segments=8)


def test_open_mesh_is_not_watertight(tetrahedron):
    open_mesh = TriMesh(tetrahedron.vertices, tetrahedron.faces[:3])
    assert not open_mesh.is_watertight()


def test_flipped_face_breaks_watertightness(tetrahedron):
    faces = tetrahedron.faces.copy()
    faces[0] = faces[0][::-1]
    assert not TriMesh(tetrahedron.vertices, faces).is_watertight()


def test_box_normals_point_outward(unit_cube):
    centers = unit_cube.vertices[unit_cube.faces].mean(axis=1)
    assert (np.einsum("ij,ij->i", unit_cube.face_normals(), centers) > 0).all()
    np.testing.assert_allclose(unit_cube.face_areas().sum(), 6.0)


def test_vertex_normals_of_sphere_are_radial(sphere):
    radial = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    np.testing.assert_allclose(np.einsum("ij,ij->i", sphere.vertex_normals(), radial), 1.0, atol=1e-2)


def test_degenerate_face_is_reported():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert mesh.degenerate_faces().tolist() == [0]
    np.testing.assert_array_equal(mesh.face_normals()[0], 0.0)


def test_uniform_laplacian_matches_matrix_and_one_ring_mean(sphere):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(sphere.vertex_count, 3))
    lap = uniform_laplacian(sphere, values)
    np.testing.assert_allclose(lap, laplacian_matrix(sphere) @ values)
    ring = sphere.one_ring[5]
    np.testing.assert_allclose(lap[5], values[ring].mean(axis=0) - values[5])


def test_laplacian_of_constant_field_is_zero(unit_cube):
    np.testing.assert_allclose(uniform_laplacian(unit_cube, np.ones((8, 3))), 0.0, atol=1e-15)


def test_laplacian_isolated_vertex_is_zero():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
    assert mesh.isolated_vertices().tolist() == [3]
    np.testing.assert_array_equal(uniform_laplacian(mesh, mesh.vertices)[3], 0.0)


def test_laplacian_rejects_wrong_field_size(unit_cube):
    with pytest.raises(MeshError):
        uniform_laplacian(unit_cube, np.zeros((3, 3)))


def test_obj_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    mesh = icosphere(1)
    mesh = mesh.with_vertices(mesh.vertices + rng.normal(scale=1e-3, size=mesh.vertices.shape))
    path = tmp_path / "mesh.obj"
    save_obj(mesh, path)
    loaded = load_obj(path)
    np.testing.assert_array_equal(loaded.vertices, mesh.vertices)
    np.testing.assert_array_equal(loaded.faces, mesh.faces)


def test_load_obj_accepts_slash_indices_and_comments(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n")
    mesh = load_obj(path)
    assert mesh.faces.tolist() == [[0, 1, 2]]


@pytest.mark.parametrize("body, line", [
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", 5),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n", 4),
    ("v 0 0\n", 1),
    ("v 0 0 0\nv 1 0 x\n", 2),
])
def test_load_obj_reports_line_number(tmp_path, body, line):
    path = tmp_path / "bad.obj"
    path.write_text(body)
    with pytest.raises(ObjParseError) as info:
        load_obj(path)
    assert info.value.line_number == line


def test_submesh_keeps_only_selected_faces():
    mesh = uv_sphere(6, 8)
    mask = np.zeros(mesh.vertex_count, dtype=bool)
    mask[1 + 8:1 + 3 * 8] = True
    band, kept = submesh(mesh, mask)
    assert band.vertex_count == 16
    assert band.face_count == 2 * 8
    np.testing.assert_array_equal(band.vertices, mesh.vertices[kept])
    assert not band.is_watertight()
