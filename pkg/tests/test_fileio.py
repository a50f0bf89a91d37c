import numpy as np
import pytest

from corrmorph.fileio import (
    read_mesh,
    read_obj,
    read_ply,
    read_points_csv,
    write_mesh,
    write_obj,
    write_ply,
    write_points_csv,
)
from corrmorph.geometry import TriMesh


@pytest.fixture()
def mesh(rng):
    verts = rng.normal(size=(12, 3)) * 40
    faces = [[0, 1, 2], [2, 3, 4], [4, 5, 6], [6, 7, 8], [8, 9, 10], [10, 11, 0]]
    return TriMesh(verts, faces)


def test_obj_roundtrip(tmp_path, mesh):
    path = tmp_path / "m.obj"
    write_obj(path, mesh)
    back = read_obj(path)
    assert np.array_equal(back.vertices, mesh.vertices)  # %.17g is lossless
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_face_with_slashes(tmp_path):
    (tmp_path / "m.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n")
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, [[0, 1, 2]])


def test_ply_roundtrip(tmp_path, mesh):
    path = tmp_path / "m.ply"
    write_ply(path, mesh)
    back = read_ply(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_ply_with_colors(tmp_path, mesh):
    colors = np.arange(36, dtype=np.uint8).reshape(12, 3)
    path = tmp_path / "c.ply"
    write_ply(path, mesh, colors=colors)
    back = read_ply(path)  # colors skipped on read
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)


def test_ply_rejects_garbage(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"not a ply\n")
    with pytest.raises(ValueError, match="not a PLY"):
        read_ply(tmp_path / "bad.ply")


def test_ply_deterministic_bytes(tmp_path, mesh):
    write_ply(tmp_path / "a.ply", mesh)
    write_ply(tmp_path / "b.ply", mesh)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_csv_roundtrip_points(tmp_path, rng):
    pts = rng.normal(size=(9, 3)) * 12
    write_points_csv(tmp_path / "p.csv", pts)
    back, disp = read_points_csv(tmp_path / "p.csv")
    assert disp is None
    assert np.array_equal(back, pts)


def test_csv_roundtrip_displacements(tmp_path, rng):
    pts = rng.normal(size=(9, 3))
    d = rng.normal(size=(9, 3))
    write_points_csv(tmp_path / "pd.csv", pts, d)
    back, disp = read_points_csv(tmp_path / "pd.csv")
    assert np.array_equal(back, pts)
    assert np.array_equal(disp, d)


def test_csv_header_required(tmp_path):
    (tmp_path / "h.csv").write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_points_csv(tmp_path / "h.csv")


def test_mesh_dispatch(tmp_path, mesh):
    write_mesh(tmp_path / "m.ply", mesh)
    write_mesh(tmp_path / "m.obj", mesh)
    assert np.array_equal(read_mesh(tmp_path / "m.ply").vertices, mesh.vertices)
    assert np.array_equal(read_mesh(tmp_path / "m.obj").vertices, mesh.vertices)
    with pytest.raises(ValueError, match="unsupported"):
        write_mesh(tmp_path / "m.stl", mesh)
