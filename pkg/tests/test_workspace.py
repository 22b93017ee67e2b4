import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccdesign import workspace as ws
from ccdesign.workspace import (MeshError, StlError, TriangleMesh, box_mesh, encode_stl, grid_to_targets,
                                parse_stl, sphere_mesh, voxelize_mesh)

TRI = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])


def binary_one_facet():
    rec = struct.pack("<3f", 0, 0, 1) + TRI.astype("<f4").tobytes() + b"\0\0"
    return b"x" * 80 + struct.pack("<I", 1) + rec


def test_binary_single_facet():
    m = parse_stl(binary_one_facet())
    assert len(m) == 1 and np.array_equal(m.vertices, TRI)


def test_ascii_matches_binary_reencoding():
    text = b"""solid tri
  facet normal 0 0 1
    outer loop
      vertex 0 0 0
      vertex 1 0 0
      vertex 0 1 0
    endloop
  endfacet
endsolid tri
"""
    a = parse_stl(text)
    b = parse_stl(encode_stl(a, binary=True))
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.normals, b.normals)


def test_count_mismatch_is_error():
    data = binary_one_facet()
    bad = data[:80] + struct.pack("<I", 2) + data[84:]
    with pytest.raises(StlError) as e:
        parse_stl(bad)
    assert e.value.offset == len(bad)


def test_truncated_and_nonfinite():
    with pytest.raises(StlError):
        parse_stl(b"abc")
    data = bytearray(binary_one_facet())
    data[84 + 12:84 + 16] = struct.pack("<f", float("nan"))
    with pytest.raises(StlError) as e:
        parse_stl(bytes(data))
    assert e.value.offset == 96


def test_ascii_error_offset():
    text = b"solid x\n facet normal 0 0 1\n outer loop\n vertex 0 0 zero\n"
    with pytest.raises(StlError) as e:
        parse_stl(text)
    assert text[e.value.offset:].startswith(b"zero")


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(finite, min_size=9, max_size=9), min_size=1, max_size=8), st.booleans())
def test_encode_parse_identity(rows, binary):
    m = TriangleMesh(np.array(rows, dtype=np.float32).astype(float), None)
    m.normals = m.normals.astype(np.float32).astype(float)
    back = parse_stl(encode_stl(m, binary=binary))
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.normals, m.normals)


def test_cube_27():
    g = voxelize_mesh(box_mesh([0, 0, 0], [9, 9, 9]), 3.0)
    assert g.count == 27 and g.dims == (3, 3, 3)


def test_shifted_cube_64():
    g = voxelize_mesh(box_mesh([1.5, 1.5, 1.5], [10.5, 10.5, 10.5]), 3.0)
    assert g.count == 64


def test_shifted_cube_subsampled_oracle():
    # a cell is occupied iff the cube covers part of it (checked on a 0.1 cm subgrid)
    lo, hi = np.array([1.5] * 3), np.array([10.5] * 3)
    g = voxelize_mesh(box_mesh(lo, hi), 3.0)
    sub = (np.arange(30) + 0.5) * 0.1
    count = 0
    for idx in np.ndindex(*g.dims):
        corner = g.origin + np.array(idx) * 3.0
        axes = [corner[a] + sub for a in range(3)]
        covered = all(np.any((ax > lo[a]) & (ax < hi[a])) for a, ax in enumerate(axes))
        count += covered
        assert g.occupied[idx] == covered
    assert count == 64


def test_sphere_volume_close():
    g = voxelize_mesh(sphere_mesh([0, 0, 0], 10.0), 3.0)
    analytic = 4 / 3 * np.pi * 1000
    assert abs(g.volume() - analytic) / analytic < 0.10


def test_sphere_converges():
    mesh = sphere_mesh([0.3, -0.2, 0.1], 10.0)
    ref = mesh.volume()
    errs = [abs(voxelize_mesh(mesh, vs).volume() - ref) / ref for vs in (3.0, 1.5, 0.75)]
    assert errs[2] < errs[0]
    assert errs[2] < 0.02


def test_lattice_translation_equivariance():
    mesh = sphere_mesh([0.4, 0.2, -0.3], 7.0)
    a = voxelize_mesh(mesh, 2.0)
    b = voxelize_mesh(mesh.translated([2.0, 0, 0]), 2.0)
    assert np.array_equal(a.occupied, b.occupied)
    assert np.allclose(b.origin - a.origin, [2.0, 0, 0])


def test_open_mesh_rejected():
    cube = box_mesh([0, 0, 0], [9, 9, 9])
    with pytest.raises(MeshError):
        voxelize_mesh(TriangleMesh(cube.vertices[2:], None), 3.0)


def test_voxel_size_validation():
    with pytest.raises(ValueError):
        voxelize_mesh(box_mesh([0, 0, 0], [1, 1, 1]), 0.0)


def test_overlap_mode_is_superset():
    mesh = sphere_mesh([0, 0, 0], 6.0)
    c = voxelize_mesh(mesh, 2.0)
    o = voxelize_mesh(mesh, 2.0, surface="overlap")
    assert np.all(o.occupied >= c.occupied) and o.count > c.count


def test_grid_to_targets():
    g = voxelize_mesh(box_mesh([0, 0, 0], [9, 9, 9]), 3.0)
    t = grid_to_targets(g, 1.0, 0.95)
    assert len(t) == 27 and np.allclose(t.points[0], [1.5, 1.5, 1.5])
    assert t.tolerance == 1.0 and t.required_fraction == 0.95 and t.voxel_size == 3.0
    empty = ws.VoxelGrid(g.origin, 3.0, g.dims, np.zeros(g.dims, dtype=bool))
    with pytest.raises(ValueError):
        grid_to_targets(empty, 1.0, 0.95)


def test_points_csv_roundtrip(tmp_path):
    pts = np.array([[1.0, 2.5, -3.0], [0.1, 0.2, 0.3]])
    ws.write_points_csv(tmp_path / "p.csv", pts)
    assert np.array_equal(ws.read_points_csv(tmp_path / "p.csv"), pts)
    (tmp_path / "bad.csv").write_text("x,y,z\n1,2\n")
    with pytest.raises(ValueError):
        ws.read_points_csv(tmp_path / "bad.csv")


def test_deep_sea_two_regions():
    g = voxelize_mesh(ws.deep_sea_mesh(), 3.0)
    assert g.components() == 2


def envelope_with_origin(points):
    allp = np.vstack([points, np.zeros(3)])
    return allp.max(axis=0) - allp.min(axis=0)


def test_builtin_envelopes():
    lo, hi = ws.mobile_platform_mesh().bounds()
    assert np.allclose(envelope_with_origin(np.array([lo, hi])), [80, 32, 51])
    lo, hi = ws.deep_sea_mesh().bounds()
    assert np.allclose(envelope_with_origin(np.array([lo, hi])), [51, 86, 61], atol=1e-9)


def test_welding_points():
    p = ws.spot_welding_points()
    assert p.shape == (32, 3)
    assert np.allclose(p.min(axis=0), [13.7, 10.9, -120.8])
    assert np.allclose(p.max(axis=0), [37.7, 70.3, 0.0])
    # evenly spaced along the closed boundary curve
    gaps = np.linalg.norm(np.diff(np.vstack([p, p[:1]]), axis=0), axis=1)
    assert gaps.max() / gaps.min() < 1.25
