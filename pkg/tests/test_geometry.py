import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtrack.geometry import (GeometryError, PointCloud, TriMesh, extract_edges,
                                nearest_neighbor, normalize_sequence, occupancy_count,
                                vertex_normals)


def cloud(*pts):
    return PointCloud(np.array(pts, dtype=float))


class TestNormalize:
    def test_already_canonical(self):
        out, tr = normalize_sequence([cloud((-1, -1, -1), (1, 1, 1))])
        np.testing.assert_array_equal(out[0].points, [[-1, -1, -1], [1, 1, 1]])
        np.testing.assert_array_equal(tr.center, [0, 0, 0])
        assert tr.scale == 1.0

    def test_shifted_segment(self):
        out, tr = normalize_sequence([cloud((0, 0, 0), (2, 0, 0))])
        np.testing.assert_allclose(out[0].points, [[-1, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(tr.center, [1, 0, 0])
        assert tr.scale == 1.0

    def test_two_frames_union_bbox(self):
        frames = [cloud((0, 0, 0), (4, 4, 0)), cloud((0, 0, 4), (4, 0, 0))]
        out, tr = normalize_sequence(frames)
        assert tr.scale == 0.5
        np.testing.assert_allclose(tr.center, [2, 2, 2])
        union = np.concatenate([c.points for c in out])
        assert union.min() >= -1.0 and union.max() <= 1.0

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        frames = [PointCloud(rng.uniform(-3, 5, (40, 3))) for _ in range(4)]
        once, _ = normalize_sequence(frames)
        _, tr2 = normalize_sequence(once)
        assert abs(tr2.scale - 1.0) <= 1e-12
        assert np.abs(tr2.center).max() <= 1e-12

    def test_empty_sequence(self):
        with pytest.raises(GeometryError):
            normalize_sequence([])

    def test_degenerate_bbox(self):
        with pytest.raises(GeometryError):
            normalize_sequence([cloud((1, 1, 1), (1, 1, 1))])

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-2, 9, (50, 3))
        out, tr = normalize_sequence([PointCloud(pts)])
        np.testing.assert_allclose(tr.invert(out[0].points), pts, atol=1e-12)


class TestNearestNeighbor:
    def test_exact_match(self):
        assert nearest_neighbor([0, 0, 0], cloud((0, 0, 0), (1, 1, 1))) == (0, 0.0)

    def test_closer_second_point(self):
        idx, d2 = nearest_neighbor([0.9, 0, 0], cloud((0, 0, 0), (1, 0, 0)))
        assert idx == 1
        assert d2 == pytest.approx(0.01, abs=1e-15)

    def test_matches_exhaustive_scan(self):
        # oracle: full O(n^2) scan with first-minimum tie break
        rng = np.random.default_rng(11)
        target = rng.uniform(-1, 1, (500, 3))
        queries = rng.uniform(-1, 1, (100, 3))
        for q in queries:
            sq = ((target - q) ** 2).sum(axis=1)
            expect_idx = int(np.argmin(sq))
            idx, d2 = nearest_neighbor(q, PointCloud(target))
            assert idx == expect_idx
            assert d2 == sq[expect_idx]

    def test_tie_breaks_to_lowest_index(self):
        target = cloud((1, 0, 0), (-1, 0, 0), (0, 1, 0))
        idx, d2 = nearest_neighbor([0, 0, 0], target)
        assert idx == 0 and d2 == 1.0

    def test_duplicate_points_tie(self):
        target = cloud((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        assert nearest_neighbor([0, 0, 0], target)[0] == 0

    def test_empty_target(self):
        with pytest.raises(GeometryError):
            nearest_neighbor([0, 0, 0], PointCloud(np.zeros((0, 3))))


class TestEdges:
    def test_single_triangle(self):
        edges = extract_edges(np.array([[0, 1, 2]]))
        np.testing.assert_array_equal(edges, [[0, 1], [0, 2], [1, 2]])

    def test_shared_edge_counted_once(self):
        edges = extract_edges(np.array([[0, 1, 2], [1, 2, 3]]))
        assert len(edges) == 5

    def test_icosahedron_euler(self):
        from gridtrack.evalsynth import icosphere
        mesh = icosphere(0)
        # V - E + F = 2 for a closed genus-0 mesh: 12 - E + 20 = 2
        assert len(mesh.edges) == 30

    def test_face_order_independent(self):
        rng = np.random.default_rng(5)
        from gridtrack.evalsynth import icosphere
        faces = icosphere(1).faces
        shuffled = faces[rng.permutation(len(faces))]
        np.testing.assert_array_equal(extract_edges(faces), extract_edges(shuffled))

    def test_out_of_range_index(self):
        with pytest.raises(GeometryError):
            extract_edges(np.array([[0, 1, 5]]), num_vertices=3)


def unit_cube_mesh():
    """Cube with outward winding whose (1,1,1) corner lies on the diagonal of
    all three incident faces (two incident triangles per face)."""
    verts = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    faces = np.array([
        [4, 6, 7], [4, 7, 5],   # x = 1
        [2, 7, 6], [2, 3, 7],   # y = 1
        [1, 5, 7], [1, 7, 3],   # z = 1
        [0, 3, 2], [0, 1, 3],   # x = 0
        [0, 4, 5], [0, 5, 1],   # y = 0
        [0, 2, 6], [0, 6, 4],   # z = 0
    ])
    return verts, faces


class TestVertexNormals:
    def test_flat_square(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        normals = vertex_normals(verts, faces)
        np.testing.assert_allclose(normals, np.tile([0, 0, 1.0], (4, 1)), atol=1e-15)

    def test_cube_corner_area_weights(self):
        verts, faces = unit_cube_mesh()
        # oracle: accumulate raw cross products over faces incident to corner 7
        acc = np.zeros(3)
        for a, b, c in faces:
            if 7 in (a, b, c):
                acc += np.cross(verts[b] - verts[a], verts[c] - verts[a])
        expect = acc / np.linalg.norm(acc)
        np.testing.assert_allclose(expect, np.ones(3) / np.sqrt(3), atol=1e-15)
        normals = vertex_normals(verts, faces)
        np.testing.assert_allclose(normals[7], expect, atol=1e-15)

    def test_unit_length(self):
        from gridtrack.evalsynth import base_shape
        mesh = base_shape(2)
        lengths = np.linalg.norm(mesh.vertex_normals, axis=1)
        assert np.abs(lengths - 1.0).max() <= 1e-6

    def test_degenerate_face_never_nan(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
        faces = np.array([[0, 1, 2], [0, 2, 3], [1, 1, 1]])  # zero-area face
        normals = vertex_normals(verts, faces)
        assert np.isfinite(normals).all()

    def test_isolated_vertex_reported(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [5, 5, 5]], float)
        faces = np.array([[0, 1, 2]])
        with pytest.raises(GeometryError, match="3"):
            vertex_normals(verts, faces)


class TestTriMesh:
    def test_derives_edges_and_normals(self):
        verts, faces = unit_cube_mesh()
        mesh = TriMesh(verts, faces)
        assert len(mesh.edges) == 18  # 12 boundary + 6 face diagonals
        assert np.abs(np.linalg.norm(mesh.vertex_normals, axis=1) - 1.0).max() <= 1e-6

    def test_bad_face_index(self):
        with pytest.raises(GeometryError):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 9]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_normalize_property_fits_cube(seed):
    rng = np.random.default_rng(seed)
    frames = [PointCloud(rng.uniform(-10, 10, (rng.integers(2, 30), 3)))
              for _ in range(rng.integers(1, 4))]
    try:
        out, _ = normalize_sequence(frames)
    except GeometryError:
        return  # degenerate draw
    union = np.concatenate([c.points for c in out])
    assert union.min() >= -1.0 - 1e-12 and union.max() <= 1.0 + 1e-12
    half = (union.max(axis=0) - union.min(axis=0)) / 2
    assert half.max() == pytest.approx(1.0, abs=1e-9)


def test_occupancy_counts_distinct_voxels():
    pts = np.array([[-1, -1, -1], [-1, -1, -1], [1, 1, 1]], float)
    assert occupancy_count(pts, resolution=4) == 2
    assert occupancy_count(np.zeros((10, 3)), resolution=4) == 1
