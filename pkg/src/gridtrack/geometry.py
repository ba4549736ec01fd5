"""Point-cloud and triangle-mesh primitives.

Everything downstream operates in a canonical cube: one global similarity
transform maps the union of all input frames into [-1, 1]^3, and the same
transform is applied to the reference mesh so positions, deformations, and
losses share a single coordinate space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Raised for malformed clouds or meshes (empty, degenerate, bad indices)."""


@dataclass
class PointCloud:
    """Unordered 3D points, optionally with unit normals.

    points: (N, 3) float array.
    normals: (N, 3) float array of unit vectors, or None.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must be (N, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise GeometryError("points contain non-finite coordinates")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise GeometryError("normals shape must match points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriMesh:
    """Triangle mesh with per-vertex unit normals and a deduplicated edge set.

    vertices: (N, 3); faces: (F, 3) int indices; vertex_normals: (N, 3) unit
    vectors; edges: (E, 2) with each undirected edge stored once as (min, max).
    Normals and edges are derived from vertices/faces when not supplied.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None
    edges: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError(f"faces must be (F, 3), got {self.faces.shape}")
        n = len(self.vertices)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            raise GeometryError("face indices out of range")
        if self.edges is None:
            self.edges = extract_edges(self.faces, num_vertices=n)
        if self.vertex_normals is None:
            self.vertex_normals = vertex_normals(self.vertices, self.faces)
        else:
            self.vertex_normals = np.ascontiguousarray(self.vertex_normals, dtype=np.float64)

    def with_vertices(self, vertices: np.ndarray, recompute_normals: bool = True) -> "TriMesh":
        """Same topology with new vertex positions."""
        return TriMesh(
            vertices=vertices,
            faces=self.faces,
            vertex_normals=None if recompute_normals else self.vertex_normals,
            edges=self.edges,
        )


@dataclass(frozen=True)
class NormalizationTransform:
    """Uniform scale + shift mapping scene coordinates into [-1, 1]^3.

    Forward map: p' = (p - center) * scale.
    """

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points / self.scale + self.center


def normalize_sequence(
    clouds: list[PointCloud],
) -> tuple[list[PointCloud], NormalizationTransform]:
    """Fit one similarity transform to the union of all frames and apply it.

    The scale is 1 / (largest half-extent of the union bounding box), so the
    output union fits [-1, 1]^3 tightly along the widest axis. Normals are
    directions and pass through unchanged.
    """
    nonempty = [c.points for c in clouds if len(c)]
    if not nonempty:
        raise GeometryError("cannot normalize an empty sequence")
    lo = np.min([p.min(axis=0) for p in nonempty], axis=0)
    hi = np.max([p.max(axis=0) for p in nonempty], axis=0)
    half = (hi - lo) / 2.0
    extent = half.max()
    if extent <= 0.0:
        raise GeometryError("degenerate sequence: zero-extent bounding box")
    transform = NormalizationTransform(center=(lo + hi) / 2.0, scale=1.0 / extent)
    out = [PointCloud(transform.apply(c.points), c.normals) for c in clouds]
    return out, transform


def nearest_neighbor(query: np.ndarray, target: PointCloud | np.ndarray) -> tuple[int, float]:
    """Index and squared distance of the target point closest to `query`.

    Ties resolve to the lowest index; the returned squared distance is
    recomputed from coordinates so it matches an exhaustive scan bit for bit.
    """
    pts = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
    if len(pts) == 0:
        raise GeometryError("nearest_neighbor: empty target cloud")
    q = np.asarray(query, dtype=np.float64)
    tree = cKDTree(pts)
    dist, idx = tree.query(q)
    # exact tie handling: examine every candidate at the found radius
    candidates = tree.query_ball_point(q, dist * (1.0 + 1e-12) + 1e-300)
    if len(candidates) > 1:
        sq = ((pts[candidates] - q) ** 2).sum(axis=1)
        order = np.lexsort((candidates, sq))
        idx = candidates[order[0]]
    d2 = float(((pts[idx] - q) ** 2).sum())
    return int(idx), d2


def nearest_neighbors(queries: np.ndarray, tree: cKDTree, workers: int = 1) -> np.ndarray:
    """Batched nearest-neighbor indices against a prebuilt tree."""
    _, idx = tree.query(queries, workers=workers)
    return idx


def extract_edges(faces: np.ndarray, num_vertices: int | None = None) -> np.ndarray:
    """Deduplicated undirected edge set of a triangle list, rows (min, max).

    Rows are sorted lexicographically, so the result is independent of face
    order and winding.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if num_vertices is not None and (faces.min() < 0 or faces.max() >= num_vertices):
        raise GeometryError("face indices out of range")
    raw = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [0, 2]]], axis=0)
    raw.sort(axis=1)
    return np.unique(raw, axis=0)


def face_normals_area_weighted(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Cross-product face normals; magnitude equals twice the face area."""
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unit vertex normals as the area-weighted mean of incident face normals.

    Zero-area faces contribute nothing. A vertex whose accumulated normal is
    zero (isolated, or only degenerate faces) has no defined orientation and
    is reported by index rather than emitting NaN.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    acc = np.zeros_like(vertices)
    if len(faces):
        fn = face_normals_area_weighted(vertices, faces)
        for k in range(3):
            np.add.at(acc, faces[:, k], fn)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if len(bad):
        raise GeometryError(f"undefined vertex normals at indices {bad[:8].tolist()}")
    return acc / norms[:, None]


def occupancy_count(points: np.ndarray, resolution: int = 128) -> int:
    """Number of occupied voxels of a resolution^3 grid over [-1, 1]^3."""
    idx = np.floor((points + 1.0) * 0.5 * resolution).astype(np.int64)
    np.clip(idx, 0, resolution - 1, out=idx)
    lin = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    return int(np.unique(lin).size)
