"""
Mesh Geometry
Triangle meshes on top of trimesh: closest-point projection with a
deterministic tie rule, surface sampling, vector distance fields,
ray queries and OBJ I/O.
"""

import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import List, Sequence, Tuple

import numpy as np
import trimesh
from sklearn.neighbors import NearestNeighbors

from errors import EmptyInput, InvalidMesh, IoError, MissingFile, ParseError
from liegroup import RigidTransform, as_rng

logger = logging.getLogger(__name__)

MIN_NORMALIZED_AREA = 1e-12
DEFAULT_DISTANCE_SAMPLES = 1024
BARYCENTRIC_ZERO = 1e-9

# region codes of a projection on its host triangle
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


# ===== MESH =====

@dataclass(frozen=True, eq=False)
class TriMesh:
    """Validated, immutable triangle mesh backed by a trimesh.Trimesh"""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        faces = np.array(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) < 3:
            raise InvalidMesh("mesh needs at least 3 vertices of dimension 3")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise InvalidMesh("mesh needs at least one triangle")
        if not np.all(np.isfinite(vertices)):
            raise InvalidMesh("mesh vertices must be finite")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise InvalidMesh("face index out of range")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

        diag = self.diagonal
        if diag <= 0:
            raise InvalidMesh("mesh has zero extent")
        bad = np.flatnonzero(self.face_areas / (diag * diag) <= MIN_NORMALIZED_AREA)
        if len(bad):
            raise InvalidMesh(f"degenerate faces: {bad[:10].tolist()}")

    @cached_property
    def tm(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces,
                               process=False, validate=False)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> "TriMesh":
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces))

    @cached_property
    def triangles(self) -> np.ndarray:
        return np.asarray(self.tm.triangles)

    @property
    def corners(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        tri = self.triangles
        return tri[:, 0], tri[:, 1], tri[:, 2]

    @cached_property
    def face_areas(self) -> np.ndarray:
        return np.asarray(self.tm.area_faces)

    @cached_property
    def face_normals(self) -> np.ndarray:
        return np.asarray(self.tm.face_normals)

    @cached_property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = np.asarray(self.tm.bounds)
        return lo, hi

    @cached_property
    def diagonal(self) -> float:
        return bbox_diagonal(self)

    @property
    def total_area(self) -> float:
        return float(self.tm.area)

    @cached_property
    def surface_centroid(self) -> np.ndarray:
        """Area-weighted centroid of the surface"""
        return np.average(np.asarray(self.tm.triangles_center), axis=0, weights=self.face_areas)

    @cached_property
    def signed_volume(self) -> float:
        a, b, c = self.corners
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    @cached_property
    def volume_centroid(self) -> np.ndarray:
        """Centroid of the enclosed solid; surface centroid for open or flat meshes"""
        if not self.is_closed or abs(self.signed_volume) < 1e-9 * self.diagonal ** 3:
            return self.surface_centroid
        return np.asarray(self.tm.center_mass, dtype=float)

    @cached_property
    def is_closed(self) -> bool:
        """Every edge shared by exactly two faces"""
        return bool(self.tm.is_watertight)

    @cached_property
    def unique_edges(self) -> np.ndarray:
        return np.asarray(self.tm.edges_unique, dtype=np.int64)

    def transformed(self, transform: RigidTransform) -> "TriMesh":
        return TriMesh(transform.apply(self.vertices), self.faces)

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=float), self.faces)


def aabb(mesh: TriMesh) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = mesh.bounds
    return lo.copy(), hi.copy()


def bbox_diagonal(mesh: TriMesh) -> float:
    lo, hi = aabb(mesh)
    return float(np.linalg.norm(hi - lo))


def concatenate_meshes(meshes: Sequence[TriMesh]) -> TriMesh:
    if not meshes:
        raise EmptyInput("no meshes to concatenate")
    if len(meshes) == 1:
        return meshes[0]
    return TriMesh.from_trimesh(trimesh.util.concatenate([m.tm for m in meshes]))


def scene_diagonal(meshes: Sequence[TriMesh]) -> float:
    """Bounding-box diagonal of several meshes taken together"""
    return bbox_diagonal(concatenate_meshes(list(meshes)))


# ===== CLOSEST POINT =====

@dataclass(frozen=True)
class Projection:
    point: np.ndarray
    normal: np.ndarray
    face_index: int
    distance: float
    degenerate: bool = False


@dataclass(frozen=True)
class ProjectionBatch:
    points: np.ndarray
    normals: np.ndarray
    face_indices: np.ndarray
    distances: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> Projection:
        return Projection(self.points[i], self.normals[i], int(self.face_indices[i]),
                          float(self.distances[i]), bool(self.degenerate[i]))


def projection_regions(triangles: np.ndarray, points: np.ndarray) -> np.ndarray:
    """FACE, VERT_* or EDGE_* for points lying on their triangles"""
    bary = trimesh.triangles.points_to_barycentric(triangles, points)
    zero = np.abs(bary) <= BARYCENTRIC_ZERO
    nz = zero.sum(axis=1)
    region = np.full(len(points), FACE, dtype=np.int64)
    on_vertex = nz >= 2
    region[on_vertex] = VERT_A + np.argmax(bary[on_vertex], axis=1)
    on_edge = nz == 1
    # the zero weight sits opposite the edge
    opposite = np.argmax(zero[on_edge], axis=1)
    region[on_edge] = EDGE_AB + (opposite + 1) % 3
    return region


class Bvh:
    """
    Closest-point queries against a TriMesh using trimesh's triangle r-tree.
    Ties within tie_eps resolve to the lowest face index; projections on a
    vertex or an edge carry the angle-weighted vertex normal or the summed
    edge normal, falling back to the face normal (flagged) when that sum vanishes.
    Immutable after construction; queries are read-only.
    """

    def __init__(self, mesh: TriMesh):
        if not isinstance(mesh, TriMesh):
            raise InvalidMesh("build_bvh needs a TriMesh")
        self.mesh = mesh
        self.tie_eps = 1e-12 * mesh.diagonal ** 2
        # candidate radii come from the nearest vertex, so it must lie on the surface
        self._tm = mesh.tm.copy()
        self._tm.remove_unreferenced_vertices()
        self._build_normals()

    def _build_normals(self):
        mesh = self.mesh
        fn = mesh.face_normals
        angles = np.asarray(mesh.tm.face_angles)
        vnorm = np.zeros_like(mesh.vertices)
        np.add.at(vnorm, mesh.faces.reshape(-1), (angles[:, :, None] * fn[:, None, :]).reshape(-1, 3))
        self.vertex_normals, self.vertex_degenerate = _normalize_rows(vnorm)

        # tm.edges holds AB, BC, CA of every face in order
        inverse = np.asarray(mesh.tm.edges_unique_inverse)
        sums = np.zeros((inverse.max() + 1, 3))
        np.add.at(sums, inverse, np.repeat(fn, 3, axis=0))
        flat, flat_bad = _normalize_rows(sums[inverse])
        self.edge_normals = flat.reshape(-1, 3, 3)
        self.edge_degenerate = flat_bad.reshape(-1, 3)

    def closest_points(self, queries: np.ndarray, chunk: int = 1024) -> ProjectionBatch:
        """Nearest surface point for each query (lowest face index among ties)"""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        parts = [self._closest_chunk(queries[s:s + chunk]) for s in range(0, len(queries), chunk)]
        if not parts:
            empty = np.zeros((0, 3))
            return ProjectionBatch(empty, empty, np.zeros(0, dtype=np.int64), np.zeros(0),
                                   np.zeros(0, dtype=bool))
        return ProjectionBatch(*(np.concatenate(arrs) for arrs in zip(*parts)))

    def _closest_chunk(self, queries: np.ndarray):
        nq = len(queries)
        candidates = trimesh.proximity.nearby_faces(self._tm, queries)
        counts = np.array([len(c) for c in candidates], dtype=np.int64)
        q_rep = np.repeat(np.arange(nq), counts)
        f_rep = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])
        pts = trimesh.triangles.closest_point(self.mesh.triangles[f_rep], queries[q_rep])
        diff = pts - queries[q_rep]
        d2 = np.einsum("ij,ij->i", diff, diff)

        best = np.full(nq, np.inf)
        np.minimum.at(best, q_rep, d2)
        near = d2 <= best[q_rep] + self.tie_eps
        best_face = np.full(nq, np.iinfo(np.int64).max)
        np.minimum.at(best_face, q_rep[near], f_rep[near])
        pick = np.flatnonzero(near & (f_rep == best_face[q_rep]))
        _, first = np.unique(q_rep[pick], return_index=True)
        pick = pick[first]

        faces = f_rep[pick]
        points = pts[pick]
        region = projection_regions(self.mesh.triangles[faces], points)
        normals, degenerate = self._normals_for(faces, region)
        dist = np.sqrt(np.maximum(d2[pick], 0.0))
        return points, normals, faces, dist, degenerate

    def _normals_for(self, faces: np.ndarray, region: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        normals = self.mesh.face_normals[faces].copy()
        degenerate = np.zeros(len(faces), dtype=bool)
        tri = self.mesh.faces[faces]
        for code, corner in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            m = region == code
            normals[m] = self.vertex_normals[tri[m, corner]]
            degenerate[m] = self.vertex_degenerate[tri[m, corner]]
        for code, edge in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
            m = region == code
            normals[m] = self.edge_normals[faces[m], edge]
            degenerate[m] = self.edge_degenerate[faces[m], edge]
        normals[degenerate] = self.mesh.face_normals[faces[degenerate]]
        return normals, degenerate

    def closest_point(self, query) -> Projection:
        return self.closest_points(np.asarray(query, dtype=float).reshape(1, 3))[0]


def _normalize_rows(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.linalg.norm(m, axis=1)
    bad = lengths < 1e-12
    out = m / np.where(bad, 1.0, lengths)[:, None]
    out[bad] = 0.0
    return out, bad


def build_bvh(mesh: TriMesh) -> Bvh:
    return Bvh(mesh)


def closest_point(bvh: Bvh, query) -> Projection:
    return bvh.closest_point(query)


# ===== SAMPLING =====

@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    face_index: int
    barycentric: np.ndarray


class SurfaceSamples:
    """Array-backed list of SurfaceSample"""

    def __init__(self, positions: np.ndarray, face_indices: np.ndarray, barycentric: np.ndarray):
        self.positions = np.asarray(positions, dtype=float)
        self.face_indices = np.asarray(face_indices, dtype=np.int64)
        self.barycentric = np.asarray(barycentric, dtype=float)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> SurfaceSample:
        return SurfaceSample(self.positions[i], int(self.face_indices[i]), self.barycentric[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def transformed(self, transform: RigidTransform) -> "SurfaceSamples":
        return SurfaceSamples(transform.apply(self.positions), self.face_indices, self.barycentric)

    def subset(self, idx) -> "SurfaceSamples":
        return SurfaceSamples(self.positions[idx], self.face_indices[idx], self.barycentric[idx])

    @classmethod
    def from_points(cls, points: np.ndarray) -> "SurfaceSamples":
        """Free points (no host face), e.g. for synthetic point parts"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        bary = np.tile([1.0, 0.0, 0.0], (len(points), 1))
        return cls(points, np.full(len(points), -1), bary)


def _vertex_hosts(mesh: TriMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Lowest face index using each vertex, and the vertex's weight on it"""
    nv, nf = len(mesh.vertices), len(mesh.faces)
    host = np.full(nv, nf, dtype=np.int64)
    for k in range(3):
        np.minimum.at(host, mesh.faces[:, k], np.arange(nf))
    unused = host == nf
    host[unused] = 0
    bary = (mesh.faces[host] == np.arange(nv)[:, None]).astype(float)
    bary[unused] = [1.0, 0.0, 0.0]
    return host, bary


def sample_surface(mesh: TriMesh, count: int, seed=0, include_vertices: bool = True) -> SurfaceSamples:
    """
    Area-weighted surface samples. When count >= vertex count, all vertices
    come first and the remainder is sampled.
    """
    if count < 1:
        raise InvalidMesh("sample count must be >= 1")
    rng = as_rng(seed)
    positions, faces, barys = [], [], []

    remaining = count
    if include_vertices and count >= len(mesh.vertices):
        host, vb = _vertex_hosts(mesh)
        positions.append(mesh.vertices.copy())
        faces.append(host)
        barys.append(vb)
        remaining -= len(mesh.vertices)

    if remaining > 0:
        points, fi = trimesh.sample.sample_surface(mesh.tm, remaining,
                                                   seed=int(rng.integers(2 ** 31 - 1)))
        fi = np.asarray(fi, dtype=np.int64)
        positions.append(np.asarray(points, dtype=float))
        faces.append(fi)
        barys.append(trimesh.triangles.points_to_barycentric(mesh.triangles[fi], points))

    return SurfaceSamples(np.vstack(positions), np.concatenate(faces), np.vstack(barys))


def default_vdf_samples(mesh: TriMesh, budget: int = 2000, seed=0) -> SurfaceSamples:
    """Part vertices when there are at most `budget`, else `budget` area-weighted samples"""
    if len(mesh.vertices) <= budget:
        return sample_surface(mesh, len(mesh.vertices), seed)
    return sample_surface(mesh, budget, seed)


# ===== VECTOR DISTANCE FIELD =====

@dataclass(frozen=True, eq=False)
class VdfSnapshot:
    samples: SurfaceSamples
    offsets: np.ndarray
    normals: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.offsets)


def compute_vdf(part_samples: SurfaceSamples, parent: Bvh) -> VdfSnapshot:
    """Offsets from each sample to its closest point on the parent"""
    if len(part_samples) == 0:
        raise EmptyInput("compute_vdf needs at least one sample")
    proj = parent.closest_points(part_samples.positions)
    return VdfSnapshot(part_samples, proj.points - part_samples.positions, proj.normals,
                       proj.degenerate)


# ===== DISTANCES =====

def surface_distances(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the mesh surface"""
    _, distance, _ = trimesh.proximity.closest_point(mesh.tm, np.atleast_2d(points))
    return np.asarray(distance, dtype=float)


def mesh_distance(a: TriMesh, b: TriMesh, count: int = DEFAULT_DISTANCE_SAMPLES, seed: int = 0) -> float:
    """Symmetric chamfer: mean of the two directed mean point-to-surface distances"""
    sa = sample_surface(a, count, seed)
    sb = sample_surface(b, count, seed)
    ab = surface_distances(b, sa.positions).mean()
    ba = surface_distances(a, sb.positions).mean()
    return float(0.5 * (ab + ba))


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Mean nearest-neighbour distance A->B plus B->A"""
    nn_b = NearestNeighbors(n_neighbors=1).fit(points_b)
    nn_a = NearestNeighbors(n_neighbors=1).fit(points_a)
    d_ab, _ = nn_b.kneighbors(points_a)
    d_ba, _ = nn_a.kneighbors(points_b)
    return float(d_ab.mean() + d_ba.mean())


def boxes_overlap(lo_a, hi_a, lo_b, hi_b, pad: float = 0.0) -> bool:
    return bool(np.all(lo_a <= hi_b + pad) and np.all(lo_b <= hi_a + pad))


def min_surface_gap(a: TriMesh, b: TriMesh, count: int = 512, seed: int = 0) -> float:
    """Smallest sampled surface-to-surface distance; 0 when the surfaces cross"""
    if surfaces_intersect(a, b):
        return 0.0
    sa = sample_surface(a, max(count, len(a.vertices)), seed)
    sb = sample_surface(b, max(count, len(b.vertices)), seed)
    ab = surface_distances(b, sa.positions).min()
    ba = surface_distances(a, sb.positions).min()
    return float(min(ab, ba))


# ===== RAY QUERIES =====

def ray_hits(mesh: TriMesh, origins: np.ndarray, direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cast one ray per origin along a shared direction.

    Returns:
        (origin index, hit distance t > 0) for every hit
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    if len(origins) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    locations, index_ray, _ = mesh.tm.ray.intersects_location(
        origins, np.tile(d, (len(origins), 1)), multiple_hits=True)
    index_ray = np.asarray(index_ray, dtype=np.int64)
    if len(index_ray) == 0:
        return index_ray, np.zeros(0)
    t = (np.asarray(locations) - origins[index_ray]) @ d
    forward = t > 1e-12 * mesh.diagonal
    return index_ray[forward], t[forward]


def points_inside(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Containment by trimesh's ray-parity test; only points inside the bounds are cast"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    inside = np.zeros(len(points), dtype=bool)
    if len(points) == 0:
        return inside
    lo, hi = mesh.bounds
    cand = np.flatnonzero(np.all((points >= lo) & (points <= hi), axis=1))
    if len(cand):
        inside[cand] = mesh.tm.contains(points[cand])
    return inside


def segments_cross(mesh: TriMesh, starts: np.ndarray, ends: np.ndarray) -> bool:
    """True if any segment crosses the surface strictly between its endpoints"""
    if len(starts) == 0:
        return False
    seg = ends - starts
    length = np.linalg.norm(seg, axis=1)
    ok = length > 1e-12 * mesh.diagonal
    starts, seg, length = starts[ok], seg[ok], length[ok]
    if len(starts) == 0:
        return False
    dirs = seg / length[:, None]
    locations, index_ray, _ = mesh.tm.ray.intersects_location(starts, dirs, multiple_hits=True)
    if len(index_ray) == 0:
        return False
    index_ray = np.asarray(index_ray, dtype=np.int64)
    t = np.einsum("ij,ij->i", np.asarray(locations) - starts[index_ray], dirs[index_ray])
    eps = 1e-9 * length[index_ray]
    return bool(np.any((t > eps) & (t < length[index_ray] - eps)))


def surfaces_intersect(a: TriMesh, b: TriMesh) -> bool:
    """Edge-surface crossing test in both directions, gated by bounding boxes"""
    lo_a, hi_a = a.bounds
    lo_b, hi_b = b.bounds
    if not boxes_overlap(lo_a, hi_a, lo_b, hi_b):
        return False
    for src, dst in ((a, b), (b, a)):
        lo, hi = dst.bounds
        edges = src.unique_edges
        p0 = src.vertices[edges[:, 0]]
        p1 = src.vertices[edges[:, 1]]
        near = np.all((np.minimum(p0, p1) <= hi) & (np.maximum(p0, p1) >= lo), axis=1)
        if segments_cross(dst, p0[near], p1[near]):
            return True
    return False


# ===== OBJ I/O =====

def load_obj(path) -> TriMesh:
    """Read an OBJ file into one mesh, vertex order kept; polygons are triangulated"""
    path = str(path)
    if not os.path.exists(path):
        raise MissingFile(path)
    try:
        loaded = trimesh.load(path, file_type="obj", force="mesh", process=False,
                              maintain_order=True)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}")
    except (ValueError, IndexError, KeyError, TypeError) as e:
        raise ParseError(f"cannot parse {path}: {e}")
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        raise ParseError(f"no triangle faces in {path}")
    try:
        return TriMesh.from_trimesh(loaded)
    except InvalidMesh as e:
        raise InvalidMesh(f"{path}: {e}")


def save_obj(path, groups) -> List[Tuple[str, int, int]]:
    """
    Write one mesh, or a list of (name, mesh) pairs merged in order.

    Returns:
        (name, first face, end face) of every group in the written file
    """
    if isinstance(groups, TriMesh):
        groups = [("", groups)]
    spans, start = [], 0
    for name, mesh in groups:
        spans.append((name, start, start + len(mesh.faces)))
        start += len(mesh.faces)
    merged = concatenate_meshes([mesh for _, mesh in groups])
    try:
        merged.tm.export(str(path), file_type="obj", include_normals=False,
                         include_texture=False)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}")
    return spans
