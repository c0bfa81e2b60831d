"""
Assembly Metrics
Rooted, Stable, AOR (sibling volume overlap) and COV/MMD set metrics.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import binary_dilation
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError

from errors import EmptyInput, NoGroundContact, ValidationError
from functionality import AssembledScene
from geometry import (TriMesh, aabb, bbox_diagonal, boxes_overlap, chamfer_distance,
                      concatenate_meshes, min_surface_gap, points_inside, sample_surface,
                      scene_diagonal)
from kinematics import rest_pose

logger = logging.getLogger(__name__)

ROOTED_TOL_RATIO = 0.01
GROUND_TOL_RATIO = 0.01
HULL_MARGIN = 0.02
DEFAULT_VOXEL_RES = 64


@dataclass(frozen=True)
class MetricsConfig:
    rooted_tol_ratio: float = ROOTED_TOL_RATIO
    voxel_res: int = DEFAULT_VOXEL_RES
    gravity: Tuple[float, float, float] = (0.0, 0.0, -1.0)
    ground_height: Optional[float] = None

    def __post_init__(self):
        if not self.rooted_tol_ratio > 0:
            raise ValidationError("rooted_tol_ratio must be positive")
        if self.voxel_res < 16:
            raise ValidationError("voxel_res must be >= 16")


def _rest_meshes(scene: AssembledScene) -> Dict[str, TriMesh]:
    return scene.meshes(rest_pose(scene.tree))


# ===== ROOTED =====

def rooted(scene: AssembledScene, tol: Optional[float] = None) -> bool:
    """True iff the rest-pose contact graph is one connected component"""
    meshes = _rest_meshes(scene)
    ids = sorted(meshes)
    if len(ids) == 1:
        return True
    if tol is None:
        tol = ROOTED_TOL_RATIO * scene_diagonal([meshes[i] for i in ids])
    rows, cols = [], []
    for i, j in itertools.combinations(range(len(ids)), 2):
        a, b = meshes[ids[i]], meshes[ids[j]]
        if not boxes_overlap(*a.bounds, *b.bounds, pad=tol):
            continue
        if min_surface_gap(a, b) < tol:
            rows += [i, j]
            cols += [j, i]
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    count, _ = connected_components(graph, directed=False)
    return count == 1


# ===== STABLE =====

def _plane_basis(normal: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return np.stack([u, v])


def center_of_mass(meshes: Sequence[TriMesh]) -> np.ndarray:
    """Volume-weighted centroid; open meshes weigh in by surface area"""
    weights, centers = [], []
    for m in meshes:
        vol = abs(m.signed_volume) if m.is_closed else 0.0
        weights.append(vol if vol > 0 else m.total_area * 1e-6)
        centers.append(m.volume_centroid)
    weights = np.asarray(weights)
    return (weights[:, None] * np.asarray(centers)).sum(axis=0) / weights.sum()


def stable(scene: AssembledScene, gravity_dir=(0.0, 0.0, -1.0),
           ground_height: Optional[float] = None) -> bool:
    """
    Quasi-static support test: the centre of mass, projected along gravity,
    lies inside the convex hull of the ground contacts shrunk by 2%.
    """
    g = np.asarray(gravity_dir, dtype=float)
    g = g / np.linalg.norm(g)
    meshes = list(_rest_meshes(scene).values())
    merged = concatenate_meshes(meshes)
    diag = bbox_diagonal(merged)
    heights = merged.vertices @ -g
    lowest = float(heights.min())
    tol = GROUND_TOL_RATIO * diag
    if ground_height is not None and lowest - ground_height > tol:
        raise NoGroundContact(f"assembly floats {lowest - ground_height:.4g} above the ground")

    contacts = merged.vertices[heights <= lowest + tol]
    basis = _plane_basis(g)
    pts = contacts @ basis.T
    com = center_of_mass(meshes) @ basis.T
    try:
        hull = ConvexHull(pts)
    except (QhullError, ValueError):
        logger.debug("ground contact is a point or a line; treating as unstable")
        return False
    center = pts[hull.vertices].mean(axis=0)
    # shrinking the hull about its centre == pushing the centre of mass away from it
    shifted = center + (com - center) / (1.0 - HULL_MARGIN)
    return bool(np.all(hull.equations[:, :2] @ shifted + hull.equations[:, 2] <= 0.0))


# ===== AOR =====

@dataclass(frozen=True)
class VoxelGrid:
    """Cubic cells of side pitch starting at lo"""

    lo: np.ndarray
    pitch: float
    shape: Tuple[int, int, int]

    @property
    def voxel_volume(self) -> float:
        return float(self.pitch ** 3)

    def empty(self) -> np.ndarray:
        return np.zeros(self.shape, dtype=bool)

    def cells(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((np.atleast_2d(points) - self.lo) / self.pitch).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.shape) - 1)

    def centers(self, cells: np.ndarray) -> np.ndarray:
        return self.lo + (cells + 0.5) * self.pitch

    def mark(self, points: np.ndarray) -> np.ndarray:
        occ = self.empty()
        if len(points):
            idx = self.cells(points)
            occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return occ


def scene_grid(meshes: Sequence[TriMesh], res: int) -> VoxelGrid:
    """res cells along the longest side of the padded scene box"""
    merged = concatenate_meshes(list(meshes))
    lo, hi = aabb(merged)
    pad = 1e-6 * bbox_diagonal(merged)
    lo, hi = lo - pad, hi + pad
    pitch = float((hi - lo).max()) / res
    shape = np.clip(np.ceil((hi - lo) / pitch - 1e-9), 1, res).astype(int)
    return VoxelGrid(lo, pitch, tuple(int(s) for s in shape))


def voxelize(mesh: TriMesh, grid: VoxelGrid) -> np.ndarray:
    """
    Solid occupancy: trimesh's filled voxelization picks candidate cells,
    whose centres are then kept when inside the mesh. Open meshes fall
    back to the surface voxels alone.
    """
    surface = mesh.tm.voxelized(pitch=grid.pitch)
    if not mesh.is_closed:
        logger.warning("open mesh voxelized as a 1-voxel surface shell")
        return grid.mark(np.asarray(surface.points))
    # trimesh cells are not aligned with the grid; one ring of neighbours covers the shift
    candidates = binary_dilation(grid.mark(np.asarray(surface.fill().points)))
    cells = np.argwhere(candidates)
    inside = points_inside(mesh, grid.centers(cells))
    occ = grid.empty()
    occ[tuple(cells[inside].T)] = True
    return occ


def sibling_overlaps(scene: AssembledScene, voxel_res: int = DEFAULT_VOXEL_RES) -> List[Dict]:
    if voxel_res < 16:
        raise ValidationError("voxel_res must be >= 16")
    meshes = _rest_meshes(scene)
    pairs = scene.tree.siblings()
    if not pairs:
        return []
    grid = scene_grid(list(meshes.values()), voxel_res)
    occupancy = {}
    rows = []
    for a, b in pairs:
        for pid in (a, b):
            if pid not in occupancy:
                occupancy[pid] = voxelize(meshes[pid], grid)
        inter = int(np.count_nonzero(occupancy[a] & occupancy[b]))
        smaller = min(int(occupancy[a].sum()), int(occupancy[b].sum()))
        rows.append({
            "part_a": a,
            "part_b": b,
            "intersection_volume": inter * grid.voxel_volume,
            "overlap_ratio": inter / smaller if smaller else 0.0,
        })
    return rows


def aor(scene: AssembledScene, voxel_res: int = DEFAULT_VOXEL_RES) -> float:
    """Mean min-volume-normalized overlap over sibling pairs (0 without siblings)"""
    rows = sibling_overlaps(scene, voxel_res)
    if not rows:
        return 0.0
    return float(np.mean([r["overlap_ratio"] for r in rows]))


# ===== COV / MMD =====

@dataclass(frozen=True, eq=False)
class ReferenceSet:
    clouds: Tuple[np.ndarray, ...]

    def __post_init__(self):
        clouds = tuple(np.asarray(c, dtype=float).reshape(-1, 3) for c in self.clouds)
        if not clouds:
            raise EmptyInput("a reference set needs at least one shape")
        if len({len(c) for c in clouds}) != 1:
            raise ValidationError("all shapes in a reference set need the same sample count")
        object.__setattr__(self, "clouds", clouds)

    def __len__(self) -> int:
        return len(self.clouds)

    @classmethod
    def from_meshes(cls, meshes: Sequence[TriMesh], count: int = 2048, seed: int = 0) -> "ReferenceSet":
        if not meshes:
            raise EmptyInput("a reference set needs at least one shape")
        return cls(tuple(sample_surface(m, count, seed, include_vertices=False).positions
                         for m in meshes))


def chamfer_matrix(generated: ReferenceSet, reference: ReferenceSet) -> np.ndarray:
    return np.array([[chamfer_distance(g, r) for r in reference.clouds] for g in generated.clouds])


def cov_mmd(generated: ReferenceSet, reference: ReferenceSet) -> Tuple[float, float]:
    """
    COV: fraction of reference shapes that are the nearest reference of some
    generated shape. MMD: mean over references of the closest generated chamfer.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise EmptyInput("cov_mmd needs nonempty sets")
    dist = chamfer_matrix(generated, reference)
    covered = np.unique(np.argmin(dist, axis=1))
    cov = len(covered) / len(reference)
    mmd = float(dist.min(axis=0).mean())
    return float(cov), mmd


# ===== REPORT =====

@dataclass
class MetricsReport:
    rooted: bool
    stable: Optional[bool]
    aor: float
    pairs: List[Dict] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.pairs, columns=["part_a", "part_b", "intersection_volume", "overlap_ratio"])

    def to_json(self) -> Dict:
        return {"rooted": self.rooted, "stable": self.stable, "aor": self.aor,
                "pairs": self.pairs, "notes": self.notes}


def compute_metrics(scene: AssembledScene, config: Optional[MetricsConfig] = None) -> MetricsReport:
    config = config or MetricsConfig()
    meshes = _rest_meshes(scene)
    tol = config.rooted_tol_ratio * scene_diagonal(list(meshes.values()))
    notes = []
    try:
        is_stable = stable(scene, config.gravity, config.ground_height)
    except NoGroundContact as e:
        is_stable = None
        notes.append(str(e))
    pairs = sibling_overlaps(scene, config.voxel_res)
    aor_value = float(np.mean([r["overlap_ratio"] for r in pairs])) if pairs else 0.0
    return MetricsReport(rooted(scene, tol), is_stable, aor_value, pairs, notes)
