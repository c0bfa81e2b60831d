"""
Functionality Objectives
Black-box energies evaluated on an assembled scene over articulation poses:
reachability via inverse kinematics, packing with collision checks and
trajectory tracking.
"""

import itertools
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from errors import NoDofOnChain, ValidationError
from geometry import (TriMesh, boxes_overlap, points_inside, ray_hits, sample_surface,
                      surfaces_intersect)
from kinematics import (KinematicTree, PoseVector, forward_kinematics, posed_meshes,
                        rest_pose)
from liegroup import RigidTransform

logger = logging.getLogger(__name__)

IK_DAMPING = 1e-2
IK_STEP_CLAMP = 0.2
IK_MAX_ITERS = 200
IK_FD_STEP = 1e-6
PENETRATION_SAMPLES = 512
PENETRATION_SEED = 7
CONTACT_TOL_RATIO = 0.005


def _exit_directions() -> np.ndarray:
    dirs = [d for d in itertools.product((-1.0, 0.0, 1.0), repeat=3) if any(d)]
    dirs = np.array(dirs)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


EXIT_DIRECTIONS = _exit_directions()


# ===== SCENE =====

@dataclass(frozen=True, eq=False)
class AssembledScene:
    """A tree with placements P_k and the articulation poses to evaluate"""

    tree: KinematicTree
    placements: Mapping[str, RigidTransform]
    pose_set: Tuple[PoseVector, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "placements", dict(self.placements))
        poses = tuple(self.pose_set) or (rest_pose(self.tree),)
        object.__setattr__(self, "pose_set", poses)
        missing = [pid for pid in self.tree.non_root_ids() if pid not in self.placements]
        if missing:
            raise ValidationError(f"scene placements missing for parts: {', '.join(missing)}")

    def world(self, pose: PoseVector) -> Dict[str, RigidTransform]:
        return forward_kinematics(self.tree, pose, self.placements)

    def meshes(self, pose: PoseVector) -> Dict[str, TriMesh]:
        return posed_meshes(self.tree, pose, self.placements)

    def parent_child_pairs(self) -> Set[Tuple[str, str]]:
        pairs = set()
        for pid, part in self.tree.parts.items():
            if part.parent_id is not None:
                pairs.add(tuple(sorted((pid, part.parent_id))))
        return pairs


class Objective(ABC):
    """Black-box functionality energy: nonnegative, lower is better"""

    @abstractmethod
    def evaluate(self, scene: AssembledScene) -> float:
        ...

    def __call__(self, scene: AssembledScene) -> float:
        return self.evaluate(scene)


class NullObjective(Objective):
    """E^func ≡ 0 (attachment-only exploration)"""

    def evaluate(self, scene: AssembledScene) -> float:
        return 0.0


# ===== INVERSE KINEMATICS =====

@dataclass(frozen=True, eq=False)
class AngularTarget:
    local_axis: np.ndarray
    world_axis: np.ndarray
    max_deviation_deg: float

    def __post_init__(self):
        for name in ("local_axis", "world_axis"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            n = np.linalg.norm(v)
            if n < 1e-12:
                raise ValidationError(f"angular target {name} must be nonzero")
            object.__setattr__(self, name, v / n)
        if not 0.0 < self.max_deviation_deg <= 180.0:
            raise ValidationError("max_deviation_deg must lie in (0, 180]")


@dataclass(frozen=True, eq=False)
class ReachTarget:
    part_id: str
    effector_point: np.ndarray
    target: np.ndarray
    angular_target: Optional[AngularTarget] = None

    def __post_init__(self):
        object.__setattr__(self, "effector_point", np.array(self.effector_point, dtype=float).reshape(3))
        object.__setattr__(self, "target", np.array(self.target, dtype=float).reshape(3))


def _chain_coordinates(tree: KinematicTree, part_id: str) -> List[Tuple[str, int]]:
    if part_id not in tree.parts:
        raise ValidationError(f"unknown part '{part_id}'")
    coords = []
    for pid in tree.chain(part_id):
        joint = tree.parts[pid].joint
        if joint is None:
            continue
        for d, (lo, hi) in enumerate(joint.limits):
            if hi > lo:
                coords.append((pid, d))
    return coords


def _reach_error(tree, placements, target: ReachTarget, pose: PoseVector) -> np.ndarray:
    world = forward_kinematics(tree, pose, placements)[target.part_id]
    err = world.apply(target.effector_point) - target.target
    if target.angular_target is None:
        return err
    ang = target.angular_target
    direction = world.rotation @ ang.local_axis
    angle = math.acos(max(-1.0, min(1.0, float(direction @ ang.world_axis))))
    excess = max(0.0, angle - math.radians(ang.max_deviation_deg))
    return np.append(err, excess)


def _set_coords(pose: PoseVector, coords, values) -> PoseVector:
    table = {pid: np.array(theta, dtype=float) for pid, theta in pose.values.items()}
    for (pid, d), x in zip(coords, values):
        table[pid][d] = x
    return PoseVector(table)


def ik_solve(tree: KinematicTree, placements: Optional[Mapping[str, RigidTransform]],
             target: ReachTarget, max_iters: int = IK_MAX_ITERS,
             init_pose: Optional[PoseVector] = None,
             trace: Optional[List[float]] = None) -> Tuple[PoseVector, float]:
    """
    Damped least squares on the root-to-part chain coordinates.

    Steps are scaled to at most IK_STEP_CLAMP per coordinate and clamped to
    joint limits; a step is kept only if it lowers the error, otherwise the
    damping grows tenfold.

    Returns:
        (best pose, final residual)
    """
    coords = _chain_coordinates(tree, target.part_id)
    if not coords:
        raise NoDofOnChain(f"no movable joint between the root and '{target.part_id}'")
    pose = init_pose or rest_pose(tree)
    lower = np.array([tree.parts[pid].joint.limits[d][0] for pid, d in coords])
    upper = np.array([tree.parts[pid].joint.limits[d][1] for pid, d in coords])
    theta = np.clip(np.array([pose.values[pid][d] for pid, d in coords]), lower, upper)
    pose = _set_coords(pose, coords, theta)

    err = _reach_error(tree, placements, target, pose)
    residual = float(np.linalg.norm(err))
    if trace is not None:
        trace.append(residual)
    damping = IK_DAMPING

    for _ in range(max_iters):
        if residual < 1e-12 or damping > 1e8:
            break
        jac = np.zeros((len(err), len(coords)))
        for k in range(len(coords)):
            h = IK_FD_STEP if theta[k] + IK_FD_STEP <= upper[k] else -IK_FD_STEP
            nudged = theta.copy()
            nudged[k] += h
            jac[:, k] = (_reach_error(tree, placements, target, _set_coords(pose, coords, nudged)) - err) / h
        step = -np.linalg.solve(jac.T @ jac + damping ** 2 * np.eye(len(coords)), jac.T @ err)
        biggest = float(np.abs(step).max())
        if biggest > IK_STEP_CLAMP:
            step *= IK_STEP_CLAMP / biggest
        candidate = np.clip(theta + step, lower, upper)
        cand_pose = _set_coords(pose, coords, candidate)
        cand_err = _reach_error(tree, placements, target, cand_pose)
        cand_res = float(np.linalg.norm(cand_err))
        if cand_res < residual:
            theta, pose, err, residual = candidate, cand_pose, cand_err, cand_res
            damping = max(IK_DAMPING, damping / 10.0)
        else:
            damping *= 10.0
        if trace is not None:
            trace.append(residual)
    return pose, residual


class ReachObjective(Objective):
    """Σ over targets of the squared IK residual"""

    def __init__(self, targets: Sequence[ReachTarget], max_iters: int = IK_MAX_ITERS):
        if not targets:
            raise ValidationError("reach objective needs at least one target")
        self.targets = list(targets)
        self.max_iters = max_iters

    def evaluate(self, scene: AssembledScene) -> float:
        start = scene.pose_set[0]
        total = [ik_solve(scene.tree, scene.placements, t, self.max_iters, start)[1] ** 2
                 for t in self.targets]
        return math.fsum(total)


def reach_objective(targets: Sequence[ReachTarget]) -> Objective:
    return ReachObjective(targets)


# ===== COLLISIONS =====

def _inward_samples(mesh: TriMesh, count: int, seed: int) -> np.ndarray:
    samples = sample_surface(mesh, count, seed, include_vertices=False)
    normals = mesh.face_normals[samples.face_indices]
    return samples.positions - 1e-6 * mesh.diagonal * normals


def _exit_extent(mesh: TriMesh, points: np.ndarray, direction: np.ndarray) -> float:
    """Largest distance any point travels along direction before leaving mesh for good"""
    if len(points) == 0:
        return 0.0
    idx, t = ray_hits(mesh, points, direction)
    if len(t) == 0:
        return 0.0
    last = np.zeros(len(points))
    np.maximum.at(last, idx, t)
    return float(last.max())


def pair_penetration(a: TriMesh, b: TriMesh, samples: int = PENETRATION_SAMPLES,
                     seed: int = PENETRATION_SEED) -> float:
    """
    Approximate penetration depth of two meshes; 0 iff they do not intersect.

    Depth is the smallest, over a fixed set of directions, of the distance
    either mesh's inside samples must travel to exit the other. Pairs with
    disjoint boxes return before any ray query; the ray queries themselves
    only visit triangles the r-tree puts near each ray.
    """
    lo_a, hi_a = a.bounds
    lo_b, hi_b = b.bounds
    if not boxes_overlap(lo_a, hi_a, lo_b, hi_b):
        return 0.0
    pa = _inward_samples(a, samples, seed)
    pb = _inward_samples(b, samples, seed)
    in_a = pa[points_inside(b, pa)]
    in_b = pb[points_inside(a, pb)]
    crossing = surfaces_intersect(a, b)
    if len(in_a) == 0 and len(in_b) == 0 and not crossing:
        return 0.0

    depth = math.inf
    for d in EXIT_DIRECTIONS:
        extent = max(_exit_extent(b, in_a, d), _exit_extent(a, in_b, -d))
        depth = min(depth, extent)
    floor = 1e-6 * max(a.diagonal, b.diagonal)
    return max(depth, floor)


def collision_penetration(meshes_world: Sequence[TriMesh],
                          exempt_pairs: Optional[Set[Tuple[int, int]]] = None,
                          contact_tol_ratio: float = CONTACT_TOL_RATIO) -> float:
    """
    Sum of pairwise penetration depths.

    Args:
        meshes_world: meshes in a common frame (at least two)
        exempt_pairs: index pairs (i < j) allowed to touch within
            contact_tol_ratio × their bbox diagonal (parent-child sockets)
    """
    if len(meshes_world) < 2:
        raise ValidationError("collision_penetration needs at least two meshes")
    exempt_pairs = exempt_pairs or set()
    total = []
    for i, j in itertools.combinations(range(len(meshes_world)), 2):
        a, b = meshes_world[i], meshes_world[j]
        depth = pair_penetration(a, b)
        if (i, j) in exempt_pairs and depth <= contact_tol_ratio * max(a.diagonal, b.diagonal):
            depth = 0.0
        if depth > 0:
            logger.debug("collision between meshes %d and %d: depth %.4g", i, j, depth)
        total.append(depth)
    return math.fsum(total)


def scene_penetration(scene: AssembledScene, pose: PoseVector) -> float:
    meshes = scene.meshes(pose)
    ids = scene.tree.order()
    if len(ids) < 2:
        return 0.0
    index = {pid: k for k, pid in enumerate(ids)}
    exempt = {tuple(sorted((index[a], index[b]))) for a, b in scene.parent_child_pairs()}
    return collision_penetration([meshes[pid] for pid in ids], exempt)


# ===== PACKING =====

@dataclass(frozen=True, eq=False)
class PackSpec:
    box_center: np.ndarray
    box_half_extent: float

    def __post_init__(self):
        object.__setattr__(self, "box_center", np.array(self.box_center, dtype=float).reshape(3))
        if not self.box_half_extent > 0:
            raise ValidationError("box_half_extent must be positive")


def box_excess(mesh: TriMesh, spec: PackSpec) -> float:
    lo, hi = mesh.bounds
    over_hi = np.maximum(hi - (spec.box_center + spec.box_half_extent), 0.0)
    over_lo = np.maximum((spec.box_center - spec.box_half_extent) - lo, 0.0)
    excess = over_hi + over_lo
    return float(excess @ excess)


class PackObjective(Objective):
    """Squared AABB box excess plus collision penetration, at every pose"""

    def __init__(self, spec: PackSpec):
        self.spec = spec

    def evaluate(self, scene: AssembledScene) -> float:
        terms = []
        for pose in scene.pose_set:
            meshes = scene.meshes(pose)
            terms.extend(box_excess(m, self.spec) for m in meshes.values())
            terms.append(scene_penetration(scene, pose))
        return math.fsum(terms)


def pack_objective(spec: PackSpec) -> Objective:
    return PackObjective(spec)


# ===== TRAJECTORIES =====

@dataclass(frozen=True, eq=False)
class Trajectory:
    part_id: str
    effector_point: np.ndarray
    waypoints: Tuple[Tuple[float, np.ndarray], ...]

    def __post_init__(self):
        object.__setattr__(self, "effector_point", np.array(self.effector_point, dtype=float).reshape(3))
        points = tuple((float(t), np.array(p, dtype=float).reshape(3)) for t, p in self.waypoints)
        times = [t for t, _ in points]
        if any(t < 0.0 or t > 1.0 for t in times):
            raise ValidationError("waypoint times must lie in [0, 1]")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("waypoint times must be strictly increasing")
        object.__setattr__(self, "waypoints", points)


class TrajectoryObjective(Objective):
    """Mean squared IK residual over waypoints, warm-started along the path"""

    def __init__(self, traj: Trajectory, max_iters: int = IK_MAX_ITERS):
        if len(traj.waypoints) < 2:
            raise ValidationError("a trajectory needs at least two waypoints")
        self.traj = traj
        self.max_iters = max_iters

    def evaluate(self, scene: AssembledScene) -> float:
        pose = scene.pose_set[0]
        residuals = []
        for _, point in self.traj.waypoints:
            target = ReachTarget(self.traj.part_id, self.traj.effector_point, point)
            pose, residual = ik_solve(scene.tree, scene.placements, target, self.max_iters, pose)
            residuals.append(residual ** 2)
        return math.fsum(residuals) / len(residuals)


def trajectory_objective(traj: Trajectory) -> Objective:
    return TrajectoryObjective(traj)


# ===== COMBINATION =====

class CombinedObjective(Objective):
    def __init__(self, weighted: Sequence[Tuple[Objective, float]]):
        if not weighted:
            raise ValidationError("combine_objectives needs at least one objective")
        for _, w in weighted:
            if not w > 0:
                raise ValidationError(f"objective weights must be positive, got {w}")
        self.weighted = list(weighted)

    def evaluate(self, scene: AssembledScene) -> float:
        return math.fsum(w * obj.evaluate(scene) for obj, w in self.weighted)


def combine_objectives(weighted: Sequence[Tuple[Objective, float]]) -> Objective:
    return CombinedObjective(weighted)
