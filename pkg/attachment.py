"""
Kinematics-Aware Attachment
Robust point-to-plane VDF attachment energy E^km and its alternating
local-global minimization over SE(3).

A part's placement is expressed relative to its (new) parent's rest frame.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import AngleNearPi, MissingSourceParent, SingularSystem, ValidationError
from geometry import (Bvh, SurfaceSamples, TriMesh, VdfSnapshot, build_bvh, compute_vdf,
                      default_vdf_samples)
from kinematics import (KinematicPart, KinematicTree, PoseVector, lower_pose, part_motion,
                        sample_pose_grid)
from liegroup import RigidTransform, lie_mean, se3_exp, se3_log
from priors import PinConstraint, pin_placement

logger = logging.getLogger(__name__)

BACKTRACK_STEPS = 10


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1e4
    max_outer_iters: int = 20
    irls_iters: int = 4
    welsch_nu: float = 0.5
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if not self.rho > 0:
            raise ValidationError(f"rho must be positive, got {self.rho}")
        if not self.welsch_nu > 0:
            raise ValidationError(f"welsch_nu must be positive, got {self.welsch_nu}")
        if self.max_outer_iters < 0 or self.irls_iters < 1:
            raise ValidationError("max_outer_iters must be >= 0 and irls_iters >= 1")
        if not self.convergence_tol > 0:
            raise ValidationError("convergence_tol must be positive")


@dataclass(eq=False)
class AttachmentProblem:
    """
    Precomputed reference VDFs of one part against its source parent,
    one snapshot per sampled articulation pose.
    """

    part_id: str
    reference_vdfs: List[VdfSnapshot]
    new_parent: Bvh
    poses: List[PoseVector]
    part_rest_samples: SurfaceSamples
    pose_motions: List[RigidTransform] = field(default_factory=list)

    def __post_init__(self):
        if not self.reference_vdfs or len(self.reference_vdfs) != len(self.poses):
            raise ValidationError("reference_vdfs and poses must be nonempty and of equal length")
        if not self.pose_motions:
            self.pose_motions = [RigidTransform.identity()] * len(self.poses)
        # sample positions in the part frame at each pose
        self.posed_points = [snap.samples.positions for snap in self.reference_vdfs]
        self.reference_offsets = [snap.offsets for snap in self.reference_vdfs]

    @property
    def pose_count(self) -> int:
        return len(self.poses)

    @property
    def residual_count(self) -> int:
        return sum(len(p) for p in self.posed_points)


def welsch(x, nu: float):
    """ψ_ν(x) = 1 − exp(−x²/(2ν²))"""
    x = np.asarray(x, dtype=float)
    out = -np.expm1(-(x * x) / (2.0 * nu * nu))
    return float(out) if out.ndim == 0 else out


def build_problem(part: KinematicPart, tree: KinematicTree, new_parent: Union[TriMesh, Bvh],
                  snapshots_per_dof: int = 5, kinematics_aware: bool = True,
                  icp_baseline: bool = False, sample_budget: int = 2000,
                  seed: int = 0) -> AttachmentProblem:
    """
    Precompute the reference VDFs for one child-parent pair.

    Args:
        part: the part to attach (its source_parent_mesh gives the reference)
        tree: kinematic tree holding the part's joint
        new_parent: mesh (or prebuilt Bvh) of the new parent, in its rest frame
        snapshots_per_dof: articulation snapshots per DoF
        kinematics_aware: False keeps only the lower-limit pose (N = 1)
        icp_baseline: zero reference offsets (plain robust point-to-plane ICP)

    Returns:
        AttachmentProblem
    """
    if part.source_parent_mesh is None and not icp_baseline:
        raise MissingSourceParent(f"part '{part.id}' has no source parent mesh")
    parent_bvh = new_parent if isinstance(new_parent, Bvh) else build_bvh(new_parent)
    samples = default_vdf_samples(part.mesh, sample_budget, seed)

    if kinematics_aware:
        poses = sample_pose_grid(tree, snapshots_per_dof, part_ids=[part.id])
    else:
        poses = [lower_pose(tree)]
    motions = [part_motion(part, pose) for pose in poses]

    source_bvh = None if icp_baseline else build_bvh(part.source_parent_mesh)
    snapshots = []
    for motion in motions:
        posed = samples.transformed(motion)
        if source_bvh is None:
            n = len(posed)
            snapshots.append(VdfSnapshot(posed, np.zeros((n, 3)), np.zeros((n, 3)),
                                         np.zeros(n, dtype=bool)))
        else:
            snapshots.append(compute_vdf(posed, source_bvh))
    logger.debug("attachment problem for '%s': %d poses x %d samples",
                 part.id, len(poses), len(samples))
    return AttachmentProblem(part.id, snapshots, parent_bvh, poses, samples, motions)


def _pose_residuals(problem: AttachmentProblem, i: int, q: RigidTransform):
    """Point-to-plane residuals at pose i for placement q, degenerate samples dropped"""
    x = problem.posed_points[i]
    u = problem.reference_offsets[i]
    y = q.apply(x)
    proj = problem.new_parent.closest_points(y)
    keep = ~proj.degenerate
    if not keep.all():
        logger.debug("pose %d of '%s': dropped %d degenerate-normal samples",
                     i, problem.part_id, int((~keep).sum()))
    r = q.apply_vectors(u) - (proj.points - y)
    e = np.einsum("ij,ij->i", r, proj.normals)
    return e[keep], proj.normals[keep], x[keep], u[keep]


def pose_energy(problem: AttachmentProblem, i: int, q: RigidTransform, nu: float) -> float:
    e, _, _, _ = _pose_residuals(problem, i, q)
    return float(welsch(e, nu).sum()) if len(e) else 0.0


def eval_ekm(problem: AttachmentProblem, placement: RigidTransform, nu: float = 0.5) -> float:
    """Σ over poses and samples of ψ_ν(r·n̂), correspondences recomputed"""
    return math.fsum(pose_energy(problem, i, placement, nu) for i in range(problem.pose_count))


def _penalty_weight(problem: AttachmentProblem, config: SolverConfig) -> float:
    return config.rho / max(problem.residual_count, 1)


def _local_objective(problem, i, q, anchor, config, rho_eff) -> float:
    try:
        g = se3_log(q.inverse() @ anchor)
    except AngleNearPi:
        return math.inf
    return pose_energy(problem, i, q, config.welsch_nu) + 0.5 * rho_eff * float(g @ g)


def local_step(problem: AttachmentProblem, pose_index: int, anchor: RigidTransform,
               q_init: RigidTransform, config: SolverConfig) -> RigidTransform:
    """
    IRLS on E^km_i(Q) + (ρ/2)‖Log(Q⁻¹P)‖², linearized in a right twist Q·Exp(δ).
    Each sweep is accepted only if the objective does not increase.
    """
    nu2 = config.welsch_nu ** 2
    rho_eff = _penalty_weight(problem, config)
    q = q_init
    current = _local_objective(problem, pose_index, q, anchor, config, rho_eff)

    for sweep in range(config.irls_iters):
        e, normals, x, u = _pose_residuals(problem, pose_index, q)
        m = normals @ q.rotation            # Rᵀn per row
        jac = np.hstack([np.cross(u + x, m), m])
        w = np.exp(-(e * e) / (2.0 * nu2)) / nu2

        g = se3_log(q.inverse() @ anchor)
        lhs = (jac * w[:, None]).T @ jac + rho_eff * np.eye(6)
        rhs = -(jac * w[:, None]).T @ e + rho_eff * g
        try:
            delta = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            # rho > 0 keeps lhs positive definite; only a bypassed SolverConfig gets here
            raise SingularSystem(f"local step normal matrix is singular for part '{problem.part_id}'")

        accepted = False
        step = 1.0
        for _ in range(BACKTRACK_STEPS):
            candidate = q @ se3_exp(step * delta)
            value = _local_objective(problem, pose_index, candidate, anchor, config, rho_eff)
            if value <= current:
                q, current, accepted = candidate, value, True
                break
            step *= 0.5
        if not accepted or float(np.linalg.norm(step * delta)) < 1e-12:
            break
    return q


def global_step(per_pose: Sequence[RigidTransform]) -> RigidTransform:
    return lie_mean(per_pose)


@dataclass
class AttachmentResult:
    placement: RigidTransform
    per_pose_transforms: List[RigidTransform]
    energy_trace: List[float]
    converged: bool
    iterations: int = 0

    @property
    def energy(self) -> float:
        return self.energy_trace[-1]


def solve_attachment(problem: AttachmentProblem, init: RigidTransform,
                     config: Optional[SolverConfig] = None,
                     pin: Optional[PinConstraint] = None,
                     part_mesh: Optional[TriMesh] = None,
                     threads: int = 1) -> AttachmentResult:
    """
    Alternate per-pose local steps and a Lie-algebra global step.

    Args:
        problem: precomputed attachment problem
        init: initial placement (relative to the new parent)
        config: solver settings
        pin: optional hard centre-of-mass pin (translation re-projected every iteration)
        part_mesh: part rest mesh, needed with pin
        threads: worker threads for the per-pose local steps

    Returns:
        AttachmentResult with the best placement seen; energy_trace[k] is the
        best energy after k outer iterations
    """
    config = config or SolverConfig()
    if pin is not None:
        if part_mesh is None:
            raise ValidationError("a pinned solve needs the part mesh")
        init = pin_placement(pin, init, part_mesh)

    nu = config.welsch_nu
    current = init
    energy = eval_ekm(problem, current, nu)
    best, best_energy = current, energy
    trace = [energy]
    per_pose = [current] * problem.pose_count
    tiny = 1e-15 * max(problem.residual_count, 1)
    converged = energy <= tiny
    iterations = 0

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while not converged and iterations < config.max_outer_iters:
            anchor = current

            def run(i):
                return local_step(problem, i, anchor, anchor, config)

            if executor is not None:
                per_pose = list(executor.map(run, range(problem.pose_count)))
            else:
                per_pose = [run(i) for i in range(problem.pose_count)]

            current = global_step(per_pose)
            if pin is not None:
                current = pin_placement(pin, current, part_mesh)
            new_energy = eval_ekm(problem, current, nu)
            iterations += 1
            if new_energy < best_energy:
                best, best_energy = current, new_energy
            trace.append(best_energy)
            logger.debug("attach '%s' iter %d: E=%.6g best=%.6g",
                         problem.part_id, iterations, new_energy, best_energy)

            decrease = (energy - new_energy) / max(energy, tiny)
            if new_energy <= tiny or abs(decrease) < config.convergence_tol:
                converged = True
            energy = new_energy
    finally:
        if executor is not None:
            executor.shutdown()

    logger.info("attached '%s' in %d iterations, energy %.6g -> %.6g",
                problem.part_id, iterations, trace[0], best_energy)
    return AttachmentResult(best, per_pose, trace, converged, iterations)
