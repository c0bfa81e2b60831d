"""
Tests for the attachment energy and the local-global solver
"""

import math

import numpy as np
import pytest

from attachment import (AttachmentProblem, SolverConfig, build_problem, eval_ekm, global_step,
                        local_step, solve_attachment, welsch)
from errors import MissingSourceParent, SingularSystem, ValidationError
from geometry import (Bvh, SurfaceSamples, VdfSnapshot, compute_vdf, concatenate_meshes)
from kinematics import JointKind, JointSpec, KinematicPart, KinematicTree, PoseVector
from liegroup import RigidTransform, lie_mean, rotation_angle, so3_exp
from primitives import box, grid_plane
from priors import PinConstraint, placed_com


# ===== SCENES =====

def corner_socket():
    """Floor plus two walls meeting at the origin"""
    return concatenate_meshes([box((0, 0, -0.5), (1, 1, 0)),
                               box((-0.5, 0, 0), (0, 1, 1)),
                               box((0, -0.5, 0), (1, 0, 1))])


def corner_part_mesh():
    # grid coordinates offset per axis so no vertex is equidistant to two walls
    return box((0.06, 0.07, 0.03), (0.42, 0.33, 0.29), subdivisions=2)


def corner_scene():
    socket = corner_socket()
    part = KinematicPart("block", corner_part_mesh(), None, "socket", socket)
    tree = KinematicTree.build([KinematicPart("socket", socket), part])
    return tree, part, socket


GAP = 0.05
SIDE_GAP = 0.06


def channel(offset=(0.0, 0.0, 0.0)):
    """U channel along x: floor and two side walls"""
    mesh = concatenate_meshes([box((-0.5, -0.25, -0.3), (1.5, 0.25, 0.0)),
                               box((-0.5, -0.4 - SIDE_GAP, 0.0), (1.5, -0.1 - SIDE_GAP, 0.4)),
                               box((-0.5, 0.1 + SIDE_GAP, 0.0), (1.5, 0.4 + SIDE_GAP, 0.4))])
    return mesh.translated(offset)


def channel_scene():
    bar = box((0.0, -0.1, GAP), (1.0, 0.1, GAP + 0.2), subdivisions=2)
    slide = JointSpec(JointKind.PRISMATIC, ((0.0, 0.3),), np.array([1.0, 0.0, 0.0]))
    part = KinematicPart("bar", bar, slide, "channel", channel())
    tree = KinematicTree.build([KinematicPart("channel", channel()), part])
    return tree, part


def flap_scene():
    """Base with a post beside the hinge edge; the flap lies flat on the base at rest"""
    base = concatenate_meshes([box((0, 0, -0.5), (1, 1, 0)),
                               box((-0.3, 0.3, -0.5), (-0.1, 0.7, 0.8))])
    flap = box((0, 0, 0), (1, 1, 0.02), subdivisions=2)
    hinge = JointSpec(JointKind.REVOLUTE, ((0.0, 1.5),), np.array([0.0, -1.0, 0.0]))
    part = KinematicPart("flap", flap, hinge, "base", base)
    tree = KinematicTree.build([KinematicPart("base", base), part])
    return tree, part, base


def perturbation(rng, max_deg, max_translation):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    angle = math.radians(rng.uniform(0.0, max_deg))
    return RigidTransform(so3_exp(axis * angle), direction * rng.uniform(0.0, max_translation))


def min_clearance(problem, placement, mesh, parent):
    bvh = Bvh(parent)
    out = []
    for motion in problem.pose_motions:
        pts = (placement @ motion).apply(mesh.vertices)
        out.append(float(bvh.closest_points(pts).distances.min()))
    return out


def point_problem(points, offsets, plane_z=0.0):
    plane = Bvh(grid_plane((-2, 2), (-2, 2), plane_z, 2))
    samples = SurfaceSamples.from_points(np.asarray(points, dtype=float))
    n = len(samples)
    snap = VdfSnapshot(samples, np.asarray(offsets, dtype=float), np.tile([0.0, 0.0, 1.0], (n, 1)),
                       np.zeros(n, dtype=bool))
    return AttachmentProblem("point", [snap], plane, [PoseVector({})], samples)


# ===== WELSCH =====

def test_welsch_values():
    assert welsch(0.0, 0.5) == 0.0
    assert abs(welsch(0.5, 0.5) - (1.0 - math.exp(-0.5))) < 1e-15
    assert welsch(100.0, 0.5) > 1.0 - 1e-12
    assert welsch(-0.3, 0.5) == welsch(0.3, 0.5)
    assert np.all(np.diff(welsch(np.linspace(0.0, 2.0, 20), 0.5)) > 0)


def test_solver_config_validation():
    with pytest.raises(ValidationError):
        SolverConfig(rho=0.0)
    with pytest.raises(ValidationError):
        SolverConfig(welsch_nu=-1.0)


# ===== PROBLEM =====

def test_build_problem_one_dof_five_snapshots():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base, snapshots_per_dof=5)
    assert problem.pose_count == 5
    source = Bvh(base)
    for i, motion in enumerate(problem.pose_motions):
        posed = problem.part_rest_samples.transformed(motion)
        expected = compute_vdf(posed, source)
        assert np.array_equal(problem.reference_offsets[i], expected.offsets)


def test_build_problem_flush_contact_offsets_vanish():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base, snapshots_per_dof=5)
    rest = problem.posed_points[0]
    bottom = np.abs(rest[:, 2]) < 1e-12
    assert bottom.any()
    assert np.allclose(problem.reference_offsets[0][bottom], 0.0, atol=1e-12)


def test_build_problem_single_pose_ablation():
    tree, part, base = flap_scene()
    assert build_problem(part, tree, base, kinematics_aware=False).pose_count == 1


def test_build_problem_needs_source_parent():
    tree, part, base = flap_scene()
    orphan = KinematicPart("flap", part.mesh, part.joint, "base", None)
    with pytest.raises(MissingSourceParent):
        build_problem(orphan, tree.with_parts({"flap": orphan}), base)


def test_icp_baseline_has_zero_offsets():
    tree, part = channel_scene()
    problem = build_problem(part, tree, channel(), kinematics_aware=False, icp_baseline=True)
    assert np.all(problem.reference_offsets[0] == 0.0)


# ===== ENERGY =====

def test_self_attachment_energy_vanishes():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base)
    assert eval_ekm(problem, RigidTransform.identity()) < 1e-6 * problem.residual_count


def test_energy_bounded_by_sample_count():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base)
    far = RigidTransform.from_axis_angle([0.4, 0.2, 0.1], [3.0, -2.0, 1.0])
    energy = eval_ekm(problem, far)
    assert 0.0 <= energy < problem.residual_count


def test_planar_energy_matches_closed_form():
    heights = np.array([0.1, 0.3, 0.25])
    refs = np.array([0.05, 0.3, 0.0])
    points = np.column_stack([[0.1, -0.4, 0.7], [0.2, 0.5, -0.3], heights])
    offsets = np.column_stack([np.zeros(3), np.zeros(3), -refs])
    problem = point_problem(points, offsets)
    delta = 0.07
    expected = sum(welsch(h + delta - c, 0.5) for h, c in zip(heights, refs))
    energy = eval_ekm(problem, RigidTransform.from_translation([0.0, 0.0, delta]))
    assert abs(energy - expected) < 1e-9


# ===== LOCAL / GLOBAL =====

def test_local_step_fixed_point():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base)
    identity = RigidTransform.identity()
    q = local_step(problem, 2, identity, identity, SolverConfig())
    assert np.linalg.norm(q.axis_angle()) < 1e-6
    assert np.linalg.norm(q.translation) < 1e-6


def test_local_step_pulls_point_onto_plane():
    problem = point_problem([[0.0, 0.0, 0.2]], [[0.0, 0.0, 0.0]])
    identity = RigidTransform.identity()
    config = SolverConfig(rho=1e-8, irls_iters=10)
    q = local_step(problem, 0, identity, identity, config)
    assert abs(q.apply([0.0, 0.0, 0.2])[2]) < 1e-4


def test_local_step_huge_penalty_stays_at_anchor():
    tree, part, socket = corner_scene()
    problem = build_problem(part, tree, socket)
    anchor = RigidTransform.from_axis_angle([0.05, 0.0, 0.02], [0.02, -0.01, 0.03])
    q = local_step(problem, 0, anchor, anchor, SolverConfig(rho=1e12))
    assert q.almost_equal(anchor, 1e-6)


def test_local_step_reports_a_singular_solve(monkeypatch):
    problem = point_problem([[0.0, 0.0, 0.2]], [[0.0, 0.0, 0.0]])

    def singular(*args):
        raise np.linalg.LinAlgError("Singular matrix")

    monkeypatch.setattr(np.linalg, "solve", singular)
    with pytest.raises(SingularSystem) as info:
        local_step(problem, 0, RigidTransform.identity(), RigidTransform.identity(), SolverConfig())
    assert info.value.exit_code == 3
    assert "point" in str(info.value)


def test_global_step_delegates_to_lie_mean():
    rng = np.random.default_rng(0)
    base = RigidTransform.from_axis_angle([0.3, -0.2, 0.1], [1.0, 0.0, 0.5])
    cluster = [base @ perturbation(rng, 10.0, 0.1) for _ in range(5)]
    mean = global_step(cluster)
    reference = lie_mean(cluster)
    assert np.array_equal(mean.rotation, reference.rotation)
    assert np.array_equal(mean.translation, reference.translation)
    a = RigidTransform.from_translation([0.0, 0.0, 0.0])
    b = RigidTransform.from_translation([2.0, 4.0, 0.0])
    assert np.allclose(global_step([a, b]).translation, [1.0, 2.0, 0.0])


# ===== SOLVER =====

def test_self_attachment_converges_immediately():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base)
    result = solve_attachment(problem, RigidTransform.identity())
    assert result.converged
    assert result.iterations <= 2
    assert result.energy < 1e-6 * problem.residual_count


def test_perturbed_recovery():
    tree, part, socket = corner_scene()
    problem = build_problem(part, tree, socket)
    diag = part.mesh.diagonal
    recovered = 0
    seeds = range(50)
    for seed in seeds:
        init = perturbation(np.random.default_rng(seed), 20.0, 0.1 * diag)
        result = solve_attachment(problem, init)
        assert result.energy <= result.energy_trace[0]
        assert all(b <= a for a, b in zip(result.energy_trace, result.energy_trace[1:]))
        angle = math.degrees(rotation_angle(result.placement.rotation))
        shift = float(np.linalg.norm(result.placement.translation))
        if angle <= 2.0 and shift <= 0.01 * diag:
            recovered += 1
    assert recovered >= 45


def test_solver_is_rigidly_equivariant():
    tree, part, socket = corner_scene()
    g = RigidTransform.from_axis_angle([0.3, -0.5, 0.2], [0.7, -1.2, 2.0])
    init = perturbation(np.random.default_rng(3), 10.0, 0.03)
    base = solve_attachment(build_problem(part, tree, socket), init)
    moved = solve_attachment(build_problem(part, tree, socket.transformed(g)), g @ init)
    assert moved.placement.almost_equal(g @ base.placement, 1e-6)


def test_threads_do_not_change_results():
    tree, part, base = flap_scene()
    problem = build_problem(part, tree, base)
    init = perturbation(np.random.default_rng(1), 8.0, 0.05)
    serial = solve_attachment(problem, init, threads=1)
    threaded = solve_attachment(problem, init, threads=3)
    assert np.array_equal(serial.placement.matrix(), threaded.placement.matrix())
    assert serial.energy_trace == threaded.energy_trace


def test_hard_pin_fixes_centre_of_mass():
    tree, part, socket = corner_scene()
    problem = build_problem(part, tree, socket)
    target = np.array([0.3, 0.25, 0.2])
    pin = PinConstraint("block", target)
    result = solve_attachment(problem, RigidTransform.identity(), pin=pin, part_mesh=part.mesh)
    assert np.allclose(placed_com(result.placement, part.mesh), target, atol=1e-12)
    with pytest.raises(ValidationError):
        solve_attachment(problem, RigidTransform.identity(), pin=pin)


def test_clearance_is_preserved_and_icp_collapses_it():
    tree, part = channel_scene()
    new_parent = channel((0.0, 0.03, 0.02))
    vdf_problem = build_problem(part, tree, new_parent)
    vdf = solve_attachment(vdf_problem, RigidTransform.identity())
    clearances = min_clearance(vdf_problem, vdf.placement, part.mesh, new_parent)
    assert len(clearances) == 5
    assert all(abs(c - GAP) <= 0.2 * GAP for c in clearances)

    icp_problem = build_problem(part, tree, new_parent, kinematics_aware=False, icp_baseline=True)
    icp = solve_attachment(icp_problem, RigidTransform.identity())
    icp_clearance = min_clearance(vdf_problem, icp.placement, part.mesh, new_parent)
    assert min(icp_clearance) < GAP / 2


def test_single_pose_cannot_tell_a_flipped_flap():
    tree, part, base = flap_scene()
    flip = (RigidTransform.from_translation([0.5, 0.5, 0.0])
            @ RigidTransform.from_axis_angle([0.0, 0.0, math.pi])
            @ RigidTransform.from_translation([-0.5, -0.5, 0.0]))
    single = build_problem(part, tree, base, kinematics_aware=False)
    full = build_problem(part, tree, base, snapshots_per_dof=5)
    identity = RigidTransform.identity()

    # both placements fit the rest pose equally well
    assert eval_ekm(single, identity) < 1e-6 * single.residual_count
    assert eval_ekm(single, flip) < 1e-6 * single.residual_count
    flipped_energy = eval_ekm(full, flip)
    assert flipped_energy > 0.0

    result = solve_attachment(full, perturbation(np.random.default_rng(0), 5.0, 0.02))
    assert result.energy <= 0.9 * flipped_energy
    assert eval_ekm(full, identity) <= 0.9 * flipped_energy
