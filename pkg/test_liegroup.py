"""
Tests for SO(3)/SE(3) maps, averaging and the IGSO(3) distribution
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize

from errors import AngleNearPi, EmptyInput, ValidationError
from liegroup import (Igso3Params, RigidTransform, geodesic_norm, igso3_angle_pdf,
                      igso3_log_density, igso3_log_density_grad, igso3_log_f, igso3_sample,
                      igso3_sample_angles, lie_mean, rotation_angle, se3_exp, se3_log,
                      so3_exp, so3_log)


def random_omega(rng, max_angle=math.pi - 1e-3):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_transform(rng, max_angle=1.0, max_t=1.0):
    return RigidTransform(so3_exp(random_omega(rng, max_angle)), rng.uniform(-max_t, max_t, 3))


# ===== SO(3) =====

def test_so3_exp_identity_and_quarter_turn():
    assert np.allclose(so3_exp([0.0, 0.0, 0.0]), np.eye(3))
    r = so3_exp([math.pi / 2, 0.0, 0.0])
    assert np.allclose(r @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], atol=1e-12)


def test_so3_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(10000):
        omega = random_omega(rng)
        assert np.allclose(so3_log(so3_exp(omega)), omega, atol=1e-9)


def test_so3_log_small_angle_series():
    omega = np.array([1e-9, -2e-9, 3e-9])
    assert np.allclose(so3_log(so3_exp(omega)), omega, atol=1e-18)


def test_so3_log_at_pi_has_unit_axis_and_angle_pi():
    for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.6, 0.8])):
        log = so3_log(so3_exp(axis * math.pi))
        assert abs(np.linalg.norm(log) - math.pi) < 1e-9
        assert np.allclose(so3_exp(log), so3_exp(axis * math.pi), atol=1e-9)


def test_rotation_angle_matches_norm():
    rng = np.random.default_rng(3)
    omega = random_omega(rng)
    assert abs(rotation_angle(so3_exp(omega)) - np.linalg.norm(omega)) < 1e-9


# ===== SE(3) =====

def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(ValidationError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_compose_inverse_and_associativity():
    rng = np.random.default_rng(1)
    a, b, c = (random_transform(rng) for _ in range(3))
    assert ((a @ b) @ c).almost_equal(a @ (b @ c))
    assert (a.inverse() @ a).almost_equal(RigidTransform.identity())
    p = rng.standard_normal((5, 3))
    assert np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)


def test_matrix_roundtrip():
    t = random_transform(np.random.default_rng(2))
    assert RigidTransform.from_matrix(t.matrix()).almost_equal(t)


def test_se3_roundtrip():
    rng = np.random.default_rng(4)
    for _ in range(10000):
        twist = np.concatenate([random_omega(rng), rng.uniform(-2.0, 2.0, 3)])
        assert np.allclose(se3_log(se3_exp(twist)), twist, atol=1e-9)


def test_se3_log_pure_translation():
    assert np.allclose(se3_log(RigidTransform.from_translation([1.0, 2.0, 3.0])), [0, 0, 0, 1, 2, 3])


def test_se3_log_near_pi_raises():
    t = RigidTransform(so3_exp([math.pi - 1e-8, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(AngleNearPi):
        se3_log(t)


def test_geodesic_norm_left_invariant():
    rng = np.random.default_rng(5)
    a, b, g = (random_transform(rng) for _ in range(3))
    assert abs(geodesic_norm(a, b) - geodesic_norm(g @ a, g @ b)) < 1e-9
    assert geodesic_norm(a, a) < 1e-12


def test_geodesic_norm_symmetric():
    rng = np.random.default_rng(8)
    for _ in range(200):
        a, b = random_transform(rng), random_transform(rng)
        assert abs(geodesic_norm(a, b) - geodesic_norm(b, a)) < 1e-9


def test_geodesic_norm_triangle_inequality_on_factors():
    # rotations alone and translations alone; screw motions can break it
    rng = np.random.default_rng(9)
    for _ in range(500):
        rots = [RigidTransform(so3_exp(random_omega(rng, 1.0)), np.zeros(3)) for _ in range(3)]
        moves = [RigidTransform.from_translation(rng.uniform(-1.0, 1.0, 3)) for _ in range(3)]
        for a, b, c in (rots, moves):
            assert geodesic_norm(a, c) <= geodesic_norm(a, b) + geodesic_norm(b, c) + 1e-9


def test_geodesic_norm_of_screw_motion_is_not_a_metric():
    c = RigidTransform(so3_exp([0.0, 0.0, 0.8]), so3_exp([0.0, 0.0, 0.8]) @ [0.5, 0.0, 0.0])
    b = RigidTransform(so3_exp([0.0, 0.0, 0.4]), 0.5 * c.translation)
    a = RigidTransform.identity()
    assert geodesic_norm(a, c) > geodesic_norm(a, b) + geodesic_norm(b, c)


# ===== AVERAGING =====

def test_lie_mean_of_identical_transforms():
    t = random_transform(np.random.default_rng(6))
    assert lie_mean([t, t, t]).almost_equal(t)


def test_lie_mean_empty_raises():
    with pytest.raises(EmptyInput):
        lie_mean([])


def test_lie_mean_of_symmetric_rotations_is_identity():
    ts = [RigidTransform.from_axis_angle([0.0, 0.0, a]) for a in (-0.3, 0.3)]
    assert lie_mean(ts).almost_equal(RigidTransform.identity(), 1e-12)


def test_lie_mean_left_equivariant():
    rng = np.random.default_rng(7)
    for _ in range(20):
        base = random_transform(rng)
        cluster = [base @ random_transform(rng, 0.3, 0.2) for _ in range(5)]
        g = random_transform(rng, 2.0, 3.0)
        left = lie_mean([g @ t for t in cluster])
        assert left.almost_equal(g @ lie_mean(cluster), 1e-8)


def test_lie_mean_translations_average_exactly():
    ts = [RigidTransform.from_translation(v) for v in ([0, 0, 0], [2, 0, 0], [1, 3, 0])]
    assert np.allclose(lie_mean(ts).translation, [1.0, 1.0, 0.0])


def test_lie_mean_refined_to_symmetric_centre():
    rng = np.random.default_rng(10)
    centre = random_transform(rng)
    twists = [np.concatenate([random_omega(rng, 0.15), rng.uniform(-0.15, 0.15, 3)]) for _ in range(3)]
    cluster = [centre @ se3_exp(s * xi) for xi in twists for s in (1.0, -1.0)]
    assert lie_mean(cluster, refine_iters=5).almost_equal(centre, 1e-7)


def test_lie_mean_matches_karcher_oracle():
    rng = np.random.default_rng(11)
    base = random_transform(rng)
    cluster = [base @ se3_exp(np.concatenate([random_omega(rng, 0.1), rng.uniform(-0.1, 0.1, 3)]))
               for _ in range(5)]

    def spread(m):
        return sum(geodesic_norm(m, t) ** 2 for t in cluster)

    oracle = minimize(lambda xi: spread(cluster[0] @ se3_exp(xi)), np.zeros(6), method="BFGS",
                      options={"gtol": 1e-10})
    assert abs(spread(lie_mean(cluster, refine_iters=5)) - oracle.fun) < 1e-4


# ===== IGSO(3) =====

@pytest.mark.parametrize("scale", [0.1, 0.5, 1.0])
def test_igso3_density_normalized(scale):
    params = Igso3Params(scale)
    total, _ = quad(lambda w: float(igso3_angle_pdf(w, params)[0]), 0.0, math.pi, limit=200,
                    points=[params.scale, 3.0 * params.scale])
    assert abs(total - 1.0) < 1e-3


def test_igso3_small_scale_normalized():
    params = Igso3Params(0.02)
    total, _ = quad(lambda w: float(igso3_angle_pdf(w, params)[0]), 0.0, math.pi, limit=200,
                    points=[params.scale, 3.0 * params.scale])
    assert abs(total - 1.0) < 1e-3


def test_igso3_invalid_scale():
    with pytest.raises(ValidationError):
        Igso3Params(0.0)


def test_igso3_samples_are_rotations_and_deterministic():
    params = Igso3Params(0.3)
    a = igso3_sample(params, np.random.default_rng(11))
    b = igso3_sample(params, np.random.default_rng(11))
    assert np.array_equal(a, b)
    assert np.allclose(a.T @ a, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(a) - 1.0) < 1e-9


def test_igso3_sample_angle_mean_matches_pdf():
    params = Igso3Params(0.5)
    angles = igso3_sample_angles(params, 20000, np.random.default_rng(0))
    expected, _ = quad(lambda w: w * float(igso3_angle_pdf(w, params)[0]), 0.0, math.pi, limit=200,
                    points=[params.scale, 3.0 * params.scale])
    assert abs(angles.mean() - expected) < 0.02


def test_igso3_density_peaks_at_base():
    params = Igso3Params(0.3)
    base = so3_exp([0.2, 0.1, -0.3])
    near = so3_exp([0.05, 0.0, 0.0]) @ base
    far = so3_exp([0.6, 0.0, 0.0]) @ base
    assert igso3_log_density(base, base, params) > igso3_log_density(near, base, params)
    assert igso3_log_density(near, base, params) > igso3_log_density(far, base, params)


def test_igso3_gradient_points_back_to_base():
    params = Igso3Params(0.4)
    base = np.eye(3)
    r = so3_exp([0.3, 0.0, 0.0])
    grad = igso3_log_density_grad(r, base, params)
    assert grad[0] < 0
    assert abs(grad[1]) < 1e-6 and abs(grad[2]) < 1e-6


def test_igso3_gradient_near_pi_raises():
    with pytest.raises(AngleNearPi):
        igso3_log_density_grad(so3_exp([math.pi - 1e-5, 0.0, 0.0]), np.eye(3), Igso3Params(1.0))


def test_igso3_small_scale_concentrates_at_identity():
    params = Igso3Params(1e-3)
    rng = np.random.default_rng(12)
    angles = [rotation_angle(igso3_sample(params, rng)) for _ in range(10000)]
    assert np.mean(angles) < 1e-2


@pytest.mark.parametrize("scale", [0.03, 0.5])
def test_igso3_gradient_matches_angle_derivative(scale):
    # d/dδ log p(Exp(δ) r) = (d log f / dω) along the relative rotation axis
    params = Igso3Params(scale)
    base = so3_exp([0.1, -0.2, 0.3])
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    omega = 0.4
    r = so3_exp(omega * axis) @ base
    h = 1e-5
    slope = (igso3_log_f(omega + h, params)[0] - igso3_log_f(omega - h, params)[0]) / (2.0 * h)
    grad = igso3_log_density_grad(r, base, params)
    assert np.allclose(grad, slope * axis, rtol=1e-3, atol=1e-6)


def test_igso3_gradient_vanishes_at_base():
    base = so3_exp([0.2, 0.1, -0.3])
    assert np.allclose(igso3_log_density_grad(base, base, Igso3Params(0.4)), 0.0, atol=1e-6)
