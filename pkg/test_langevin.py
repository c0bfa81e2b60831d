"""
Tests for the annealed Langevin placement sampler
"""

import math

import numpy as np
import pytest

from attachment import build_problem
from errors import AllWeightsZero, ValidationError
from functionality import AssembledScene, NullObjective, Objective
from kinematics import KinematicPart, KinematicTree
from langevin import (Candidate, EnergyBreakdown, SamplerConfig, SceneInputs, anneal_schedule,
                      estimate_score, langevin_update, propose, refine_placements, run_sampler,
                      scene_energies, score_from_candidates, target_log_density)
from liegroup import Igso3Params, RigidTransform, igso3_log_density_grad, rotation_angle
from primitives import box

TARGET = np.array([0.5, 0.0, 0.0])


class PullToTarget(Objective):
    """stiffness·‖t − target‖² on the world translation of one part"""

    def __init__(self, part_id="p", target=TARGET, stiffness=10.0):
        self.part_id = part_id
        self.target = np.asarray(target, dtype=float)
        self.stiffness = stiffness

    def evaluate(self, scene: AssembledScene) -> float:
        d = scene.placements[self.part_id].translation - self.target
        return float(self.stiffness * (d @ d))


class AlongX(Objective):
    """(x − 2)²/2 on the x translation of part p only"""

    def evaluate(self, scene: AssembledScene) -> float:
        x = scene.placements["p"].translation[0]
        return float(0.5 * (x - 2.0) ** 2)


class Impossible(Objective):
    def evaluate(self, scene: AssembledScene) -> float:
        return math.inf


def free_block_inputs(objective=None):
    tree = KinematicTree.build([KinematicPart("ground", box((-1, -1, -0.1), (1, 1, 0))),
                                KinematicPart("p", box((0, 0, 0), (0.2, 0.2, 0.2)), None, "ground")])
    return SceneInputs(tree, objective=objective or PullToTarget())


def small_scene_inputs(objective):
    tree = KinematicTree.build([KinematicPart("ground", box((-0.1, -0.1, -0.02), (0.1, 0.1, 0))),
                                KinematicPart("p", box((0, 0, 0), (0.05, 0.05, 0.05)), None, "ground")])
    return SceneInputs(tree, objective=objective)


def translation_config(**overrides):
    settings = dict(total_steps=60, score_samples=16, trans_noise=0.2, rot_noise=0.3,
                    optimize_rotation=False, inner_refine_iters=0, checkpoint_every=20, seed=3)
    settings.update(overrides)
    return SamplerConfig(**settings)


# ===== SCHEDULE / CONFIG =====

def test_geometric_schedule():
    alphas = anneal_schedule("geometric", 0.1, 1e-3, 5)
    assert alphas[0] == pytest.approx(0.1)
    assert alphas[-1] == pytest.approx(1e-3)
    ratios = [b / a for a, b in zip(alphas, alphas[1:])]
    assert np.allclose(ratios, ratios[0])
    assert anneal_schedule("geometric", 0.1, 1e-3, 1) == [0.1]


def test_schedule_validation():
    with pytest.raises(ValidationError):
        anneal_schedule("geometric", 1e-3, 0.1, 5)
    with pytest.raises(ValidationError):
        anneal_schedule("geometric", 0.1, 1e-3, 0)
    with pytest.raises(ValueError):
        anneal_schedule("cosine", 0.1, 1e-3, 5)


def test_sampler_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(total_steps=0)
    with pytest.raises(ValidationError):
        SamplerConfig(lam=0.0)
    with pytest.raises(ValidationError):
        SamplerConfig(trans_noise=-1.0)
    with pytest.raises(ValidationError):
        SamplerConfig(drift_limit=0.0)
    assert len(SamplerConfig(total_steps=7).step_schedule) == 7


def test_energy_breakdown_total():
    e = EnergyBreakdown(ekm=4.0, func=1.0, prior=0.5, pin=0.25)
    assert e.total(2.0) == pytest.approx(3.75)
    assert e.to_json() == {"ekm": 4.0, "func": 1.0, "prior": 0.5, "pin": 0.25}


# ===== PROPOSALS =====

def test_propose_is_seeded_and_translation_only():
    current = {"p": RigidTransform.from_axis_angle([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])}
    config = translation_config()
    a = propose(current, 0.04, config, np.random.default_rng(5))
    b = propose(current, 0.04, config, np.random.default_rng(5))
    assert np.array_equal(a["p"].translation, b["p"].translation)
    assert np.array_equal(a["p"].rotation, current["p"].rotation)


def test_propose_translation_spread():
    current = {"p": RigidTransform.identity()}
    config = translation_config()
    rng = np.random.default_rng(0)
    draws = np.array([propose(current, 0.25, config, rng)["p"].translation for _ in range(4000)])
    assert np.allclose(draws.mean(axis=0), 0.0, atol=0.01)
    assert np.allclose(draws.std(axis=0), 0.5 * 0.2, rtol=0.05)


def test_propose_rotates_when_enabled():
    current = {"p": RigidTransform.identity()}
    moved = propose(current, 0.1, translation_config(optimize_rotation=True), np.random.default_rng(1))
    assert not np.allclose(moved["p"].rotation, np.eye(3))


# ===== SCORE =====

def test_score_from_single_candidate_points_at_it():
    current = {"p": RigidTransform.identity()}
    config = translation_config()
    x0 = {"p": RigidTransform.from_translation([0.02, -0.01, 0.0])}
    score = score_from_candidates(current, [Candidate(x0, -1.0, x0)], 0.01, config, ["p"])
    sigma2 = 0.01 * 0.2 ** 2
    assert np.allclose(score["p"][:3], [0.02 / sigma2, -0.01 / sigma2, 0.0])
    assert np.all(score["p"][3:] == 0.0)


def test_score_points_toward_lower_energy():
    inputs = free_block_inputs()
    current = {"p": RigidTransform.identity()}
    score, candidates = estimate_score(inputs, current, 0.1, translation_config(score_samples=32))
    assert len(candidates) == 32
    assert score["p"][0] > 0.0


def test_antithetic_candidates_mirror_each_other():
    inputs = free_block_inputs()
    current = {"p": RigidTransform.from_translation([0.1, 0.1, 0.1])}
    _, candidates = estimate_score(inputs, current, 0.1, translation_config(score_samples=6))
    for first, second in zip(candidates[0::2], candidates[1::2]):
        mid = 0.5 * (first.placements["p"].translation + second.placements["p"].translation)
        assert np.allclose(mid, [0.1, 0.1, 0.1], atol=1e-12)


def test_all_zero_weights_raise():
    inputs = free_block_inputs(Impossible())
    with pytest.raises(AllWeightsZero):
        estimate_score(inputs, {"p": RigidTransform.identity()}, 0.1, translation_config())


def surrogate_score(samples, seed):
    """x-component of the estimated score at x = 0 under (x − 2)²/2"""
    inputs = free_block_inputs(AlongX())
    config = translation_config(score_samples=samples, trans_noise=1.0)
    score, _ = estimate_score(inputs, {"p": RigidTransform.identity()}, 0.25, config, (seed, 0))
    return score["p"][0]


def test_score_matches_smoothed_gradient_on_the_surrogate():
    # the Gaussian-smoothed density of exp(−(x − 2)²/2) has score (2 − x)/(1 + σ²)
    sigma2 = 0.25 * 1.0 ** 2
    exact = 2.0 / (1.0 + sigma2)
    estimate = surrogate_score(1000, 0)
    assert estimate > 0.0
    assert abs(estimate - exact) < 0.15 * exact
    medians = [np.median([abs(surrogate_score(n, seed) - exact) for seed in range(50)])
               for n in (10, 100, 1000)]
    assert medians[0] > medians[1] > medians[2]


def test_score_variance_halves_when_samples_double():
    small = np.var([surrogate_score(50, seed) for seed in range(100)])
    large = np.var([surrogate_score(100, seed) for seed in range(100, 200)])
    assert 1.25 < small / large < 3.2


def test_flat_energy_gives_uniform_weights():
    inputs = free_block_inputs(NullObjective())
    current = {"p": RigidTransform.from_axis_angle([0.2, 0.1, -0.3], [0.3, 0.1, 0.0])}
    config = translation_config(score_samples=9, optimize_rotation=True)
    alpha = 0.05
    score, candidates = estimate_score(inputs, current, alpha, config, (4, 1))
    params = Igso3Params(math.sqrt(alpha) * config.rot_noise)
    x = current["p"]
    grads = [np.concatenate([(c.placements["p"].translation - x.translation) / (alpha * 0.2 ** 2),
                             igso3_log_density_grad(x.rotation, c.placements["p"].rotation, params)])
             for c in candidates]
    assert np.allclose(score["p"], np.mean(grads, axis=0), atol=1e-9)


# ===== TARGET DENSITY =====

def test_target_density_matches_energies():
    inputs = free_block_inputs()
    placements = {"p": RigidTransform.from_translation([0.1, 0.0, 0.0])}
    logp, refined = target_log_density(inputs, placements, 1.0, 0)
    assert logp == pytest.approx(-10.0 * 0.16)
    assert refined["p"].almost_equal(placements["p"], 1e-15)


def test_inner_refinement_lowers_attachment_energy():
    plate = box((-1, -1, -0.2), (1, 1, 0), subdivisions=1)
    cube = box((-0.1, -0.1, 0.0), (0.1, 0.1, 0.2), subdivisions=2)
    part = KinematicPart("cube", cube, None, "plate", plate)
    tree = KinematicTree.build([KinematicPart("plate", plate), part])
    inputs = SceneInputs(tree, problems={"cube": build_problem(part, tree, plate)})
    lifted = {"cube": RigidTransform.from_axis_angle([0.1, 0.0, 0.0], [0.0, 0.0, 0.05])}
    refined = refine_placements(inputs, lifted, 3)
    assert scene_energies(inputs, refined).ekm <= scene_energies(inputs, lifted).ekm
    assert scene_energies(inputs, refined).ekm < 0.5 * scene_energies(inputs, lifted).ekm


# ===== UPDATE =====

def test_update_applies_full_drift():
    current = {"p": RigidTransform.identity()}
    config = translation_config()
    score = {"p": np.array([250.0, 0.0, 0.0, 0.0, 0.0, 0.0])}
    moved = langevin_update(current, score, 0.01, config, np.random.default_rng(7), ["p"])
    noise = math.sqrt(0.01) * 0.2 * np.random.default_rng(7).standard_normal(3)
    assert np.allclose(moved["p"].translation, [1.25, 0.0, 0.0] + noise, atol=1e-12)
    assert np.array_equal(moved["p"].rotation, np.eye(3))


def test_update_drift_limit_caps_the_step():
    current = {"p": RigidTransform.identity()}
    config = translation_config(drift_limit=1.0)
    score = {"p": np.array([250.0, 0.0, 0.0, 0.0, 0.0, 0.0])}
    moved = langevin_update(current, score, 0.01, config, np.random.default_rng(7), ["p"])
    noise = math.sqrt(0.01) * 0.2 * np.random.default_rng(7).standard_normal(3)
    assert np.allclose(moved["p"].translation, [0.2, 0.0, 0.0] + noise, atol=1e-12)


def test_update_keeps_rotations_orthonormal():
    current = {"p": RigidTransform.from_axis_angle([0.3, -0.2, 0.1], [0.0, 0.0, 0.0])}
    config = translation_config(optimize_rotation=True)
    score = {"p": np.array([0.0, 0.0, 0.0, 40.0, -25.0, 10.0])}
    rng = np.random.default_rng(2)
    for _ in range(50):
        current = langevin_update(current, score, 0.1, config, rng, ["p"])
    r = current["p"].rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-8)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-8)


# ===== SAMPLER =====

def test_sampler_finds_quadratic_optimum():
    inputs = free_block_inputs()
    best, trace = run_sampler(inputs, translation_config())
    assert np.linalg.norm(best["p"].translation - TARGET) < 0.05
    assert np.allclose(best["p"].rotation, np.eye(3))
    energies = trace.best_energies
    assert len(energies) == 60
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert sorted(trace.checkpoints) == [20, 40, 60]


def test_drift_limit_keeps_stiff_energies_stable():
    inputs = free_block_inputs(PullToTarget(stiffness=200.0))
    best, trace = run_sampler(inputs, translation_config(drift_limit=1.0))
    assert np.linalg.norm(best["p"].translation - TARGET) < 0.05
    assert all(math.isfinite(r.current_energy) for r in trace.records)


def test_default_sampler_reaches_known_optimum_across_seeds():
    target = np.array([1.0, 2.0, 3.0])
    inputs = small_scene_inputs(PullToTarget(target=target, stiffness=1.0))
    hits = 0
    for seed in range(10):
        best, _ = run_sampler(inputs, SamplerConfig(optimize_rotation=False, seed=seed))
        p = best["p"]
        close = np.linalg.norm(p.translation - target) < 0.05
        upright = math.degrees(rotation_angle(p.rotation)) < 5.0
        hits += int(close and upright)
    assert hits >= 8


def test_sampler_is_deterministic_across_threads():
    inputs = free_block_inputs()
    config = translation_config(total_steps=10)
    best_a, trace_a = run_sampler(inputs, config)
    best_b, trace_b = run_sampler(inputs, config)
    best_c, trace_c = run_sampler(inputs, translation_config(total_steps=10, threads=3))
    assert np.array_equal(best_a["p"].translation, best_b["p"].translation)
    assert np.array_equal(best_a["p"].translation, best_c["p"].translation)
    assert trace_a.best_energies == trace_b.best_energies == trace_c.best_energies


def test_sampler_seed_changes_path():
    inputs = free_block_inputs()
    _, a = run_sampler(inputs, translation_config(total_steps=5, seed=1))
    _, b = run_sampler(inputs, translation_config(total_steps=5, seed=2))
    assert [r.current_energy for r in a.records] != [r.current_energy for r in b.records]


def test_default_translation_noise_follows_scene_size():
    inputs = free_block_inputs()
    _, trace = run_sampler(inputs, SamplerConfig(total_steps=2, score_samples=2, inner_refine_iters=0))
    assert len(trace.records) == 2
    assert inputs.scene_diagonal() > 0.0
