"""
Annealed Langevin Sampling
Placement search over SE(3)^K with Monte-Carlo score estimates, split
Gaussian / IGSO(3) transition kernels and inner attachment refinement
inside every target-density evaluation.

Placements here are world rest placements P_k; attachment problems are
posed relative to the parent, so E^km uses P_parent⁻¹ ∘ P_k.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from attachment import AttachmentProblem, SolverConfig, eval_ekm, solve_attachment
from errors import AllWeightsZero, ValidationError
from functionality import AssembledScene, NullObjective, Objective
from geometry import scene_diagonal
from kinematics import KinematicTree, PoseVector, posed_meshes, relative_placement, rest_pose
from liegroup import (Igso3Params, RigidTransform, igso3_log_density_grad, igso3_sample,
                      orthonormalize, rotation_drift, so3_exp, so3_log)
from priors import PinConstraint, TransformPrior, pin_energy, prior_energy

logger = logging.getLogger(__name__)

PlacementSet = Dict[str, RigidTransform]

WEIGHT_FLOOR = 1e-12
ORTHO_DRIFT = 1e-10


class ScheduleKind(Enum):
    GEOMETRIC = "geometric"


def anneal_schedule(kind, alpha_start: float, alpha_end: float, steps: int) -> List[float]:
    """Geometric interpolation α_s = α_start·(α_end/α_start)^((S−s)/(S−1)), s = S..1"""
    kind = ScheduleKind(kind) if not isinstance(kind, ScheduleKind) else kind
    if steps < 1:
        raise ValidationError("schedule needs at least one step")
    if not alpha_start >= alpha_end > 0:
        raise ValidationError("schedule needs alpha_start >= alpha_end > 0")
    if steps == 1:
        return [float(alpha_start)]
    ratio = alpha_end / alpha_start
    return [float(alpha_start * ratio ** (k / (steps - 1))) for k in range(steps)]


@dataclass(frozen=True)
class SamplerConfig:
    total_steps: int = 300
    alpha_start: float = 0.1
    alpha_end: float = 1e-3
    schedule: str = "geometric"
    score_samples: int = 30
    lam: float = 1.0
    trans_noise: Optional[float] = None   # default 0.1 x scene diagonal
    rot_noise: float = 0.3
    seed: int = 0
    inner_refine_iters: int = 3
    checkpoint_every: int = 25
    optimize_rotation: bool = True
    drift_limit: Optional[float] = None   # per-step drift cap in noise scales; None = unbounded
    threads: int = 1
    progress: bool = False

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("sampler total_steps must be >= 1")
        if self.score_samples < 1:
            raise ValidationError("sampler score_samples must be >= 1")
        if not self.alpha_start >= self.alpha_end > 0:
            raise ValidationError("sampler needs alpha_start >= alpha_end > 0")
        if not self.lam > 0:
            raise ValidationError("sampler lambda must be positive")
        if self.trans_noise is not None and not self.trans_noise > 0:
            raise ValidationError("trans_noise must be positive")
        if not self.rot_noise > 0:
            raise ValidationError("rot_noise must be positive")
        if self.drift_limit is not None and not self.drift_limit > 0:
            raise ValidationError("drift_limit must be positive")
        if self.inner_refine_iters < 0 or self.checkpoint_every < 1:
            raise ValidationError("inner_refine_iters must be >= 0 and checkpoint_every >= 1")
        ScheduleKind(self.schedule)

    @property
    def step_schedule(self) -> List[float]:
        return anneal_schedule(self.schedule, self.alpha_start, self.alpha_end, self.total_steps)


@dataclass(eq=False)
class SceneInputs:
    """Everything the target density needs"""

    tree: KinematicTree
    problems: Dict[str, AttachmentProblem] = field(default_factory=dict)
    objective: Objective = field(default_factory=NullObjective)
    priors: Dict[str, TransformPrior] = field(default_factory=dict)
    pins: Dict[str, PinConstraint] = field(default_factory=dict)
    pose_set: List[PoseVector] = field(default_factory=list)
    solver: SolverConfig = field(default_factory=SolverConfig)
    initial: Dict[str, RigidTransform] = field(default_factory=dict)
    free_parts: Optional[List[str]] = None

    def __post_init__(self):
        if not self.pose_set:
            self.pose_set = [rest_pose(self.tree)]
        if self.free_parts is None:
            self.free_parts = self.tree.non_root_ids()

    def initial_placements(self) -> PlacementSet:
        return {pid: self.initial.get(pid, RigidTransform.identity())
                for pid in self.tree.non_root_ids()}

    def scene_diagonal(self) -> float:
        meshes = posed_meshes(self.tree, self.pose_set[0], self.initial_placements())
        return scene_diagonal(list(meshes.values()))


@dataclass(frozen=True)
class EnergyBreakdown:
    ekm: float
    func: float
    prior: float
    pin: float

    def total(self, lam: float) -> float:
        return self.ekm / lam + self.func + self.prior + self.pin

    def to_json(self) -> Dict[str, float]:
        return {"ekm": self.ekm, "func": self.func, "prior": self.prior, "pin": self.pin}


def scene_energies(inputs: SceneInputs, placements: Mapping[str, RigidTransform]) -> EnergyBreakdown:
    """E^km, E^func, prior and pin energies of a configuration (no refinement)"""
    tree = inputs.tree
    nu = inputs.solver.welsch_nu
    ekm = math.fsum(eval_ekm(problem, relative_placement(tree, placements, pid), nu)
                    for pid, problem in sorted(inputs.problems.items()))
    scene = AssembledScene(tree, placements, tuple(inputs.pose_set))
    func = inputs.objective.evaluate(scene)
    prior = math.fsum(prior_energy(p, relative_placement(tree, placements, pid))
                      for pid, p in sorted(inputs.priors.items()))
    pin = math.fsum(pin_energy(p, placements.get(pid, RigidTransform.identity()), tree.parts[pid].mesh)
                    for pid, p in sorted(inputs.pins.items()))
    return EnergyBreakdown(ekm, func, prior, pin)


def refine_placements(inputs: SceneInputs, placements: Mapping[str, RigidTransform],
                      iters: int) -> PlacementSet:
    """Top-down inner attachment refinement; children keep their relative placement"""
    tree = inputs.tree
    refined: PlacementSet = {}
    config = replace(inputs.solver, max_outer_iters=iters)
    for pid in tree.non_root_ids():
        rel = relative_placement(tree, placements, pid)
        problem = inputs.problems.get(pid)
        if problem is not None and iters > 0:
            rel = solve_attachment(problem, rel, config).placement
        parent_id = tree.parts[pid].parent_id
        parent = refined.get(parent_id, placements.get(parent_id, RigidTransform.identity()))
        refined[pid] = parent @ rel
    return refined


def target_log_density(inputs: SceneInputs, placements: Mapping[str, RigidTransform],
                       lam: float, inner_refine_iters: int) -> Tuple[float, PlacementSet]:
    """
    Refine, then score: −E^km/λ − E^func − E^prior − E^pin.

    Returns:
        (log density, refined placements)
    """
    refined = refine_placements(inputs, placements, inner_refine_iters)
    energies = scene_energies(inputs, refined)
    return -energies.total(lam), refined


def propose(current: Mapping[str, RigidTransform], alpha: float, config: SamplerConfig,
            rng, parts: Optional[Sequence[str]] = None) -> PlacementSet:
    """
    Per part: translation += √α·trans_noise·N(0, I); rotation left-composed
    with an IGSO(3) draw of scale √α·rot_noise.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if config.trans_noise is None:
        raise ValidationError("propose needs a resolved trans_noise")
    parts = sorted(current) if parts is None else parts
    scale = math.sqrt(alpha)
    rot_params = Igso3Params(scale * config.rot_noise)
    out = dict(current)
    for pid in parts:
        p = current[pid]
        translation = p.translation + scale * config.trans_noise * rng.standard_normal(3)
        rotation = p.rotation
        if config.optimize_rotation:
            rotation = igso3_sample(rot_params, rng) @ rotation
        out[pid] = RigidTransform(rotation, translation)
    return out


def _mirror(current: PlacementSet, candidate: PlacementSet, parts: Sequence[str]) -> PlacementSet:
    """Antithetic partner: the displacement from current reflected"""
    out = dict(candidate)
    for pid in parts:
        c, x = current[pid], candidate[pid]
        rotation = so3_exp(-so3_log(x.rotation @ c.rotation.T)) @ c.rotation
        out[pid] = RigidTransform(rotation, 2.0 * c.translation - x.translation)
    return out


@dataclass(frozen=True, eq=False)
class Candidate:
    placements: PlacementSet
    log_density: float
    refined: PlacementSet


def sample_candidates(inputs: SceneInputs, current: PlacementSet, alpha: float,
                      config: SamplerConfig, key: Sequence[int],
                      executor: Optional[ThreadPoolExecutor] = None) -> List[Candidate]:
    """
    Draw score_samples proposals in antithetic pairs; candidate pair k uses the
    substream default_rng([*key, k]) so results do not depend on threading.
    """
    parts = list(inputs.free_parts)
    draws: List[PlacementSet] = []
    for k in range((config.score_samples + 1) // 2):
        first = propose(current, alpha, config, np.random.default_rng([*key, k]), parts)
        draws.append(first)
        if len(draws) < config.score_samples:
            draws.append(_mirror(current, first, parts))

    def evaluate(placements):
        return target_log_density(inputs, placements, config.lam, config.inner_refine_iters)

    results = list(executor.map(evaluate, draws)) if executor is not None else [evaluate(d) for d in draws]
    return [Candidate(d, logp, refined) for d, (logp, refined) in zip(draws, results)]


def score_from_candidates(current: PlacementSet, candidates: Sequence[Candidate], alpha: float,
                          config: SamplerConfig, parts: Sequence[str]) -> Dict[str, np.ndarray]:
    """Density-weighted average of ∇ log p_{s|0}; 6-vector (translation, rotation) per part"""
    logps = np.array([c.log_density for c in candidates], dtype=float)
    finite = np.isfinite(logps)
    if not finite.any():
        raise AllWeightsZero("every score candidate has zero density")
    weights = np.zeros(len(logps))
    weights[finite] = np.exp(logps[finite] - logps[finite].max())
    weights[weights < WEIGHT_FLOOR] = 0.0
    if weights.sum() <= 0:
        raise AllWeightsZero("every score candidate underflowed")
    weights /= weights.sum()

    sigma_t2 = alpha * config.trans_noise ** 2
    rot_params = Igso3Params(math.sqrt(alpha) * config.rot_noise)
    score: Dict[str, np.ndarray] = {}
    for pid in parts:
        x = current[pid]
        total = np.zeros(6)
        for w, cand in zip(weights, candidates):
            if w == 0.0:
                continue
            x0 = cand.placements[pid]
            grad = np.zeros(6)
            grad[:3] = (x0.translation - x.translation) / sigma_t2
            if config.optimize_rotation:
                grad[3:] = igso3_log_density_grad(x.rotation, x0.rotation, rot_params)
            total += w * grad
        score[pid] = total
    return score


def estimate_score(inputs: SceneInputs, current: PlacementSet, alpha: float,
                   config: SamplerConfig, key: Sequence[int] = (0, 0),
                   executor: Optional[ThreadPoolExecutor] = None
                   ) -> Tuple[Dict[str, np.ndarray], List[Candidate]]:
    candidates = sample_candidates(inputs, current, alpha, config, key, executor)
    return score_from_candidates(current, candidates, alpha, config, inputs.free_parts), candidates


def _capped(v: np.ndarray, drift_limit: Optional[float], noise: float) -> np.ndarray:
    if drift_limit is None:
        return v
    limit = drift_limit * noise
    n = float(np.linalg.norm(v))
    return v if n <= limit else v * (limit / n)


def langevin_update(current: PlacementSet, score: Mapping[str, np.ndarray], alpha: float,
                    config: SamplerConfig, rng: np.random.Generator,
                    parts: Sequence[str]) -> PlacementSet:
    """
    𝒫 ← 𝒫 + (α/2)·score + √α·ε, with the rotational part applied as a left
    exponential. With config.drift_limit set, each drift is capped at that
    many noise scales.
    """
    scale = math.sqrt(alpha)
    rot_params = Igso3Params(scale * config.rot_noise)
    out = dict(current)
    for pid in parts:
        p = current[pid]
        s = score[pid]
        drift_t = _capped(0.5 * alpha * s[:3], config.drift_limit, config.trans_noise)
        translation = p.translation + drift_t + scale * config.trans_noise * rng.standard_normal(3)
        rotation = p.rotation
        if config.optimize_rotation:
            drift_r = _capped(0.5 * alpha * s[3:], config.drift_limit, config.rot_noise)
            noise = so3_log(igso3_sample(rot_params, rng))
            rotation = so3_exp(drift_r + noise) @ rotation
            if rotation_drift(rotation) > ORTHO_DRIFT:
                rotation = orthonormalize(rotation)
        out[pid] = RigidTransform(rotation, translation)
    return out


@dataclass(frozen=True)
class StepRecord:
    step: int
    alpha: float
    current_energy: float
    best_energy: float

    def to_json(self) -> Dict:
        return {"step": self.step, "alpha": self.alpha,
                "current_energy": self.current_energy, "best_energy": self.best_energy}


@dataclass
class SamplerTrace:
    records: List[StepRecord] = field(default_factory=list)
    checkpoints: Dict[int, PlacementSet] = field(default_factory=dict)

    @property
    def best_energies(self) -> List[float]:
        return [r.best_energy for r in self.records]


def resolve_config(inputs: SceneInputs, config: SamplerConfig) -> SamplerConfig:
    if config.trans_noise is None:
        return replace(config, trans_noise=0.1 * inputs.scene_diagonal())
    return config


def run_sampler(inputs: SceneInputs, config: SamplerConfig) -> Tuple[PlacementSet, SamplerTrace]:
    """
    Annealed Langevin dynamics from a noisy initialization around the
    initial placements. Returns the best refined configuration seen (chain
    states and score candidates alike) and the per-step trace.
    """
    config = resolve_config(inputs, config)
    parts = list(inputs.free_parts)
    alphas = config.step_schedule
    trace = SamplerTrace()

    init_rng = np.random.default_rng([config.seed, 0, 1 << 20])
    current = propose(inputs.initial_placements(), 1.0, config, init_rng, parts)
    logp, refined = target_log_density(inputs, current, config.lam, config.inner_refine_iters)
    best, best_energy = refined, -logp
    logger.info("sampler start: %d steps, %d score samples, trans_noise %.4g, energy %.6g",
                config.total_steps, config.score_samples, config.trans_noise, best_energy)

    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        steps = enumerate(alphas, start=1)
        for step, alpha in tqdm(steps, total=len(alphas), disable=not config.progress, desc="langevin"):
            score, candidates = estimate_score(inputs, current, alpha, config,
                                               (config.seed, step), executor)
            for cand in candidates:
                if -cand.log_density < best_energy:
                    best, best_energy = cand.refined, -cand.log_density

            noise_rng = np.random.default_rng([config.seed, step, 1 << 20])
            current = langevin_update(current, score, alpha, config, noise_rng, parts)
            logp, refined = target_log_density(inputs, current, config.lam, config.inner_refine_iters)
            if -logp < best_energy:
                best, best_energy = refined, -logp

            trace.records.append(StepRecord(step, alpha, -logp, best_energy))
            if step % config.checkpoint_every == 0:
                trace.checkpoints[step] = dict(best)
            logger.debug("step %d alpha %.3g: current %.6g best %.6g", step, alpha, -logp, best_energy)
    finally:
        if executor is not None:
            executor.shutdown()

    logger.info("sampler done: best energy %.6g", best_energy)
    return best, trace
