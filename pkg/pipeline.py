"""
Assembly Pipeline
Scene-config ingestion, attachment-only and full Langevin runs, pose
exports, metrics and run reports.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from attachment import SolverConfig, build_problem, solve_attachment
from errors import (IoError, KitbashError, MissingFile, MissingSourceParent, ParseError,
                    SchemaError, ValidationError)
from functionality import (AngularTarget, AssembledScene, NullObjective, Objective, PackSpec,
                           ReachTarget, Trajectory, CombinedObjective, PackObjective,
                           ReachObjective, TrajectoryObjective, IK_MAX_ITERS)
from geometry import TriMesh, aabb, concatenate_meshes, load_obj, save_obj
from kinematics import (JointKind, JointSpec, KinematicPart, KinematicTree, PoseVector,
                        check_pose, posed_meshes, relative_placement, rest_pose,
                        sample_pose_grid)
from langevin import (EnergyBreakdown, PlacementSet, SamplerConfig, SamplerTrace, SceneInputs,
                      run_sampler, scene_energies)
from liegroup import RigidTransform
from metrics import MetricsConfig, MetricsReport, compute_metrics
from priors import (DEFAULT_SIGMA, PinConstraint, TransformPrior, find_prior, load_exemplars)

logger = logging.getLogger(__name__)

VERSION = "1.0.0"
CONFIG_VERSION = 1
PLACEMENT_DIGITS = 12

TOP_KEYS = {"version", "seed", "parts", "objective", "priors", "solver", "sampler", "poses", "metrics"}
PART_KEYS = {"id", "mesh", "parent", "source_parent_mesh", "label", "joint", "initial_placement"}
JOINT_KEYS = {"kind", "limits", "axis", "origin"}
TRANSFORM_KEYS = {"rotation_axis_angle", "translation"}
PRIOR_KEYS = {"pins", "exemplars", "sigma"}
PIN_KEYS = {"part_id", "target", "weight"}
POSE_KEYS = {"snapshots_per_dof", "kinematics_aware", "icp_baseline", "sample_budget", "evaluate"}
SAMPLER_KEYS = {"total_steps", "alpha_start", "alpha_end", "schedule", "score_samples", "lam",
                "trans_noise", "rot_noise", "inner_refine_iters", "checkpoint_every",
                "optimize_rotation", "drift_limit"}
METRIC_KEYS = {"rooted_tol_ratio", "voxel_res", "gravity", "ground_height"}


# ===== CONFIG PARSING HELPERS =====

def _check_keys(block: Any, allowed, where: str, required=()) -> Dict:
    if not isinstance(block, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise SchemaError(f"{where}: unknown keys {unknown}")
    missing = sorted(set(required) - set(block))
    if missing:
        raise SchemaError(f"{where}: missing keys {missing}")
    return block


def _vector(value, where: str, size: int = 3) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float).reshape(size)
    except (TypeError, ValueError):
        raise ParseError(f"expected {size} numbers", field=where)
    if not np.all(np.isfinite(arr)):
        raise ParseError("values must be finite", field=where)
    return arr


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError("expected a number", field=where)
    return float(value)


def _transform(block, where: str) -> RigidTransform:
    _check_keys(block, TRANSFORM_KEYS, where, required=TRANSFORM_KEYS)
    try:
        return RigidTransform.from_axis_angle(
            _vector(block["rotation_axis_angle"], f"{where}.rotation_axis_angle"),
            _vector(block["translation"], f"{where}.translation"))
    except KitbashError:
        raise
    except ValueError as e:
        raise ParseError(str(e), field=where)


def _dataclass_block(cls, block, allowed, where: str, **extra):
    _check_keys(block, allowed, where)
    try:
        return cls(**block, **extra)
    except TypeError as e:
        raise ParseError(str(e), field=where)


def _resolve(base_dir: str, rel: Any, where: str) -> str:
    if not isinstance(rel, str) or not rel:
        raise ParseError("expected a file path", field=where)
    return os.path.normpath(os.path.join(base_dir, rel))


# ===== SCENE CONFIG =====

@dataclass(frozen=True)
class PoseConfig:
    snapshots_per_dof: int = 5
    kinematics_aware: bool = True
    icp_baseline: bool = False
    sample_budget: int = 2000
    evaluate: Tuple[PoseVector, ...] = ()


@dataclass(frozen=True, eq=False)
class PriorsConfig:
    pins: Tuple[PinConstraint, ...] = ()
    exemplars: Tuple[TransformPrior, ...] = ()
    sigma: float = DEFAULT_SIGMA


@dataclass(frozen=True, eq=False)
class SceneConfig:
    """A parsed, validated scene: tree with meshes loaded plus every settings block"""

    path: str
    seed: int
    tree: KinematicTree
    initial: Dict[str, RigidTransform]
    objective: Optional[Objective]
    priors: PriorsConfig
    solver: SolverConfig
    sampler: Dict[str, Any]
    poses: PoseConfig
    metrics: MetricsConfig
    raw: Dict[str, Any] = field(default_factory=dict)

    def pose_set(self) -> List[PoseVector]:
        return list(self.poses.evaluate) or [rest_pose(self.tree)]

    def sampler_config(self, threads: int = 1, progress: bool = False) -> SamplerConfig:
        return SamplerConfig(**self.sampler, seed=self.seed, threads=threads, progress=progress)

    def with_seed(self, seed: int) -> "SceneConfig":
        raw = dict(self.raw, seed=seed)
        return SceneConfig(self.path, seed, self.tree, self.initial, self.objective, self.priors,
                           self.solver, self.sampler, self.poses, self.metrics, raw)


def _parse_joint(block, where: str) -> JointSpec:
    _check_keys(block, JOINT_KEYS, where, required={"kind", "limits"})
    try:
        kind = JointKind(block["kind"])
    except ValueError:
        raise SchemaError(f"{where}.kind: unknown joint kind {block['kind']!r}")
    limits = block["limits"]
    if not isinstance(limits, list) or not all(isinstance(l, list) and len(l) == 2 for l in limits):
        raise ParseError("limits must be a list of [lo, hi] pairs", field=f"{where}.limits")
    limits = [(_number(lo, f"{where}.limits"), _number(hi, f"{where}.limits")) for lo, hi in limits]
    kwargs = {}
    if "axis" in block:
        kwargs["axis"] = _vector(block["axis"], f"{where}.axis")
    if "origin" in block:
        kwargs["origin"] = _transform(block["origin"], f"{where}.origin")
    return JointSpec(kind, tuple(limits), **kwargs)


def _parse_pose(block, tree: KinematicTree, where: str) -> PoseVector:
    if not isinstance(block, dict):
        raise SchemaError(f"{where}: a pose is an object of part id -> joint values")
    pose = rest_pose(tree)
    for pid, values in block.items():
        part = tree.parts.get(pid)
        if part is None or part.joint is None:
            raise SchemaError(f"{where}: '{pid}' is not a jointed part")
        pose = pose.with_values(pid, _vector(values, f"{where}.{pid}", part.dof))
    check_pose(tree, pose)
    return pose


def build_objective(block, part_ids, where: str = "objective") -> Objective:
    """Objective from its config block: reach, pack, trajectory, combined or none"""
    if not isinstance(block, dict) or "kind" not in block:
        raise SchemaError(f"{where}: objective needs a 'kind'")
    kind = block["kind"]

    def known(pid, key):
        if pid not in part_ids:
            raise SchemaError(f"{where}.{key}: unknown part '{pid}'")
        return pid

    if kind == "none":
        _check_keys(block, {"kind"}, where)
        return NullObjective()
    if kind == "reach":
        _check_keys(block, {"kind", "targets", "max_iters"}, where, required={"targets"})
        targets = []
        for i, t in enumerate(block["targets"]):
            w = f"{where}.targets[{i}]"
            _check_keys(t, {"part_id", "effector_point", "target", "angular_target"}, w,
                        required={"part_id", "effector_point", "target"})
            angular = None
            if "angular_target" in t:
                a = _check_keys(t["angular_target"], {"local_axis", "world_axis", "max_deviation_deg"},
                                f"{w}.angular_target", required={"local_axis", "world_axis", "max_deviation_deg"})
                angular = AngularTarget(_vector(a["local_axis"], f"{w}.local_axis"),
                                        _vector(a["world_axis"], f"{w}.world_axis"),
                                        _number(a["max_deviation_deg"], f"{w}.max_deviation_deg"))
            targets.append(ReachTarget(known(t["part_id"], w),
                                       _vector(t["effector_point"], f"{w}.effector_point"),
                                       _vector(t["target"], f"{w}.target"), angular))
        return ReachObjective(targets, int(block.get("max_iters", IK_MAX_ITERS)))
    if kind == "pack":
        _check_keys(block, {"kind", "box_center", "box_half_extent"}, where,
                    required={"box_center", "box_half_extent"})
        return PackObjective(PackSpec(_vector(block["box_center"], f"{where}.box_center"),
                                      _number(block["box_half_extent"], f"{where}.box_half_extent")))
    if kind == "trajectory":
        _check_keys(block, {"kind", "part_id", "effector_point", "waypoints", "max_iters"}, where,
                    required={"part_id", "effector_point", "waypoints"})
        try:
            waypoints = [(float(t), _vector(p, f"{where}.waypoints")) for t, p in block["waypoints"]]
        except (TypeError, ValueError):
            raise ParseError("waypoints are [time, [x, y, z]] pairs", field=f"{where}.waypoints")
        traj = Trajectory(known(block["part_id"], "part_id"),
                          _vector(block["effector_point"], f"{where}.effector_point"), tuple(waypoints))
        return TrajectoryObjective(traj, int(block.get("max_iters", IK_MAX_ITERS)))
    if kind == "combined":
        _check_keys(block, {"kind", "terms"}, where, required={"terms"})
        weighted = []
        for i, term in enumerate(block["terms"]):
            w = f"{where}.terms[{i}]"
            _check_keys(term, {"objective", "weight"}, w, required={"objective"})
            weighted.append((build_objective(term["objective"], part_ids, f"{w}.objective"),
                             _number(term.get("weight", 1.0), f"{w}.weight")))
        return CombinedObjective(weighted)
    raise SchemaError(f"{where}.kind: unknown objective kind {kind!r}")


def load_scene(path) -> SceneConfig:
    """
    Parse and validate a scene config JSON; meshes and exemplar files are
    resolved relative to the config file.
    """
    path = str(path)
    if not os.path.exists(path):
        raise MissingFile(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {path}: {e.msg}", line=e.lineno, column=e.colno)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}")

    _check_keys(raw, TOP_KEYS, "config", required={"version", "parts"})
    if raw["version"] != CONFIG_VERSION:
        raise SchemaError(f"config: unsupported version {raw['version']!r} (expected {CONFIG_VERSION})")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ParseError("seed must be a nonnegative integer", field="seed")
    if not isinstance(raw["parts"], list) or not raw["parts"]:
        raise SchemaError("config.parts: expected a nonempty list")

    base_dir = os.path.dirname(os.path.abspath(path))
    mesh_cache: Dict[str, TriMesh] = {}

    def mesh_at(rel, where):
        full = _resolve(base_dir, rel, where)
        if full not in mesh_cache:
            mesh_cache[full] = load_obj(full)
        return mesh_cache[full]

    parts, initial = [], {}
    for i, block in enumerate(raw["parts"]):
        where = f"parts[{i}]"
        _check_keys(block, PART_KEYS, where, required={"id", "mesh"})
        pid = block["id"]
        if not isinstance(pid, str) or not pid:
            raise ParseError("part id must be a nonempty string", field=f"{where}.id")
        joint = _parse_joint(block["joint"], f"{where}.joint") if block.get("joint") is not None else None
        source = (mesh_at(block["source_parent_mesh"], f"{where}.source_parent_mesh")
                  if block.get("source_parent_mesh") is not None else None)
        if block.get("initial_placement") is not None:
            initial[pid] = _transform(block["initial_placement"], f"{where}.initial_placement")
        parts.append(KinematicPart(pid, mesh_at(block["mesh"], f"{where}.mesh"), joint,
                                   block.get("parent"), source, block.get("label")))
    tree = KinematicTree.build(parts)
    if tree.root_id in initial:
        raise SchemaError(f"config: the root part '{tree.root_id}' cannot carry an initial placement")

    objective = build_objective(raw["objective"], set(tree.parts)) if raw.get("objective") is not None else None

    prior_block = _check_keys(raw.get("priors", {}), PRIOR_KEYS, "priors")
    sigma = _number(prior_block.get("sigma", DEFAULT_SIGMA), "priors.sigma")
    pins = []
    for i, pin in enumerate(prior_block.get("pins", [])):
        w = f"priors.pins[{i}]"
        _check_keys(pin, PIN_KEYS, w, required={"part_id", "target"})
        if pin["part_id"] not in tree.parts or pin["part_id"] == tree.root_id:
            raise SchemaError(f"{w}: pins need a non-root part, got '{pin['part_id']}'")
        pins.append(PinConstraint(pin["part_id"], _vector(pin["target"], f"{w}.target"),
                                  _number(pin.get("weight", 1.0), f"{w}.weight")))
    exemplars = ()
    if prior_block.get("exemplars") is not None:
        exemplars = tuple(load_exemplars(_resolve(base_dir, prior_block["exemplars"], "priors.exemplars"), sigma))

    solver = _dataclass_block(SolverConfig, raw.get("solver", {}),
                              {f.name for f in fields(SolverConfig)}, "solver")
    sampler = dict(_check_keys(raw.get("sampler", {}), SAMPLER_KEYS, "sampler"))
    _dataclass_block(SamplerConfig, sampler, SAMPLER_KEYS, "sampler")

    pose_block = dict(_check_keys(raw.get("poses", {}), POSE_KEYS, "poses"))
    evaluate = tuple(_parse_pose(p, tree, f"poses.evaluate[{i}]")
                     for i, p in enumerate(pose_block.pop("evaluate", [])))
    poses = _dataclass_block(PoseConfig, pose_block, POSE_KEYS - {"evaluate"}, "poses", evaluate=evaluate)

    metrics_block = dict(_check_keys(raw.get("metrics", {}), METRIC_KEYS, "metrics"))
    if "gravity" in metrics_block:
        metrics_block["gravity"] = tuple(_vector(metrics_block["gravity"], "metrics.gravity"))
    metrics = _dataclass_block(MetricsConfig, metrics_block, METRIC_KEYS, "metrics")

    logger.info("loaded scene %s: %d parts, %d DoF, objective=%s", path, len(tree.parts),
                tree.total_dof(), type(objective).__name__ if objective else "none")
    return SceneConfig(path, seed, tree, initial, objective,
                       PriorsConfig(tuple(pins), exemplars, sigma), solver, sampler, poses, metrics, raw)


# ===== PLACEMENT JSON =====

def _round(x: float) -> float:
    return float(f"{x:.{PLACEMENT_DIGITS}g}")


def placements_to_json(placements: PlacementSet) -> List[Dict]:
    out = []
    for pid in sorted(placements):
        p = placements[pid]
        out.append({"part_id": pid,
                    "rotation_axis_angle": [_round(x) for x in p.axis_angle()],
                    "translation": [_round(x) for x in p.translation]})
    return out


def format_placements(placements: PlacementSet) -> str:
    return json.dumps(placements_to_json(placements), indent=2) + "\n"


def load_placements(path, tree: Optional[KinematicTree] = None) -> PlacementSet:
    """Read a placement file; with a tree, every id must name one of its non-root parts"""
    path = str(path)
    if not os.path.exists(path):
        raise MissingFile(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {path}: {e.msg}", line=e.lineno, column=e.colno)
    if not isinstance(data, list):
        raise SchemaError(f"{path}: placement file must hold a JSON array")
    allowed = set(tree.non_root_ids()) if tree is not None else None
    placements = {}
    for i, entry in enumerate(data):
        keys = {"part_id"} | TRANSFORM_KEYS
        _check_keys(entry, keys, f"{path}[{i}]", required=keys)
        pid = entry["part_id"]
        if allowed is not None and pid not in allowed:
            raise ValidationError(f"{path}[{i}]: unknown part '{pid}' in placement file")
        placements[pid] = _transform({k: entry[k] for k in TRANSFORM_KEYS}, f"[{i}]")
    return placements


# ===== OUTPUT =====

class OutputDir:
    """All run artefacts go through here; nothing is written outside root"""

    def __init__(self, root):
        self.root = os.path.abspath(str(root))

    def path(self, *names: str) -> str:
        full = os.path.abspath(os.path.join(self.root, *names))
        if os.path.commonpath([full, self.root]) != self.root:
            raise IoError(f"refusing to write outside the output directory: {full}")
        try:
            os.makedirs(os.path.dirname(full), exist_ok=True)
        except OSError as e:
            raise IoError(f"cannot create {os.path.dirname(full)}: {e}")
        return full

    def write_text(self, name: str, text: str) -> str:
        full = self.path(name)
        try:
            with open(full, "w", encoding="utf-8") as f:
                f.write(text)
        except OSError as e:
            raise IoError(f"cannot write {full}: {e}")
        return full


def export_poses(tree: KinematicTree, placements: PlacementSet, pose_list: Sequence[PoseVector],
                 out_dir, subdir: str = "poses") -> Dict:
    """
    One OBJ per pose holding every placed, posed part merged in tree order,
    plus manifest.json listing the files, the pose parameters and the face
    range each part occupies.
    """
    out = out_dir if isinstance(out_dir, OutputDir) else OutputDir(out_dir)
    if not pose_list:
        raise ValidationError("export_poses needs at least one pose")
    files, poses, spans = [], [], []
    for i, pose in enumerate(pose_list):
        meshes = posed_meshes(tree, pose, placements)
        name = f"pose_{i:03d}.obj"
        spans = save_obj(out.path(subdir, name), [(pid, meshes[pid]) for pid in tree.order()])
        files.append(name)
        poses.append(pose.to_json())
    manifest = {"files": files, "poses": poses, "parts": tree.order(),
                "face_ranges": {pid: [start, end] for pid, start, end in spans}}
    out.write_text(os.path.join(subdir, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    logger.info("exported %d poses to %s", len(files), out.path(subdir))
    return manifest


def format_trace(trace: SamplerTrace) -> str:
    lines = [json.dumps(r.to_json()) for r in trace.records]
    for step in sorted(trace.checkpoints):
        lines.append(json.dumps({"checkpoint": step,
                                 "placements": placements_to_json(trace.checkpoints[step])}))
    return "\n".join(lines) + "\n"


def trace_chart(trace: SamplerTrace) -> go.Figure:
    steps = [r.step for r in trace.records]
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=steps, y=[r.current_energy for r in trace.records],
                             mode="lines", name="current"))
    fig.add_trace(go.Scatter(x=steps, y=trace.best_energies, mode="lines", name="best so far"))
    fig.update_layout(title="Langevin energy trace", xaxis_title="step", yaxis_title="energy")
    return fig


# ===== RUNS =====

@dataclass
class RunReport:
    mode: str
    placements: PlacementSet
    energies: EnergyBreakdown
    metrics: Optional[MetricsReport]
    timings: Dict[str, float]
    config: Dict[str, Any]
    seed: int
    version: str = VERSION
    details: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict:
        return {
            "mode": self.mode,
            "version": self.version,
            "seed": self.seed,
            "placements": placements_to_json(self.placements),
            "energies": self.energies.to_json(),
            "metrics": self.metrics.to_json() if self.metrics else None,
            "timings": self.timings,
            "details": self.details,
            "config": self.config,
        }


def build_inputs(config: SceneConfig, objective: Optional[Objective] = None,
                 require_sources: bool = False) -> SceneInputs:
    """Attachment problems, priors and pins for every non-root part"""
    tree = config.tree
    problems, priors, pins = {}, {}, {}
    for pid in tree.non_root_ids():
        part = tree.parts[pid]
        parent = tree.parts[part.parent_id]
        if part.source_parent_mesh is None and not config.poses.icp_baseline:
            if require_sources:
                raise MissingSourceParent(f"part '{pid}' has no source parent mesh")
        else:
            try:
                problems[pid] = build_problem(part, tree, parent.mesh,
                                              config.poses.snapshots_per_dof,
                                              config.poses.kinematics_aware,
                                              config.poses.icp_baseline,
                                              config.poses.sample_budget, config.seed)
            except KitbashError as e:
                raise e.with_context(f"part '{pid}'")
        prior = find_prior(config.priors.exemplars, parent.label, part.label)
        if prior is not None:
            priors[pid] = prior
    for pin in config.priors.pins:
        pins[pin.part_id] = pin
    return SceneInputs(tree, problems, objective or config.objective or NullObjective(), priors,
                       pins, config.pose_set(), config.solver, dict(config.initial))


def aabb_volume(meshes: Sequence[TriMesh]) -> float:
    lo, hi = aabb(concatenate_meshes(list(meshes)))
    return float(np.prod(hi - lo))


def volume_reduction(tree: KinematicTree, placements: PlacementSet,
                     pose_set: Sequence[PoseVector]) -> Dict[str, float]:
    """AABB volume at the rest pose (deployed) against the last evaluated pose (folded)"""
    deployed = aabb_volume(list(posed_meshes(tree, rest_pose(tree), placements).values()))
    folded = aabb_volume(list(posed_meshes(tree, pose_set[-1], placements).values()))
    return {"deployed_volume": deployed, "folded_volume": folded,
            "ratio": folded / deployed if deployed > 0 else math.nan}


def run_metrics(config: SceneConfig, placements: PlacementSet) -> MetricsReport:
    scene = AssembledScene(config.tree, placements, tuple(config.pose_set()))
    return compute_metrics(scene, config.metrics)


def _finish(mode: str, config: SceneConfig, inputs: SceneInputs, placements: PlacementSet,
            timings: Dict[str, float], details: Dict, out: OutputDir, with_metrics: bool) -> RunReport:
    start = time.perf_counter()
    energies = scene_energies(inputs, placements)
    timings["energies"] = time.perf_counter() - start

    metrics = None
    if with_metrics:
        start = time.perf_counter()
        metrics = run_metrics(config, placements)
        timings["metrics"] = time.perf_counter() - start
        metrics.to_frame().to_csv(out.path("metrics_pairs.csv"), index=False)

    start = time.perf_counter()
    details["exports"] = export_poses(config.tree, placements, config.pose_set(), out)
    timings["export"] = time.perf_counter() - start

    report = RunReport(mode, placements, energies, metrics, timings, config.raw, config.seed,
                       details=details)
    out.write_text("placements.json", format_placements(placements))
    out.write_text("report.json", json.dumps(report.to_json(), indent=2, default=float) + "\n")
    return report


def run_attach(config: SceneConfig, out_dir, threads: int = 1, with_metrics: bool = True) -> RunReport:
    """
    Attachment-only assembly: every non-root part is solved against its
    parent, top-down, from its initial placement relative to the parent's
    initial placement (identity by default). Solved parents carry their
    children along.
    """
    out = OutputDir(out_dir)
    timings: Dict[str, float] = {}
    start = time.perf_counter()
    inputs = build_inputs(config, require_sources=True)
    timings["setup"] = time.perf_counter() - start

    tree = config.tree
    world: PlacementSet = {}
    per_part = {}
    start = time.perf_counter()
    for pid in tree.non_root_ids():
        part = tree.parts[pid]
        parent_world = world.get(part.parent_id, RigidTransform.identity())
        init = relative_placement(tree, config.initial, pid)
        pin = inputs.pins.get(pid)
        if pin is not None:
            pin = PinConstraint(pid, parent_world.inverse().apply(pin.target), pin.weight)
        try:
            result = solve_attachment(inputs.problems[pid], init, config.solver, pin, part.mesh, threads)
        except KitbashError as e:
            raise e.with_context(f"part '{pid}'")
        world[pid] = parent_world @ result.placement
        per_part[pid] = {"energy": result.energy, "initial_energy": result.energy_trace[0],
                         "iterations": result.iterations, "converged": result.converged,
                         "energy_trace": result.energy_trace}
    timings["attach"] = time.perf_counter() - start

    return _finish("attach", config, inputs, world, timings, {"parts": per_part}, out, with_metrics)


def run_full(config: SceneConfig, out_dir, threads: int = 1, progress: bool = False,
             with_metrics: bool = True) -> RunReport:
    """Langevin placement search over every non-root part under the configured objective"""
    if config.objective is None:
        raise ValidationError("run_full needs an objective block; use the attach subcommand "
                              "for attachment-only assembly")
    out = OutputDir(out_dir)
    timings: Dict[str, float] = {}
    start = time.perf_counter()
    inputs = build_inputs(config)
    sampler = config.sampler_config(threads, progress)
    timings["setup"] = time.perf_counter() - start

    start = time.perf_counter()
    best, trace = run_sampler(inputs, sampler)
    timings["sample"] = time.perf_counter() - start

    out.write_text("trace.ndjson", format_trace(trace))
    trace_chart(trace).write_html(out.path("trace.html"), include_plotlyjs="cdn")
    pd.DataFrame([r.to_json() for r in trace.records]).to_csv(out.path("trace.csv"), index=False)

    details = {"final_best_energy": trace.best_energies[-1] if trace.records else None,
               "steps": len(trace.records)}
    if len(config.poses.evaluate) > 0:
        details["volume_reduction"] = volume_reduction(config.tree, best, config.pose_set())
    return _finish("solve", config, inputs, best, timings, details, out, with_metrics)


def export_pose_list(config: SceneConfig, snapshots: Optional[int] = None) -> List[PoseVector]:
    """Configured evaluation poses, else the articulation snapshot grid"""
    if config.poses.evaluate:
        return list(config.poses.evaluate)
    return sample_pose_grid(config.tree, snapshots or config.poses.snapshots_per_dof)
