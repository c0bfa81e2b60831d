"""
Kinematic Trees
Joint models, tree validation, forward kinematics and articulation-pose sampling.

Joint motions act in the part's own (source) coordinates and are conjugated
by the joint origin, so theta = 0 leaves the part at rest.
"""

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import (DofMismatch, LimitViolation, MissingJointValue, TreeError,
                    ValidationError)
from geometry import TriMesh
from liegroup import RigidTransform, so3_exp

logger = logging.getLogger(__name__)

LIMIT_TOL = 1e-12
DEFAULT_SNAPSHOTS = 5
FULL_PRODUCT_MAX_DOF = 3


class JointKind(Enum):
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"
    CYLINDRICAL = "cylindrical"
    CARTESIAN = "cartesian"

    @property
    def dof(self) -> int:
        return {"revolute": 1, "prismatic": 1, "cylindrical": 2, "cartesian": 3}[self.value]

    @property
    def rotational(self) -> Tuple[bool, ...]:
        """Which coordinates are angles"""
        return {"revolute": (True,), "prismatic": (False,), "cylindrical": (True, False),
                "cartesian": (False, False, False)}[self.value]


@dataclass(frozen=True, eq=False)
class JointSpec:
    kind: JointKind
    limits: Tuple[Tuple[float, float], ...]
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    origin: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        kind = JointKind(self.kind) if not isinstance(self.kind, JointKind) else self.kind
        object.__setattr__(self, "kind", kind)
        limits = tuple((float(lo), float(hi)) for lo, hi in self.limits)
        if len(limits) != kind.dof:
            raise DofMismatch(f"{kind.value} joint needs {kind.dof} limit intervals, got {len(limits)}")
        for lo, hi in limits:
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValidationError(f"joint limits must be finite with lo <= hi, got [{lo}, {hi}]")
        object.__setattr__(self, "limits", limits)
        axis = np.array(self.axis, dtype=float).reshape(3)
        if kind is not JointKind.CARTESIAN and abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValidationError(f"joint axis must be unit length, got {axis.tolist()}")
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)

    @property
    def dof(self) -> int:
        return self.kind.dof

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.limits])

    def clamp(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class KinematicPart:
    id: str
    mesh: TriMesh
    joint: Optional[JointSpec] = None
    parent_id: Optional[str] = None
    source_parent_mesh: Optional[TriMesh] = None
    label: Optional[str] = None
    initial_placement: Optional[RigidTransform] = None

    @property
    def dof(self) -> int:
        return self.joint.dof if self.joint is not None else 0


@dataclass(frozen=True)
class PoseVector:
    """Joint coordinates per part id"""

    values: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for pid, theta in dict(self.values).items():
            arr = np.array(theta, dtype=float).reshape(-1)
            arr.setflags(write=False)
            frozen[pid] = arr
        object.__setattr__(self, "values", frozen)

    def get(self, part_id: str) -> Optional[np.ndarray]:
        return self.values.get(part_id)

    def with_values(self, part_id: str, theta) -> "PoseVector":
        values = dict(self.values)
        values[part_id] = theta
        return PoseVector(values)

    def to_json(self) -> Dict[str, List[float]]:
        return {pid: [float(x) for x in theta] for pid, theta in sorted(self.values.items())}


@dataclass(frozen=True, eq=False)
class KinematicTree:
    parts: Mapping[str, KinematicPart]
    root_id: str

    @classmethod
    def build(cls, parts: Iterable[KinematicPart]) -> "KinematicTree":
        """Assemble and validate a tree, finding the root automatically"""
        parts = list(parts)
        table = {p.id: p for p in parts}
        if len(table) != len(parts):
            raise TreeError(["duplicate part ids"])
        roots = [p.id for p in parts if p.parent_id is None]
        tree = cls(table, roots[0] if roots else "")
        diagnostics = validate_tree(tree)
        if diagnostics:
            raise TreeError(diagnostics)
        return tree

    def children(self, part_id: str) -> List[str]:
        return sorted(p.id for p in self.parts.values() if p.parent_id == part_id)

    def order(self) -> List[str]:
        """Breadth-first order from the root, children sorted by id"""
        out, queue = [], deque([self.root_id])
        while queue:
            pid = queue.popleft()
            out.append(pid)
            queue.extend(self.children(pid))
        return out

    def non_root_ids(self) -> List[str]:
        return [pid for pid in self.order() if pid != self.root_id]

    def chain(self, part_id: str) -> List[str]:
        """Part ids from the root down to part_id"""
        out = [part_id]
        while self.parts[out[-1]].parent_id is not None:
            out.append(self.parts[out[-1]].parent_id)
        return out[::-1]

    def siblings(self) -> List[Tuple[str, str]]:
        pairs = []
        for pid in self.order():
            kids = self.children(pid)
            pairs.extend(itertools.combinations(kids, 2))
        return pairs

    def total_dof(self) -> int:
        return sum(p.dof for p in self.parts.values())

    def with_parts(self, replacements: Mapping[str, KinematicPart]) -> "KinematicTree":
        parts = dict(self.parts)
        parts.update(replacements)
        return KinematicTree(parts, self.root_id)


def validate_tree(tree: KinematicTree) -> List[str]:
    """Rooted-tree checks; an empty list means the tree is valid"""
    diagnostics: List[str] = []
    parts = tree.parts
    roots = sorted(pid for pid, p in parts.items() if p.parent_id is None)
    if not roots:
        diagnostics.append("no root part (every part has a parent)")
    elif len(roots) > 1:
        diagnostics.append(f"multiple roots: {', '.join(roots)}")
    if tree.root_id not in parts:
        diagnostics.append(f"root '{tree.root_id}' not in parts")
    elif parts[tree.root_id].parent_id is not None:
        diagnostics.append(f"root '{tree.root_id}' has a parent")

    for pid in sorted(parts):
        parent = parts[pid].parent_id
        if parent is not None and parent not in parts:
            diagnostics.append(f"dangling parent: part '{pid}' references missing parent '{parent}'")

    reported = set()
    for pid in sorted(parts):
        seen = [pid]
        cur = parts[pid].parent_id
        while cur is not None and cur in parts:
            if cur in seen:
                cycle = seen[seen.index(cur):]
                key = frozenset(cycle)
                if key not in reported:
                    reported.add(key)
                    diagnostics.append(f"cycle: {' -> '.join(cycle + [cur])}")
                break
            seen.append(cur)
            cur = parts[cur].parent_id

    if tree.root_id in parts and not diagnostics:
        reachable = set(tree.order())
        missing = sorted(set(parts) - reachable)
        if missing:
            diagnostics.append(f"unreachable parts: {', '.join(missing)}")
    return diagnostics


def joint_motion(spec: JointSpec, theta) -> RigidTransform:
    """Rigid motion of a joint at coordinates theta, conjugated by the joint origin"""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if len(theta) != spec.dof:
        raise DofMismatch(f"{spec.kind.value} joint takes {spec.dof} coordinates, got {len(theta)}")
    if np.any(theta < spec.lower - LIMIT_TOL) or np.any(theta > spec.upper + LIMIT_TOL):
        raise LimitViolation(f"joint coordinates {theta.tolist()} outside limits {list(spec.limits)}")

    axis = spec.axis
    if spec.kind is JointKind.REVOLUTE:
        local = RigidTransform(so3_exp(theta[0] * axis), np.zeros(3))
    elif spec.kind is JointKind.PRISMATIC:
        local = RigidTransform.from_translation(theta[0] * axis)
    elif spec.kind is JointKind.CYLINDRICAL:
        local = RigidTransform(so3_exp(theta[0] * axis), theta[1] * axis)
    else:
        local = RigidTransform.from_translation(theta)
    return spec.origin @ local @ spec.origin.inverse()


def part_motion(part: KinematicPart, pose: PoseVector) -> RigidTransform:
    if part.joint is None:
        return RigidTransform.identity()
    theta = pose.get(part.id)
    if theta is None:
        raise MissingJointValue(f"pose has no value for jointed part '{part.id}'")
    return joint_motion(part.joint, theta)


def relative_placement(tree: KinematicTree, placements: Optional[Mapping[str, RigidTransform]],
                       part_id: str) -> RigidTransform:
    """P_parent⁻¹ ∘ P_k; identity where no placement is given"""
    placements = placements or {}
    own = placements.get(part_id, RigidTransform.identity())
    parent_id = tree.parts[part_id].parent_id
    if parent_id is None:
        return own
    parent = placements.get(parent_id, RigidTransform.identity())
    return parent.inverse() @ own


def forward_kinematics(tree: KinematicTree, pose: PoseVector,
                       placements: Optional[Mapping[str, RigidTransform]] = None
                       ) -> Dict[str, RigidTransform]:
    """
    World transform of every part at a pose.

    Args:
        tree: kinematic tree
        pose: joint coordinates for every jointed part
        placements: optional rest placements P_k (identity when omitted)

    Returns:
        Map part id -> world transform W_k = W_parent ∘ (P_parent⁻¹ ∘ P_k) ∘ J_k(theta_k)
    """
    world: Dict[str, RigidTransform] = {}
    for pid in tree.order():
        part = tree.parts[pid]
        motion = part_motion(part, pose)
        rel = relative_placement(tree, placements, pid)
        if part.parent_id is None:
            world[pid] = rel @ motion
        else:
            world[pid] = world[part.parent_id] @ rel @ motion
    return world


def posed_meshes(tree: KinematicTree, pose: PoseVector,
                 placements: Optional[Mapping[str, RigidTransform]] = None) -> Dict[str, TriMesh]:
    world = forward_kinematics(tree, pose, placements)
    return {pid: tree.parts[pid].mesh.transformed(world[pid]) for pid in tree.order()}


def lower_pose(tree: KinematicTree) -> PoseVector:
    return PoseVector({pid: p.joint.lower for pid, p in tree.parts.items() if p.joint is not None})


def rest_pose(tree: KinematicTree) -> PoseVector:
    """Zero coordinates clamped into each joint's limits"""
    return PoseVector({pid: p.joint.clamp(np.zeros(p.dof))
                       for pid, p in tree.parts.items() if p.joint is not None})


def check_pose(tree: KinematicTree, pose: PoseVector) -> None:
    for pid, part in tree.parts.items():
        if part.joint is not None:
            joint_motion(part.joint, part_motion_value(pose, pid))


def part_motion_value(pose: PoseVector, part_id: str) -> np.ndarray:
    theta = pose.get(part_id)
    if theta is None:
        raise MissingJointValue(f"pose has no value for jointed part '{part_id}'")
    return theta


def sample_pose_grid(tree: KinematicTree, snapshots_per_dof: int = DEFAULT_SNAPSHOTS,
                     part_ids: Optional[Sequence[str]] = None,
                     full_product: bool = False) -> List[PoseVector]:
    """
    Articulation snapshots uniformly spaced over joint ranges (both limits included).

    One DoF varies at a time with every other joint at its lower limit.
    full_product=True takes the grid product instead; only allowed when the
    varied joints have at most 3 DoFs in total.
    """
    if snapshots_per_dof < 2:
        raise ValidationError("snapshots_per_dof must be >= 2")
    base = lower_pose(tree)
    ids = [pid for pid in tree.order() if tree.parts[pid].joint is not None]
    if part_ids is not None:
        ids = [pid for pid in ids if pid in set(part_ids)]
    if not ids:
        return [base]

    axes = []  # (part id, dof index, values)
    for pid in ids:
        joint = tree.parts[pid].joint
        for d, (lo, hi) in enumerate(joint.limits):
            axes.append((pid, d, np.linspace(lo, hi, snapshots_per_dof)))

    poses: List[PoseVector] = []
    if full_product:
        if len(axes) > FULL_PRODUCT_MAX_DOF:
            raise ValidationError(f"full-product pose grid needs <= {FULL_PRODUCT_MAX_DOF} DoFs, got {len(axes)}")
        for combo in itertools.product(*(values for _, _, values in axes)):
            values = {pid: np.array(v, dtype=float) for pid, v in base.values.items()}
            for (pid, d, _), x in zip(axes, combo):
                values[pid][d] = x
            poses.append(PoseVector(values))
        return poses

    for pid, d, values in axes:
        for x in values:
            theta = np.array(base.values[pid], dtype=float)
            theta[d] = x
            poses.append(base.with_values(pid, theta))
    return poses
