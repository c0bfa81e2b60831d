"""
Attachment Priors
User centre-of-mass pins and the Gaussian-mixture prior over relative
transforms built from exemplar attachments.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import EmptyInput, IoError, MissingFile, ParseError, SchemaError, ValidationError
from geometry import TriMesh
from liegroup import RigidTransform, se3_log

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.3
EXEMPLAR_KEYS = {"parent_label", "child_label", "rotation_axis_angle", "translation"}


@dataclass(frozen=True, eq=False)
class PinConstraint:
    part_id: str
    target: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        target = np.array(self.target, dtype=float).reshape(3)
        target.setflags(write=False)
        object.__setattr__(self, "target", target)
        if not self.weight > 0:
            raise ValidationError(f"pin weight must be positive, got {self.weight}")


def placed_com(placement: RigidTransform, part_mesh: TriMesh) -> np.ndarray:
    return placement.apply(part_mesh.surface_centroid)


def pin_energy(pin: PinConstraint, placement: RigidTransform, part_mesh: TriMesh) -> float:
    """weight × ‖COM(placed mesh) − target‖²"""
    d = placed_com(placement, part_mesh) - pin.target
    return float(pin.weight * (d @ d))


def pin_placement(pin: PinConstraint, placement: RigidTransform, part_mesh: TriMesh) -> RigidTransform:
    """Re-translate so the placed centre of mass sits exactly on the target"""
    translation = pin.target - placement.rotation @ part_mesh.surface_centroid
    return RigidTransform(placement.rotation, translation)


@dataclass(frozen=True, eq=False)
class TransformPrior:
    exemplars: Tuple[RigidTransform, ...]
    sigma: float = DEFAULT_SIGMA
    label_pair: Tuple[Optional[str], Optional[str]] = (None, None)

    def __post_init__(self):
        object.__setattr__(self, "exemplars", tuple(self.exemplars))
        if not self.exemplars:
            raise EmptyInput("a transform prior needs at least one exemplar")
        if not self.sigma > 0:
            raise ValidationError(f"prior sigma must be positive, got {self.sigma}")

    def matches(self, parent_label: Optional[str], child_label: Optional[str]) -> bool:
        return self.label_pair == (parent_label, child_label)


def fit_prior(exemplars: Sequence[RigidTransform], sigma: float = DEFAULT_SIGMA,
              labels: Tuple[Optional[str], Optional[str]] = (None, None)) -> TransformPrior:
    """Kernel density estimate: exemplars are stored as-is"""
    if not exemplars:
        raise EmptyInput("fit_prior needs at least one exemplar")
    return TransformPrior(tuple(exemplars), sigma, tuple(labels))


def prior_energy(prior: TransformPrior, placement: RigidTransform) -> float:
    """−log of the mixture density (1/M) Σ (2πσ²)^-1/2 exp(−‖Log(P̂ⱼ⁻¹P)‖²/(2σ²))"""
    s2 = prior.sigma ** 2
    exps = []
    for exemplar in prior.exemplars:
        twist = se3_log(exemplar.inverse() @ placement)
        exps.append(-float(twist @ twist) / (2.0 * s2))
    log_density = (float(logsumexp(exps)) - math.log(len(exps))
                   - 0.5 * math.log(2.0 * math.pi * s2))
    return -log_density


def load_exemplars(path, sigma: float = DEFAULT_SIGMA) -> List[TransformPrior]:
    """
    Read exemplar relative transforms from JSON and group them by label pair.

    The file is an array of {parent_label, child_label, rotation_axis_angle, translation}.
    """
    path = str(path)
    if not os.path.exists(path):
        raise MissingFile(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {path}: {e.msg}", line=e.lineno, column=e.colno)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}")
    if not isinstance(data, list):
        raise SchemaError(f"{path}: exemplar file must hold a JSON array")

    groups: Dict[Tuple[str, str], List[RigidTransform]] = {}
    for i, entry in enumerate(data):
        where = f"[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{path}{where}: exemplar must be an object")
        unknown = set(entry) - EXEMPLAR_KEYS
        missing = EXEMPLAR_KEYS - set(entry)
        if unknown:
            raise SchemaError(f"{path}{where}: unknown keys {sorted(unknown)}")
        if missing:
            raise SchemaError(f"{path}{where}: missing keys {sorted(missing)}")
        try:
            transform = RigidTransform.from_axis_angle(
                np.array(entry["rotation_axis_angle"], dtype=float).reshape(3),
                np.array(entry["translation"], dtype=float).reshape(3))
        except (TypeError, ValueError) as e:
            raise SchemaError(f"{path}{where}: bad transform ({e})")
        key = (str(entry["parent_label"]), str(entry["child_label"]))
        groups.setdefault(key, []).append(transform)

    priors = [fit_prior(ex, sigma, key) for key, ex in sorted(groups.items())]
    logger.info("loaded %d exemplars in %d label groups from %s", len(data), len(priors), path)
    return priors


def find_prior(priors: Sequence[TransformPrior], parent_label: Optional[str],
               child_label: Optional[str]) -> Optional[TransformPrior]:
    for prior in priors:
        if prior.matches(parent_label, child_label):
            return prior
    return None
