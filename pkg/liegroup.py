"""
Lie Group Arithmetic
Exact SO(3)/SE(3) exponential and logarithm maps, geodesic distances,
Lie-algebra averaging and the isotropic Gaussian distribution on SO(3).

Twists are 6-vectors ordered (omega, rho): rotational part first, radians,
then translational part in scene length units.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from errors import AngleNearPi, EmptyInput, ValidationError

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-4
NEAR_PI_LOG = 1e-6
NEAR_PI_GRAD = 1e-3
ROTATION_TOL = 1e-9

Twist = np.ndarray
RngLike = Union[None, int, Sequence[int], np.random.Generator]


def as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ===== SO(3) =====

def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector"""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def is_rotation(m: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return (np.abs(m.T @ m - np.eye(3)).max() <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


def rotation_drift(m: np.ndarray) -> float:
    return float(np.abs(m.T @ m - np.eye(3)).max())


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)"""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def so3_exp(omega) -> np.ndarray:
    """Rodrigues map: rotation about omega/|omega| by |omega|"""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    k = hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    s = 0.5 * float(np.linalg.norm(vee(r - r.T)))
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(s, max(-1.0, min(1.0, c)))


def so3_log(r: np.ndarray) -> np.ndarray:
    """Principal logarithm, angle in [0, pi]"""
    r = np.asarray(r, dtype=float)
    w = vee(r - r.T)  # = 2 sin(theta) * axis
    s = 0.5 * float(np.linalg.norm(w))
    c = max(-1.0, min(1.0, 0.5 * (float(np.trace(r)) - 1.0)))
    theta = math.atan2(s, c)

    if theta < SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * w

    if theta < math.pi - 1e-3:
        return (theta / (2.0 * s)) * w

    # near pi: axis from the symmetric part, B = cos I + (1 - cos) a a^T
    b = 0.5 * (r + r.T)
    aat = (b - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(aat)))
    axis = aat[:, i] / math.sqrt(max(aat[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    sign_ref = float(axis @ w)
    if abs(sign_ref) > 1e-12:
        if sign_ref < 0:
            axis = -axis
    elif axis[int(np.argmax(np.abs(axis)))] < 0:
        axis = -axis
    return theta * axis


# ===== SE(3) =====

def _v_coeffs(theta: float) -> Tuple[float, float]:
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        b = (1.0 - math.cos(theta)) / t2
        c = (theta - math.sin(theta)) / (t2 * theta)
    return b, c


def left_jacobian(omega: np.ndarray) -> np.ndarray:
    """The V matrix of SE(3): translation = V(omega) @ rho"""
    theta = float(np.linalg.norm(omega))
    b, c = _v_coeffs(theta)
    k = hat(omega)
    return np.eye(3) + b * k + c * (k @ k)


def left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
        d = (1.0 - a / (2.0 * b)) / t2
    k = hat(omega)
    return np.eye(3) - 0.5 * k + d * (k @ k)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): x -> rotation @ x + translation"""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(rot):
            raise ValidationError("rotation matrix is not orthonormal with det +1")
        if not np.all(np.isfinite(trans)):
            raise ValidationError("translation must be finite")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, translation) -> "RigidTransform":
        return cls(np.eye(3), translation)

    @classmethod
    def from_axis_angle(cls, axis_angle, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3_exp(axis_angle), translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def axis_angle(self) -> np.ndarray:
        return so3_log(self.rotation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other (apply other first)"""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= tol
                and np.abs(self.translation - other.translation).max() <= tol)

    def __repr__(self) -> str:
        aa = np.round(self.axis_angle(), 6).tolist()
        t = np.round(self.translation, 6).tolist()
        return f"RigidTransform(axis_angle={aa}, translation={t})"


def se3_exp(twist) -> RigidTransform:
    twist = np.asarray(twist, dtype=float).reshape(6)
    omega, rho = twist[:3], twist[3:]
    return RigidTransform(so3_exp(omega), left_jacobian(omega) @ rho)


def se3_log(transform: RigidTransform) -> Twist:
    omega = so3_log(transform.rotation)
    theta = float(np.linalg.norm(omega))
    if theta >= math.pi - NEAR_PI_LOG:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi for se3_log")
    rho = left_jacobian_inv(omega) @ transform.translation
    return np.concatenate([omega, rho])


def geodesic_norm(a: RigidTransform, b: RigidTransform) -> float:
    """‖Log(A⁻¹B)‖"""
    return float(np.linalg.norm(se3_log(a.inverse() @ b)))


def lie_mean(transforms: Sequence[RigidTransform], refine_iters: int = 0) -> RigidTransform:
    """
    Average in the Lie algebra, charted at the first element:
    T0 ∘ Exp(mean_i Log(T0⁻¹ Ti)).

    Args:
        transforms: nonempty list of clustered transforms
        refine_iters: optional fixed-point iterations towards the Karcher mean (max 5)

    Returns:
        The averaged transform
    """
    transforms = list(transforms)
    if not transforms:
        raise EmptyInput("lie_mean needs at least one transform")
    if len(transforms) == 1:
        return transforms[0]

    base = transforms[0]
    for _ in range(1 + min(max(refine_iters, 0), 5)):
        base_inv = base.inverse()
        mean_twist = np.mean([se3_log(base_inv @ t) for t in transforms], axis=0)
        base = base @ se3_exp(mean_twist)
        if float(np.linalg.norm(mean_twist)) < 1e-15:
            break
    return base


# ===== IGSO(3) =====

@dataclass(frozen=True)
class Igso3Params:
    scale: float
    series_terms: int = 200

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"igso3 scale must be positive, got {self.scale}")
        if self.series_terms < 1:
            raise ValidationError("igso3 series_terms must be >= 1")

    @property
    def uses_series(self) -> bool:
        return self.scale >= 0.05


def igso3_log_f(omega, params: Igso3Params) -> np.ndarray:
    """
    Log density of IGSO(3) w.r.t. the normalized Haar measure, as a
    function of rotation angle omega.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    s = params.scale
    sinc_half = np.sinc(omega / (2.0 * math.pi))  # sin(w/2) / (w/2)

    if not params.uses_series:
        # Brownian increment with per-axis std s: the angle is chi(3) * s
        log_c = math.log(2.0 * math.pi * math.sqrt(2.0 / math.pi)) - 3.0 * math.log(s)
        return log_c - omega ** 2 / (2.0 * s * s) - 2.0 * np.log(sinc_half)

    ell = np.arange(params.series_terms + 1, dtype=float)
    weights = (2.0 * ell + 1.0) * np.exp(-ell * (ell + 1.0) * s * s / 2.0)
    half = 0.5 * omega[:, None]
    # sin((l + 1/2) w) / sin(w / 2), limit 2l + 1 at w = 0
    num = np.sinc((ell[None, :] + 0.5) * omega[:, None] / math.pi) * (ell[None, :] + 0.5) * omega[:, None]
    den = sinc_half[:, None] * half
    ratio = np.where(den > 1e-300, num / np.where(den > 1e-300, den, 1.0), 2.0 * ell[None, :] + 1.0)
    f = ratio @ weights
    return np.log(np.maximum(f, 1e-300))


def igso3_angle_pdf(omega, params: Igso3Params) -> np.ndarray:
    """Marginal density of the rotation angle on [0, pi]: (1 - cos w)/pi * f(w)"""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    s = params.scale
    if not params.uses_series:
        return math.sqrt(2.0 / math.pi) * omega ** 2 / s ** 3 * np.exp(-omega ** 2 / (2.0 * s * s))
    return (1.0 - np.cos(omega)) / math.pi * np.exp(igso3_log_f(omega, params))


@lru_cache(maxsize=64)
def _inverse_cdf_table(scale: float, series_terms: int, bins: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    params = Igso3Params(scale, series_terms)
    upper = min(math.pi, 12.0 * scale)
    grid = np.linspace(0.0, upper, bins + 1)
    pdf = igso3_angle_pdf(grid, params)
    cdf = cumulative_trapezoid(pdf, grid, initial=0.0)
    cdf /= cdf[-1]
    grid.setflags(write=False)
    cdf.setflags(write=False)
    return grid, cdf


def igso3_sample_angles(params: Igso3Params, size: int, rng: RngLike = None) -> np.ndarray:
    grid, cdf = _inverse_cdf_table(float(params.scale), int(params.series_terms))
    u = as_rng(rng).random(size)
    return np.interp(u, cdf, grid)


def igso3_sample(params: Igso3Params, rng_seed: RngLike = None) -> np.ndarray:
    """Draw a rotation: uniform axis, angle by inverse-CDF table lookup"""
    rng = as_rng(rng_seed)
    axis = rng.standard_normal(3)
    axis /= max(float(np.linalg.norm(axis)), 1e-300)
    angle = float(igso3_sample_angles(params, 1, rng)[0])
    return so3_exp(axis * angle)


def igso3_log_density(r: np.ndarray, base: np.ndarray, params: Igso3Params) -> float:
    """Log density of r under IGSO(3) centred at base (relative rotation r @ baseᵀ)"""
    angle = rotation_angle(r @ base.T)
    return float(igso3_log_f(angle, params)[0])


def igso3_log_density_grad(r: np.ndarray, base: np.ndarray, params: Igso3Params,
                           step: float = 1e-5) -> np.ndarray:
    """
    Gradient of log density w.r.t. left tangent coordinates of r,
    i.e. d/dδ log p(Exp(δ) r | base), by central differences.
    """
    angle = rotation_angle(r @ base.T)
    if angle >= math.pi - NEAR_PI_GRAD:
        raise AngleNearPi(f"relative angle {angle:.6f} too close to pi for the igso3 gradient")
    grad = np.zeros(3)
    for k in range(3):
        delta = np.zeros(3)
        delta[k] = step
        plus = igso3_log_density(so3_exp(delta) @ r, base, params)
        minus = igso3_log_density(so3_exp(-delta) @ r, base, params)
        grad[k] = (plus - minus) / (2.0 * step)
    return grad
