"""
Rigid-body geometry, pinhole camera model, PnP and two-frame refinement.

Poses store rotations as matrices. Optimizers step in a 6-vector tangent
[rotation vector (3), translation (3)].
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import DivergedOptimization, InvalidPose, NoConsensus, NonPositiveDepth, TooFewCorrespondences

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
_COST_FLOOR = 1e-24


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid transform x -> R x + t. Immutable; arrays are read-only copies.
    """
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPose("pose contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidPose("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def angle(self) -> float:
        return float(np.linalg.norm(self.rotvec()))

    def distance(self) -> float:
        return float(np.linalg.norm(self.translation))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, atol=atol)
                    and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self):
        return f"Pose(rotvec={np.round(self.rotvec(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def relative(a: Pose, b: Pose) -> Pose:
    """a^-1 * b."""
    return compose(invert(a), b)


def transform_points(p: Pose, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=float) @ p.rotation.T + p.translation


def exp_tangent(xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    return Pose(Rotation.from_rotvec(xi[:3]).as_matrix(), xi[3:6])


def log_tangent(p: Pose) -> np.ndarray:
    return np.concatenate([p.rotvec(), p.translation])


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """
    Inverse right Jacobian of SO(3) for a batch of rotation vectors (n, 3).
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    theta = np.linalg.norm(phi, axis=1)
    W = skew(phi)
    W2 = W @ W
    coef = np.empty_like(theta)
    small = theta < 1e-5
    coef[small] = 1.0 / 12.0 + theta[small] ** 2 / 720.0
    th = theta[~small]
    coef[~small] = 1.0 / th ** 2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return np.eye(3)[None] + 0.5 * W + coef[:, None, None] * W2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= 0) & (pixels[:, 0] < self.width)
                & (pixels[:, 1] >= 0) & (pixels[:, 1] < self.height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


DEFAULT_CAMERA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True, eq=False)
class Correspondence:
    point3: np.ndarray
    pixel: np.ndarray


def project(p, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise NonPositiveDepth(f"cannot project point with z={p[2]}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def back_project(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    if depth <= 0:
        raise NonPositiveDepth(f"cannot back-project with depth={depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def project_points(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection; caller is responsible for z > 0."""
    points = np.atleast_2d(points)
    z = points[:, 2]
    return np.stack([K.fx * points[:, 0] / z + K.cx, K.fy * points[:, 1] / z + K.cy], axis=1)


def back_project_points(pixels: np.ndarray, depths: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    pixels = np.atleast_2d(pixels)
    depths = np.asarray(depths, dtype=float)
    return np.stack([(pixels[:, 0] - K.cx) * depths / K.fx,
                     (pixels[:, 1] - K.cy) * depths / K.fy,
                     depths], axis=1)


# ---------------------------------------------------------------------------
# Reprojection least squares (left-multiplied tangent updates)
# ---------------------------------------------------------------------------

def _apply_left(R: np.ndarray, t: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dR = Rotation.from_rotvec(delta[:3]).as_matrix()
    return dR @ R, dR @ t + delta[3:]


def _residuals(R, t, points, pixels, K) -> Tuple[np.ndarray, np.ndarray]:
    pc = points @ R.T + t
    with np.errstate(divide="ignore", invalid="ignore"):
        r = project_points(pc, K) - pixels
    return r, pc


def _jacobian(pc: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    Jp = np.zeros((len(pc), 2, 3))
    Jp[:, 0, 0] = K.fx * iz
    Jp[:, 0, 2] = -K.fx * x * iz ** 2
    Jp[:, 1, 1] = K.fy * iz
    Jp[:, 1, 2] = -K.fy * y * iz ** 2
    J = np.empty((len(pc), 2, 6))
    J[:, :, :3] = Jp @ (-skew(pc))
    J[:, :, 3:] = Jp
    return J


def _cost(R, t, points, pixels, K) -> float:
    r, pc = _residuals(R, t, points, pixels, K)
    if np.any(pc[:, 2] <= 1e-9):
        return math.inf
    return float(np.sum(r * r))


def reprojection_errors(pose: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Per-correspondence pixel error; inf for points behind the camera."""
    r, pc = _residuals(pose.rotation, pose.translation, np.atleast_2d(points), np.atleast_2d(pixels), K)
    err = np.linalg.norm(r, axis=1)
    err[pc[:, 2] <= 1e-9] = np.inf
    return err


def reprojection_cost(pose: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> float:
    """Sum of squared pixel residuals."""
    return _cost(pose.rotation, pose.translation, np.atleast_2d(points), np.atleast_2d(pixels), K)


def reprojection_gradient(pose: Pose, points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """
    Gradient of reprojection_cost w.r.t. a left tangent perturbation Exp(xi) * pose.
    """
    points = np.atleast_2d(points)
    r, pc = _residuals(pose.rotation, pose.translation, points, np.atleast_2d(pixels), K)
    J = _jacobian(pc, K)
    return 2.0 * np.einsum("nij,ni->j", J, r)


def _levenberg_marquardt(R, t, points, pixels, K, max_iterations: int, lambda_init: float,
                         rel_tol: float, diverge_after: Optional[int] = None):
    """
    Damped Gauss-Newton on the pose. Only cost-decreasing steps are accepted.
    Returns (R, t, cost_history).
    """
    lam = lambda_init
    cost = _cost(R, t, points, pixels, K)
    history = [cost]
    failures = 0
    for _ in range(max_iterations):
        if cost < _COST_FLOOR:
            break
        r, pc = _residuals(R, t, points, pixels, K)
        J = _jacobian(pc, K).reshape(-1, 6)
        r = r.ravel()
        H = J.T @ J
        g = J.T @ r
        while True:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                R_new, t_new = _apply_left(R, t, delta)
                new_cost = _cost(R_new, t_new, points, pixels, K)
            else:
                new_cost = math.inf
            if new_cost < cost:
                break
            if math.isfinite(new_cost) and (new_cost - cost) <= rel_tol * max(cost, _COST_FLOOR):
                # no measurable change at this damping: converged
                return R, t, history
            failures += 1
            lam *= 10.0
            if diverge_after is not None and failures >= diverge_after:
                raise DivergedOptimization(f"cost failed to decrease for {failures} consecutive damped steps")
            if lam > 1e12:
                return R, t, history
        failures = 0
        lam = max(lam / 10.0, 1e-12)
        improvement = (cost - new_cost) / max(cost, _COST_FLOOR)
        R, t, cost = R_new, t_new, new_cost
        history.append(cost)
        if improvement < rel_tol:
            break
    return R, t, history


@dataclass
class RansacConfig:
    min_correspondences: int = 6
    sample_size: int = 6
    reprojection_threshold_px: float = 2.0
    min_inliers: int = 20
    max_iterations: int = 100
    confidence: float = 0.99
    minimal_iterations: int = 10
    refine_iterations: int = 20
    lambda_init: float = 1e-3
    degeneracy_condition: float = 1e8
    seed: int = 0


def _as_arrays(corrs: Sequence[Correspondence]) -> Tuple[np.ndarray, np.ndarray]:
    points = np.array([c.point3 for c in corrs], dtype=float).reshape(-1, 3)
    pixels = np.array([c.pixel for c in corrs], dtype=float).reshape(-1, 2)
    return points, pixels


def solve_pnp_ransac(corrs: Sequence[Correspondence], K: CameraIntrinsics, cfg: RansacConfig = None,
                     guess: Optional[Pose] = None) -> Tuple[Pose, np.ndarray]:
    """
    Estimate the pose mapping reference-frame points into the camera observing
    the pixels. RANSAC over 6-point samples solved by damped Gauss-Newton from
    `guess` (identity when absent), then refinement on the inlier set.

    Returns (pose, inlier mask).
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < max(cfg.min_correspondences, cfg.sample_size):
        raise TooFewCorrespondences(f"{n} correspondences, need {max(cfg.min_correspondences, cfg.sample_size)}")
    points, pixels = _as_arrays(corrs)
    guess = guess or Pose.identity()
    R0, t0 = guess.rotation.copy(), guess.translation.copy()
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.reprojection_threshold_px

    best_count = -1
    best_mask = None
    best_R, best_t = R0, t0
    budget = cfg.max_iterations
    it = 0
    while it < budget:
        it += 1
        idx = rng.choice(n, size=cfg.sample_size, replace=False)
        X, uv = points[idx], pixels[idx]
        _, pc = _residuals(R0, t0, X, uv, K)
        if np.any(pc[:, 2] <= 1e-9):
            continue
        J = _jacobian(pc, K).reshape(-1, 6)
        if np.linalg.cond(J.T @ J) > cfg.degeneracy_condition:
            continue
        R, t, _ = _levenberg_marquardt(R0, t0, X, uv, K, cfg.minimal_iterations, cfg.lambda_init, 1e-12)
        pose_err = reprojection_errors(Pose(R, t), points, pixels, K)
        mask = pose_err < thr
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_R, best_t = count, mask, R, t
            w = count / n
            if w >= 1.0:
                budget = min(budget, it)
            elif w > 0:
                needed = math.log(1.0 - cfg.confidence) / math.log(1.0 - w ** cfg.sample_size)
                budget = min(budget, max(it, int(math.ceil(needed))))

    if best_mask is None or best_count < cfg.sample_size:
        raise NoConsensus(f"no model found over {it} iterations")

    R, t = best_R, best_t
    mask = best_mask
    for _ in range(2):
        R, t, _ = _levenberg_marquardt(R, t, points[mask], pixels[mask], K,
                                       cfg.refine_iterations, cfg.lambda_init, 1e-12)
        new_mask = reprojection_errors(Pose(R, t), points, pixels, K) < thr
        if np.array_equal(new_mask, mask) or new_mask.sum() < cfg.sample_size:
            mask = new_mask
            break
        mask = new_mask
    count = int(mask.sum())
    if count < cfg.min_inliers:
        raise NoConsensus(f"best consensus {count} < min_inliers {cfg.min_inliers}")
    logger.debug(f"PnP RANSAC: {count}/{n} inliers after {it} iterations")
    return Pose(R, t), mask


@dataclass
class BundleAdjustConfig:
    max_iterations: int = 20
    rel_tol: float = 1e-9
    lambda_init: float = 1e-3
    diverge_after: int = 5


def _pair_arrays(frame_a, frame_b, matches, K):
    ia = np.array([m.index_a for m in matches], dtype=int)
    ib = np.array([m.index_b for m in matches], dtype=int)
    if len(ia):
        keep = frame_a.depths[ia] > 0
        ia, ib = ia[keep], ib[keep]
    points = back_project_points(frame_a.pixels[ia], frame_a.depths[ia], K).reshape(-1, 3)
    return points, frame_a.pixels[ia].reshape(-1, 2), frame_b.pixels[ib].reshape(-1, 2)


def pair_reprojection_cost(frame_a, frame_b, matches, K: CameraIntrinsics, pose_ab: Pose) -> float:
    """
    Squared reprojection error over both frames for matched features, 3D
    points fixed from frame_a depth and pose_ab mapping a-camera into b-camera.
    """
    points, pix_a, pix_b = _pair_arrays(frame_a, frame_b, matches, K)
    if not len(points):
        return 0.0
    cost_a = float(np.sum((project_points(points, K) - pix_a) ** 2))
    return cost_a + reprojection_cost(pose_ab, points, pix_b, K)


def bundle_adjust_pair(frame_a, frame_b, matches, K: CameraIntrinsics, initial: Pose,
                       cfg: BundleAdjustConfig = None) -> Pose:
    """
    Refine the a->b transform by minimizing reprojection error of frame_a's
    depth-backed 3D points in both frames. Points and frame_a stay fixed, so
    only frame_b's pose moves. Never returns a pose worse than `initial`.
    """
    cfg = cfg or BundleAdjustConfig()
    points, _, pix_b = _pair_arrays(frame_a, frame_b, matches, K)
    if len(points) < 3:
        return initial
    R, t, history = _levenberg_marquardt(initial.rotation, initial.translation, points, pix_b, K,
                                         cfg.max_iterations, cfg.lambda_init, cfg.rel_tol, cfg.diverge_after)
    logger.debug(f"pair refinement: cost {history[0]:.6g} -> {history[-1]:.6g} in {len(history) - 1} steps")
    return Pose(R, t)
