"""
Two-step 6DoF registration of a query frame against a map frame with depth.

Step one matches descriptors globally (NNDR) and solves PnP with RANSAC.
Step two projects the map frame's 3D features into the query with that
estimate, matches inside a window, refits PnP and refines the result with
two-frame bundle adjustment.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from errors import DivergedOptimization, NoConsensus, RejectedLowInliers, TooFewCorrespondences
from features import FeatureFrame, Match, guided_match, nndr_match, check_family
from geom import (BundleAdjustConfig, CameraIntrinsics, Correspondence, Pose, RansacConfig,
                  back_project_points, bundle_adjust_pair, invert, reprojection_errors, solve_pnp_ransac)

logger = logging.getLogger(__name__)

STAGES = ("matching", "pnp", "guided", "refine", "bundle_adjust")


@dataclass
class RegistrationConfig:
    nndr_ratio: float = 0.8
    window_px: float = 20.0
    min_inliers: int = 20
    reprojection_threshold_px: float = 2.0
    allow_prior_guess: bool = True
    ransac: RansacConfig = field(default_factory=RansacConfig)
    bundle: BundleAdjustConfig = field(default_factory=BundleAdjustConfig)

    def ransac_config(self) -> RansacConfig:
        return replace(self.ransac, min_inliers=self.min_inliers,
                       reprojection_threshold_px=self.reprojection_threshold_px)


@dataclass
class RegistrationResult:
    """
    transform is the query camera pose expressed in the target camera frame,
    so the query's global pose is target.opt_pose * transform.
    """
    transform: Pose
    inliers: int
    step1_inliers: int
    guided_matches: int
    rmse_px: float
    inlier_pct: float
    used_prior: bool = False


def _correspondences(target: FeatureFrame, query: FeatureFrame, matches: List[Match], K: CameraIntrinsics):
    usable = [m for m in matches if target.depths[m.index_a] > 0]
    if not usable:
        return usable, []
    ia = np.array([m.index_a for m in usable])
    points = back_project_points(target.pixels[ia], target.depths[ia], K)
    return usable, [Correspondence(p, query.pixels[m.index_b]) for p, m in zip(points, usable)]


def _merge(guided: List[Match], step1: List[Match]) -> List[Match]:
    """Guided matches plus step-one inliers that do not collide with them."""
    used_a = {m.index_a for m in guided}
    used_b = {m.index_b for m in guided}
    merged = list(guided)
    for m in step1:
        if m.index_a not in used_a and m.index_b not in used_b:
            merged.append(m)
            used_a.add(m.index_a)
            used_b.add(m.index_b)
    return sorted(merged, key=lambda m: m.index_a)


def estimate_transform(query: FeatureFrame, target, K: CameraIntrinsics, cfg: RegistrationConfig = None,
                       prior: Optional[Pose] = None) -> RegistrationResult:
    """
    Register query against target (a MapNode or a FeatureFrame whose
    keypoints carry depth).

    prior, when given, is the expected query pose in the target frame; it is
    only used when step one fails and cfg.allow_prior_guess is set.
    Raises RejectedLowInliers naming the failing stage.
    """
    cfg = cfg or RegistrationConfig()
    target_frame: FeatureFrame = getattr(target, "frame", target)
    check_family(target_frame, query)
    ransac_cfg = cfg.ransac_config()
    use_prior = prior is not None and cfg.allow_prior_guess

    # step one: global NNDR matching and PnP
    step1: List[Match] = []
    estimate: Optional[Pose] = None
    matches = nndr_match(target_frame, query, cfg.nndr_ratio)
    matches, corrs = _correspondences(target_frame, query, matches, K)
    if len(corrs) < max(ransac_cfg.min_correspondences, ransac_cfg.sample_size, cfg.min_inliers):
        if not use_prior:
            raise RejectedLowInliers("matching", len(corrs))
    else:
        try:
            estimate, mask = solve_pnp_ransac(corrs, K, ransac_cfg)
            step1 = [m for m, ok in zip(matches, mask) if ok]
        except (TooFewCorrespondences, NoConsensus) as e:
            if not use_prior:
                raise RejectedLowInliers("pnp", 0, str(e))
    used_prior = estimate is None
    if used_prior:
        estimate = invert(prior)

    # step two: window-guided matching from the step-one motion
    guided = guided_match(target_frame, query, estimate, K, cfg.window_px, cfg.nndr_ratio)
    merged = max(_merge(guided, step1), _merge(step1, guided), key=len)
    if len(merged) < cfg.min_inliers:
        raise RejectedLowInliers("guided", len(merged))
    merged, corrs = _correspondences(target_frame, query, merged, K)
    try:
        refit, mask = solve_pnp_ransac(corrs, K, ransac_cfg, guess=estimate)
    except (TooFewCorrespondences, NoConsensus) as e:
        raise RejectedLowInliers("refine", 0, str(e))
    inlier_matches = [m for m, ok in zip(merged, mask) if ok]

    try:
        refined = bundle_adjust_pair(target_frame, query, inlier_matches, K, refit, cfg.bundle)
    except DivergedOptimization as e:
        raise RejectedLowInliers("bundle_adjust", len(inlier_matches), str(e))
    points = np.array([c.point3 for c in corrs])
    pixels = np.array([c.pixel for c in corrs])
    errors = reprojection_errors(refined, points, pixels, K)
    final = errors < cfg.reprojection_threshold_px
    count = int(final.sum())
    if count < cfg.min_inliers:
        raise RejectedLowInliers("bundle_adjust", count)
    rmse = float(np.sqrt(np.mean(errors[final] ** 2)))
    pct = min(100.0, 100.0 * count / max(len(query), 1))
    logger.debug(f"registration accepted: step1 {len(step1)}, guided {len(merged)}, final {count} inliers, "
                 f"rmse {rmse:.3f}px{' (from prior)' if used_prior else ''}")
    return RegistrationResult(invert(refined), count, len(step1), len(merged), rmse, pct, used_prior)
