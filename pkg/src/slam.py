"""
Multi-session SLAM engine: mapping and localization over a MultiSessionMap.

Per frame: quantize, score against the inverted index, try proximity
candidates around the predicted pose, otherwise run the Bayes filter and
register its hypothesis. The engine keeps an odometry-to-map correction so
that the global estimate is correction * odom.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from bayes import BayesConfig, Belief, bayes_update, check_hypothesis, recenter
from errors import AnchorNotFound, InvalidParams, RejectedLowInliers
from features import FeatureFrame
from geom import (BundleAdjustConfig, CameraIntrinsics, DEFAULT_CAMERA, Pose, RansacConfig, compose,
                  invert, relative)
from graph import (LinkKind, MultiSessionMap, OptimizerConfig, Session, align_session,
                   information_from_sigmas, nodes_within, optimize)
from registration import RegistrationConfig, RegistrationResult, estimate_transform
from vocabulary import LikelihoodVector, VocabularyConfig, compute_likelihood, quantize_frame

logger = logging.getLogger(__name__)


class EngineMode(Enum):
    MAPPING = "mapping"
    LOCALIZATION = "localization"


class Outcome(Enum):
    LOOP_CLOSURE = "loop_closure"
    PROXIMITY = "proximity"
    FAILED = "failed"


@dataclass
class SlamConfig:
    radius: float = 1.0
    proximity_candidates: int = 3
    loop_candidates: int = 1
    recent_exclusion: int = 10
    lost_after: int = 10
    drift_per_frame: float = 0.02
    optimize_after_closure: bool = True
    odom_sigma_rot: float = 0.005
    odom_sigma_trans: float = 0.005
    loop_sigma_rot: float = 0.01
    loop_sigma_trans: float = 0.01
    camera: CameraIntrinsics = DEFAULT_CAMERA
    vocabulary: VocabularyConfig = field(default_factory=VocabularyConfig)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["camera"] = self.camera.to_dict()
        d["optimizer"]["lambda_range"] = list(self.optimizer.lambda_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SlamConfig":
        d = dict(d)
        reg = dict(d.pop("registration", {}))
        reg_cfg = RegistrationConfig(
            ransac=RansacConfig(**reg.pop("ransac", {})),
            bundle=BundleAdjustConfig(**reg.pop("bundle", {})),
            **reg)
        opt = dict(d.pop("optimizer", {}))
        if "lambda_range" in opt:
            opt["lambda_range"] = tuple(opt["lambda_range"])
        return cls(
            camera=CameraIntrinsics.from_dict(d.pop("camera")) if "camera" in d else DEFAULT_CAMERA,
            vocabulary=VocabularyConfig(**d.pop("vocabulary", {})),
            bayes=BayesConfig(**d.pop("bayes", {})),
            registration=reg_cfg,
            optimizer=OptimizerConfig(**opt),
            **d)

    def loop_information(self, inliers: int) -> np.ndarray:
        """Fixed loop-closure information scaled by inliers / min_inliers."""
        scale = max(inliers, 1) / max(self.registration.min_inliers, 1)
        return scale * information_from_sigmas(self.loop_sigma_rot, self.loop_sigma_trans)


@dataclass
class LocalizationEvent:
    frame_index: int
    timestamp: float
    outcome: Outcome
    pose: Pose
    matched_node: Optional[int] = None
    matched_session: Optional[int] = None
    stage: Optional[str] = None
    correction: Pose = field(default_factory=Pose.identity)
    jump_mm: float = 0.0
    inliers: int = 0
    inlier_pct: float = 0.0
    gt_pose: Optional[Pose] = None
    frame_session: Optional[int] = None

    @property
    def accepted(self) -> bool:
        return self.outcome is not Outcome.FAILED


@dataclass
class MappingEvent(LocalizationEvent):
    node_id: int = -1
    aligned_session: bool = False


class SlamEngine:
    """
    One engine per session run. Frames must be fed in order.
    """

    def __init__(self, m: MultiSessionMap, mode: EngineMode, cfg: SlamConfig = None,
                 session: Optional[Session] = None):
        if mode is EngineMode.MAPPING and session is None:
            raise InvalidParams("mapping requires a session; use start_session")
        self.map = m
        self.mode = mode
        self.cfg = cfg or SlamConfig()
        self.session = session
        self.belief = Belief()
        self.odom_to_map = Pose.identity()
        self.last_odom: Optional[Pose] = None
        self.localized = mode is EngineMode.MAPPING
        self.frame_session: Optional[int] = None
        self.failures = 0
        self.frame_index = 0
        self.first_inter_session_frame: Optional[int] = None
        self.events: List[LocalizationEvent] = []

    @property
    def K(self) -> CameraIntrinsics:
        return self.cfg.camera

    def predicted_pose(self, odom_pose: Pose) -> Pose:
        return compose(self.odom_to_map, odom_pose)

    def frame_key(self, session_id: int) -> Optional[int]:
        """None for the map frame, else the unaligned session whose odometry frame applies."""
        return None if self.map.sessions[session_id].aligned else session_id

    @property
    def current_frame(self) -> Optional[int]:
        if self.mode is EngineMode.MAPPING:
            return self.frame_key(self.session.session_id)
        return self.frame_session

    def _eligible(self, node_id: int, proximity: bool = False) -> bool:
        """
        Proximity only looks at nodes expressed in the frame the engine is
        currently localized in. Loop-closure hypotheses cover every node when
        localizing; a mapping session only closes loops with aligned sessions
        and with itself.
        """
        sid = self.map.nodes[node_id].session_id
        if proximity:
            return self.frame_key(sid) == self.current_frame
        if self.mode is EngineMode.LOCALIZATION:
            return True
        return sid == self.session.session_id or self.map.sessions[sid].aligned

    def excluded_nodes(self) -> List[int]:
        if self.mode is not EngineMode.MAPPING or self.cfg.recent_exclusion <= 0:
            return []
        return self.session.node_ids[-self.cfg.recent_exclusion:]

    def hypothesis_nodes(self) -> Dict[int, List[int]]:
        excluded = set(self.excluded_nodes())
        return {n: self.map.chain_neighbors(n) for n in self.map.nodes
                if n not in excluded and self._eligible(n)}

    def search_radius(self) -> float:
        if self.failures < self.cfg.lost_after:
            return self.cfg.radius
        return self.cfg.radius + self.cfg.drift_per_frame * self.failures

    def _register(self, frame: FeatureFrame, node_id: int, prior: Optional[Pose]) -> RegistrationResult:
        return estimate_transform(frame, self.map.nodes[node_id], self.K, self.cfg.registration, prior)

    def _try_candidates(self, frame: FeatureFrame, candidates: List[int], predicted: Optional[Pose],
                        use_prior: bool) -> Tuple[Optional[int], Optional[RegistrationResult], Optional[str]]:
        stage = None
        for node_id in candidates:
            prior = None
            if use_prior and predicted is not None:
                prior = relative(self.map.nodes[node_id].opt_pose, predicted)
            try:
                return node_id, self._register(frame, node_id, prior), None
            except RejectedLowInliers as e:
                logger.debug(f"frame {self.frame_index}: node {node_id} rejected at {e.stage}")
                stage = e.stage
        return None, None, stage

    def process_frame(self, odom_pose: Pose, frame: FeatureFrame, timestamp: Optional[float] = None,
                      gt_pose: Optional[Pose] = None) -> LocalizationEvent:
        frame = frame.copy()
        timestamp = frame.timestamp if timestamp is None else float(timestamp)
        v = self.map.vocabulary
        quantize_frame(v, frame, indexing=False)
        lik = LikelihoodVector()
        if v.total_indexed_nodes:
            lik = compute_likelihood(v, frame, exclude=self.excluded_nodes())
        predicted = self.predicted_pose(odom_pose)
        self.last_odom = odom_pose

        outcome, node_id, result, stage = Outcome.FAILED, None, None, "no_candidate"
        if self.localized:
            candidates = detect_proximity(self, predicted, lik, self.search_radius())
            node_id, result, failed_stage = self._try_candidates(frame, candidates, predicted, True)
            if result is not None:
                outcome = Outcome.PROXIMITY
            elif failed_stage:
                stage = failed_stage
        if result is None:
            neighbors = self.hypothesis_nodes()
            self.belief = bayes_update(self.belief, lik, neighbors, self.cfg.bayes)
            pooling = {n: self.map.neighbors(n) for n in neighbors}
            hyp = check_hypothesis(self.belief, self.cfg.bayes.loop_threshold, pooling)
            if hyp is not None:
                ranked = sorted(self.belief.p_loop, key=lambda n: (-self.belief.p_loop[n], n))
                candidates = [hyp] + [n for n in ranked if n != hyp][:self.cfg.loop_candidates - 1]
                node_id, result, failed_stage = self._try_candidates(frame, candidates, None, False)
                if result is not None:
                    outcome = Outcome.LOOP_CLOSURE
                else:
                    stage = failed_stage

        if self.mode is EngineMode.MAPPING:
            event = self._map_frame(odom_pose, frame, timestamp, gt_pose, predicted, outcome, node_id, result, stage)
        else:
            event = self._localize_frame(timestamp, gt_pose, predicted, outcome, node_id, result, stage)
        self.events.append(event)
        self.frame_index += 1
        return event

    def _accept_bookkeeping(self, node_id: int):
        self.failures = 0
        self.localized = True
        self.belief = recenter(self.belief, node_id, self.cfg.bayes.recenter_weight)

    def _localize_frame(self, timestamp, gt_pose, predicted, outcome, node_id, result, stage) -> LocalizationEvent:
        if result is None:
            self.failures += 1
            return LocalizationEvent(self.frame_index, timestamp, Outcome.FAILED, predicted, stage=stage,
                                     gt_pose=gt_pose, frame_session=self.frame_session)
        correction, jump_mm = apply_localization(self, node_id, result.transform)
        matched_session = self.map.nodes[node_id].session_id
        self.frame_session = self.frame_key(matched_session)
        self._accept_bookkeeping(node_id)
        return LocalizationEvent(self.frame_index, timestamp, outcome, self.predicted_pose(self.last_odom),
                                 node_id, matched_session, None, correction, jump_mm,
                                 result.inliers, result.inlier_pct, gt_pose, self.frame_session)

    def _map_frame(self, odom_pose, frame, timestamp, gt_pose, predicted, outcome, node_id, result,
                   stage) -> MappingEvent:
        m = self.map
        s = self.session
        prev_id = s.node_ids[-1] if s.node_ids else None
        node = m.add_node(s.session_id, timestamp, odom_pose, frame, opt_pose=predicted, gt_pose=gt_pose)
        quantize_frame(m.vocabulary, node.frame, indexing=True, node_id=node.node_id)
        if prev_id is not None:
            prev = m.nodes[prev_id]
            m.add_link(prev_id, node.node_id, LinkKind.ODOMETRY, relative(prev.odom_pose, odom_pose),
                       information_from_sigmas(self.cfg.odom_sigma_rot, self.cfg.odom_sigma_trans))
        if result is None:
            self.failures += 1
            return MappingEvent(self.frame_index, timestamp, Outcome.FAILED, node.opt_pose, stage=stage,
                                gt_pose=gt_pose, node_id=node.node_id)

        matched = m.nodes[node_id]
        inter_session = matched.session_id != s.session_id
        aligned_now = False
        if inter_session and not s.aligned:
            self.odom_to_map = compose(compose(matched.opt_pose, result.transform), invert(odom_pose))
            align_session(m, s.session_id, self.odom_to_map)
            aligned_now = True
        if inter_session and self.first_inter_session_frame is None:
            self.first_inter_session_frame = self.frame_index
        kind = LinkKind.PROXIMITY if outcome is Outcome.PROXIMITY else LinkKind.LOOP_CLOSURE
        m.add_link(node_id, node.node_id, kind, result.transform, self.cfg.loop_information(result.inliers),
                   result.inliers)

        before = node.opt_pose
        if self.cfg.optimize_after_closure:
            result_opt = optimize(m, self.cfg.optimizer, allow_disconnected=True)
            if result_opt.unreached:
                logger.debug(f"optimization left {len(result_opt.unreached)} nodes outside the anchor's component")
        else:
            node.opt_pose = compose(matched.opt_pose, result.transform)
        self.odom_to_map = compose(node.opt_pose, invert(odom_pose))
        jump_mm = 0.0 if aligned_now else float(np.linalg.norm(node.opt_pose.translation - before.translation) * 1000.0)
        self._accept_bookkeeping(node_id)
        logger.debug(f"frame {self.frame_index}: {outcome.value} with node {node_id} "
                     f"(session {matched.session_id}), {result.inliers} inliers")
        return MappingEvent(self.frame_index, timestamp, outcome, node.opt_pose, node_id, matched.session_id,
                            None, relative(before, node.opt_pose), jump_mm, result.inliers, result.inlier_pct,
                            gt_pose, node_id=node.node_id, aligned_session=aligned_now)


def detect_proximity(engine: SlamEngine, current_opt_pose: Pose, lik: LikelihoodVector, radius: float) -> List[int]:
    """
    Up to cfg.proximity_candidates eligible nodes within radius of the
    current pose, most visually similar first (ties by node id).
    """
    if radius <= 0:
        raise InvalidParams("proximity radius must be positive")
    excluded = set(engine.excluded_nodes())
    pool = [n for n in engine.map.nodes if n not in excluded and engine._eligible(n, proximity=True)]
    near = nodes_within(engine.map, current_opt_pose, radius, pool)
    near.sort(key=lambda n: (-lik.get(n), n))
    return near[:engine.cfg.proximity_candidates]


def apply_localization(engine: SlamEngine, matched_node: int, transform: Pose) -> Tuple[Pose, float]:
    """
    Rebase the odometry on opt_pose(matched_node) * transform. Returns the
    correction relative to the odometry-predicted pose and its size in mm.
    """
    predicted = engine.predicted_pose(engine.last_odom)
    new_pose = compose(engine.map.nodes[matched_node].opt_pose, transform)
    correction = relative(predicted, new_pose)
    jump_mm = float(np.linalg.norm(new_pose.translation - predicted.translation) * 1000.0)
    engine.odom_to_map = compose(new_pose, invert(engine.last_odom))
    return correction, jump_mm


def start_session(prior_map: Optional[MultiSessionMap], label: str, start_time: float = 0.0,
                  family: Optional[str] = None, cfg: SlamConfig = None,
                  frame_offset: Optional[Pose] = None) -> SlamEngine:
    """
    Open a new mapping session appended to prior_map (a fresh map when None
    or empty). The session stays unaligned until it closes a loop with an
    earlier session.
    """
    if prior_map is None:
        if family is None:
            raise InvalidParams("a family is required to start an empty map")
        cfg = cfg or SlamConfig()
        prior_map = MultiSessionMap(family, cfg.vocabulary)
    elif cfg is None:
        cfg = SlamConfig.from_dict(prior_map.config) if prior_map.config else SlamConfig()
    if family is not None and family != prior_map.family:
        raise InvalidParams(f"map uses family {prior_map.family}, not {family}")
    if not prior_map.config:
        prior_map.config = cfg.to_dict()
    s = prior_map.add_session(label, start_time, frame_offset)
    logger.info(f"Mapping session {label} onto a map with {len(prior_map.sessions) - 1} prior sessions")
    return SlamEngine(prior_map, EngineMode.MAPPING, cfg, s)


def start_localization(m: MultiSessionMap, cfg: SlamConfig = None) -> SlamEngine:
    cfg = cfg or (SlamConfig.from_dict(m.config) if m.config else SlamConfig())
    return SlamEngine(m, EngineMode.LOCALIZATION, cfg)


def finish_session(engine: SlamEngine) -> Session:
    """
    Close the mapping session. Raises AnchorNotFound when the map had earlier
    sessions and this one never closed a loop with them.
    """
    s = engine.session
    if engine.mode is not EngineMode.MAPPING or s is None:
        raise InvalidParams("only mapping engines have a session to finish")
    logger.info(f"Session {s.label}: {len(s.node_ids)} nodes, aligned={s.aligned}")
    if not s.aligned:
        logger.warning(f"Session {s.label} never closed a loop with a prior session")
        raise AnchorNotFound(s.session_id)
    return s
