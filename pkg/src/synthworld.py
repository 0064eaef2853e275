"""
Deterministic synthetic apartment for multi-session experiments.

A box-shaped room holds wall and furniture landmarks; part of them are lit
by a window and follow the sunset directly, the rest see a mix of daylight
and room lighting. Each landmark's descriptor drifts linearly with the
illumination shift along its own random direction, scaled by the descriptor
family's sensitivity. A camera follows a waypoint trajectory at 1 frame per
second while odometry accumulates per-step noise.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import InvalidParams
from features import FAMILIES, FeatureFrame, get_family
from geom import CameraIntrinsics, DEFAULT_CAMERA, Pose, compose, exp_tangent, invert, relative, transform_points
from mapio import decode_array, decode_pose, dump_document, encode_array, encode_pose, load_document

logger = logging.getLogger(__name__)

CAMERA_HEIGHT = 1.0


def clock(hhmm: str) -> float:
    """'18:15' -> seconds of day."""
    h, m = hhmm.split(":")
    return 3600.0 * int(h) + 60.0 * int(m)


def clock_label(seconds: float) -> str:
    minutes = int(round(seconds / 60.0))
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


# Back-to-back mapping / localization sessions across one sunset.
MAPPING_SCHEDULE: Dict[str, str] = {
    "1": "16:46", "2": "17:27", "3": "17:54", "4": "18:27", "5": "18:56", "6": "19:35",
}
LOCALIZATION_SCHEDULE: Dict[str, str] = {
    "A": "16:51", "B": "17:31", "C": "17:58", "D": "18:30", "E": "18:59", "F": "19:42",
}


@dataclass
class IlluminationSchedule:
    """
    Logistic sunset: global_level(t) = 1 / (1 + exp((t - midpoint) / tau)).
    Interior landmarks keep a share of room lighting at night. Above
    auto_exposure_level a camera facing the window exposes for the glare:
    window-lit landmarks are scaled by window_gain and interior ones vanish.
    """
    midpoint: float = clock("18:15")
    tau: float = 20.0 * 60.0
    interior_floor: float = 0.5
    window_gain: float = 0.7
    auto_exposure_level: float = 0.5

    def global_level(self, t: float) -> float:
        return 1.0 / (1.0 + math.exp((t - self.midpoint) / self.tau))

    def effective_levels(self, t: float, facing_window: bool = False) -> Tuple[float, float]:
        """(window-lit level, interior level) at time t."""
        g = self.global_level(t)
        window = g * self.window_gain if facing_window and self.auto_exposure_active(t) else g
        interior = self.interior_floor + (1.0 - self.interior_floor) * g
        return window, interior

    def auto_exposure_active(self, t: float) -> bool:
        return self.global_level(t) > self.auto_exposure_level


@dataclass
class FeatureFamilyConfig:
    """Illumination response of one emulated descriptor family."""
    family: str
    illum_sensitivity_scale: float
    dropout_base: float = 0.05
    dropout_slope: float = 0.25
    noise_sigma: float = 0.15
    random_flip: float = 0.03

    def __post_init__(self):
        get_family(self.family)
        if self.illum_sensitivity_scale < 0:
            raise InvalidParams("sensitivity scale must be >= 0")

    @property
    def dimension(self) -> int:
        return get_family(self.family).dimension

    @property
    def binary(self) -> bool:
        return get_family(self.family).binary

    def detection_dropout(self, illum_delta):
        """Probability that a landmark is not detected, for scalar or array deltas."""
        return np.clip(self.dropout_base + self.dropout_slope * np.abs(illum_delta), 0.0, 0.95)


# Calibration knobs ordering the families by illumination robustness.
FAMILY_PRESETS: Dict[str, FeatureFamilyConfig] = {c.family: c for c in (
    FeatureFamilyConfig("SP", 0.35, dropout_slope=0.15),
    FeatureFamilyConfig("KA", 0.9),
    FeatureFamilyConfig("DY", 1.0),
    FeatureFamilyConfig("SU", 1.1),
    FeatureFamilyConfig("SI", 1.1),
    FeatureFamilyConfig("BF", 1.6, dropout_slope=0.35),
    FeatureFamilyConfig("BK", 1.7, dropout_slope=0.35),
    FeatureFamilyConfig("FR", 1.8, dropout_slope=0.35),
)}


def family_config(name: str) -> FeatureFamilyConfig:
    try:
        return FAMILY_PRESETS[name]
    except KeyError:
        raise InvalidParams(f"no preset for family {name!r}")


@dataclass
class WorldParams:
    n_landmarks: int = 400
    window_fraction: float = 0.3
    room: Tuple[float, float, float] = (8.0, 6.0, 2.6)
    window_span: Tuple[float, float] = (2.0, 6.0)
    poster_landmarks: int = 40
    poster_center: Tuple[float, float] = (3.0, 1.3)
    furniture_fraction: float = 0.25
    daylight_only_fraction: float = 0.15
    night_only_fraction: float = 0.1
    min_depth: float = 0.3
    max_depth: float = 7.0

    def validate(self):
        if self.n_landmarks <= 0:
            raise InvalidParams("world needs at least one landmark")
        if not 0.0 <= self.window_fraction <= 1.0:
            raise InvalidParams("window_fraction must lie in [0, 1]")
        if any(d <= 0 for d in self.room):
            raise InvalidParams("room extents must be positive")
        n_window = int(round(self.window_fraction * self.n_landmarks))
        if self.poster_landmarks < 0 or self.poster_landmarks > self.n_landmarks - n_window:
            raise InvalidParams("poster landmarks must fit among the interior landmarks")
        if not 0.0 <= self.daylight_only_fraction + self.night_only_fraction <= 1.0:
            raise InvalidParams("visibility band fractions must sum to at most 1")
        if not 0 < self.min_depth < self.max_depth:
            raise InvalidParams("depth range must satisfy 0 < min_depth < max_depth")


@dataclass(eq=False)
class DescriptorModel:
    """Per-family descriptor parameters of every landmark."""
    family: str
    base: np.ndarray
    sensitivity: np.ndarray
    flip_threshold: Optional[np.ndarray] = None


class World:
    def __init__(self, seed: int, params: WorldParams, positions: np.ndarray, regions: np.ndarray,
                 bands: np.ndarray, gains: np.ndarray, schedule: IlluminationSchedule = None):
        self.seed = seed
        self.params = params
        self.positions = positions
        self.regions = regions
        self.bands = bands
        self.gains = gains
        self.schedule = schedule or IlluminationSchedule()
        self._models: Dict[str, DescriptorModel] = {}

    def __len__(self):
        return len(self.positions)

    def descriptor_model(self, family: str) -> DescriptorModel:
        if family not in self._models:
            fam = get_family(family)
            rng = np.random.default_rng([self.seed, list(FAMILIES).index(family), 7])
            n, d = len(self), fam.dimension
            if fam.binary:
                base = rng.integers(0, 2, size=(n, d)).astype(np.uint8)
                sens = rng.random((n, d)) * self.gains[:, None]
                model = DescriptorModel(family, base, sens, rng.random((n, d)))
            else:
                base = rng.standard_normal((n, d))
                base /= np.linalg.norm(base, axis=1, keepdims=True)
                sens = rng.standard_normal((n, d))
                sens /= np.linalg.norm(sens, axis=1, keepdims=True)
                model = DescriptorModel(family, base, sens * self.gains[:, None])
            self._models[family] = model
        return self._models[family]

    def illumination(self, t: float, facing_window: bool = False) -> np.ndarray:
        """Effective illumination level per landmark at time t."""
        window, interior = self.schedule.effective_levels(t, facing_window)
        return np.where(self.regions, window, interior)

    def to_dict(self) -> dict:
        params = asdict(self.params)
        return {
            "seed": self.seed,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()},
            "schedule": asdict(self.schedule),
            "positions": encode_array(self.positions),
            "regions": encode_array(self.regions.astype(np.uint8)),
            "bands": encode_array(self.bands),
            "gains": encode_array(self.gains),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        params = WorldParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["params"].items()})
        return cls(int(d["seed"]), params, decode_array(d["positions"]), decode_array(d["regions"]).astype(bool),
                   decode_array(d["bands"]), decode_array(d["gains"]), IlluminationSchedule(**d["schedule"]))

    def save(self, path: str) -> str:
        return dump_document("world", self.to_dict(), path)

    @classmethod
    def load(cls, path: str) -> "World":
        return cls.from_dict(load_document("world", path))


def _wall_points(rng, n: int, room, wall: int, x_span=None, z_span=(0.3, 2.3)) -> np.ndarray:
    """Points on wall 0 (y=0), 1 (x=L), 2 (y=W) or 3 (x=0)."""
    L, W, _ = room
    along = rng.uniform(*(x_span or ((0.2, L - 0.2) if wall in (0, 2) else (0.2, W - 0.2))), size=n)
    z = rng.uniform(*z_span, size=n)
    if wall == 0:
        return np.stack([along, np.zeros(n), z], axis=1)
    if wall == 1:
        return np.stack([np.full(n, L), along, z], axis=1)
    if wall == 2:
        return np.stack([along, np.full(n, W), z], axis=1)
    return np.stack([np.zeros(n), along, z], axis=1)


def generate_world(seed: int, params: WorldParams = None) -> World:
    """
    Window-lit landmarks sit on the window wall (y = W) and the floor area
    in front of it; interior ones cover the other walls, the picture wall
    (x = 0) and furniture. Deterministic for a given seed.
    """
    params = params or WorldParams()
    params.validate()
    rng = np.random.default_rng(seed)
    L, W, H = params.room
    n = params.n_landmarks
    n_window = int(round(params.window_fraction * n))
    n_interior = n - n_window

    win_on_wall = n_window - n_window // 4
    window_pts = np.vstack([
        _wall_points(rng, win_on_wall, params.room, 2, x_span=params.window_span, z_span=(0.6, 2.3)),
        np.stack([rng.uniform(*params.window_span, size=n_window // 4),
                  rng.uniform(W - 1.2, W - 0.3, size=n_window // 4),
                  rng.uniform(0.2, 0.9, size=n_window // 4)], axis=1),
    ]).reshape(-1, 3)

    cy, cz = params.poster_center
    poster = np.stack([np.zeros(params.poster_landmarks),
                       cy + rng.uniform(-0.5, 0.5, params.poster_landmarks),
                       cz + rng.uniform(-0.4, 0.4, params.poster_landmarks)], axis=1)
    rest = n_interior - params.poster_landmarks
    n_furniture = int(round(params.furniture_fraction * rest))
    n_walls = rest - n_furniture
    walls = rng.integers(0, 4, size=n_walls)
    wall_pts = [_wall_points(rng, int(np.sum(walls == w)), params.room, w) for w in range(4)]
    # window wall outside the window span is interior
    wall_pts[2] = wall_pts[2].copy()
    inside = (wall_pts[2][:, 0] > params.window_span[0]) & (wall_pts[2][:, 0] < params.window_span[1])
    wall_pts[2][inside, 0] = np.where(wall_pts[2][inside, 0] < L / 2, params.window_span[0] - 0.3,
                                      params.window_span[1] + 0.3)
    furniture = np.stack([rng.uniform(1.0, L - 1.0, n_furniture), rng.uniform(1.0, W - 1.0, n_furniture),
                          rng.uniform(0.2, 1.2, n_furniture)], axis=1)
    interior_pts = np.vstack([poster] + wall_pts + [furniture]).reshape(-1, 3)

    positions = np.vstack([window_pts, interior_pts])
    regions = np.zeros(n, dtype=bool)
    regions[:n_window] = True

    bands = np.tile([0.0, 1.0], (n, 1))
    kinds = rng.random(n)
    day_only = kinds < params.daylight_only_fraction
    night_only = (kinds >= params.daylight_only_fraction) & (
        kinds < params.daylight_only_fraction + params.night_only_fraction)
    bands[day_only] = np.stack([rng.uniform(0.3, 0.6, day_only.sum()), np.ones(day_only.sum())], axis=1)
    bands[night_only] = np.stack([np.zeros(night_only.sum()), rng.uniform(0.5, 0.8, night_only.sum())], axis=1)
    poster_idx = np.arange(n_window, n_window + params.poster_landmarks)
    bands[poster_idx] = [0.0, 1.0]

    gains = rng.uniform(0.7, 1.3, size=n)
    gains[poster_idx] *= 0.5
    logger.info(f"Generated world seed {seed}: {n} landmarks, {n_window} window-lit, "
                f"{params.poster_landmarks} on the picture wall")
    return World(seed, params, positions, regions, bands, gains)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def camera_pose(x: float, y: float, heading: float, height: float = CAMERA_HEIGHT) -> Pose:
    """Level camera at (x, y, height) looking along heading; x right, y down, z forward."""
    c, s = math.cos(heading), math.sin(heading)
    R = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return Pose(R, [x, y, height])


def heading_of(pose: Pose) -> float:
    forward = pose.rotation[:, 2]
    return math.atan2(forward[1], forward[0])


def faces_window(world: World, pose: Pose) -> bool:
    """Camera looks toward the window wall with the window centre in its field of view."""
    L, W, _ = world.params.room
    center = np.array([sum(world.params.window_span) / 2.0, W, 1.4])
    pc = transform_points(invert(pose), center[None])[0]
    return bool(pc[2] > 0 and abs(pc[0] / pc[2]) < 0.6)


def render_frame(world: World, gt_pose: Pose, time: float, K: CameraIntrinsics, family_cfg: FeatureFamilyConfig,
                 rng: np.random.Generator, frame_id: int = 0, clutter: int = 5,
                 pixel_noise: float = 0.5, depth_noise: float = 0.005) -> FeatureFrame:
    """
    Observe every landmark in the frustum and depth range whose visibility
    band contains its effective illumination. Facing the window in daylight
    dims window-lit landmarks and suppresses interior ones (auto-exposure). Descriptors drift with the
    illumination shift 1 - level.
    """
    fam = get_family(family_cfg.family)
    model = world.descriptor_model(family_cfg.family)
    facing = faces_window(world, gt_pose)
    level = world.illumination(time, facing)
    pc = transform_points(invert(gt_pose), world.positions)
    z = pc[:, 2]
    p = world.params
    visible = (z > p.min_depth) & (z < p.max_depth)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    visible &= K.contains(np.nan_to_num(uv, nan=-1.0, posinf=-1.0, neginf=-1.0))
    visible &= (level >= world.bands[:, 0]) & (level <= world.bands[:, 1])
    if world.schedule.auto_exposure_active(time) and facing:
        visible &= world.regions
    shift = 1.0 - level
    keep = rng.random(len(world)) >= family_cfg.detection_dropout(shift)
    idx = np.flatnonzero(visible & keep)

    pixels = uv[idx] + rng.normal(0.0, pixel_noise, size=(len(idx), 2))
    depths = z[idx] * (1.0 + rng.normal(0.0, depth_noise, size=len(idx)))
    amount = family_cfg.illum_sensitivity_scale * shift[idx]
    if fam.binary:
        flips = model.flip_threshold[idx] < amount[:, None] * model.sensitivity[idx]
        flips ^= rng.random((len(idx), fam.dimension)) < family_cfg.random_flip
        desc = model.base[idx] ^ flips.astype(np.uint8)
    else:
        noise = rng.normal(0.0, family_cfg.noise_sigma / math.sqrt(fam.dimension), size=(len(idx), fam.dimension))
        desc = (model.base[idx] + amount[:, None] * model.sensitivity[idx] + noise).astype(np.float32)

    if clutter > 0:
        c_uv = np.stack([rng.uniform(0, K.width, clutter), rng.uniform(0, K.height, clutter)], axis=1)
        c_depth = rng.uniform(p.min_depth, p.max_depth, clutter)
        if fam.binary:
            c_desc = rng.integers(0, 2, size=(clutter, fam.dimension)).astype(np.uint8)
        else:
            c_desc = rng.standard_normal((clutter, fam.dimension))
            c_desc = (c_desc / np.linalg.norm(c_desc, axis=1, keepdims=True)).astype(np.float32)
        pixels = np.vstack([pixels, c_uv])
        depths = np.concatenate([depths, c_depth])
        desc = np.vstack([desc, c_desc])
    pixels[:, 0] = np.clip(pixels[:, 0], 0.0, K.width - 1e-6)
    pixels[:, 1] = np.clip(pixels[:, 1], 0.0, K.height - 1e-6)
    return FeatureFrame(frame_id, float(time), family_cfg.family, pixels, depths, desc)


# ---------------------------------------------------------------------------
# Trajectories and sessions
# ---------------------------------------------------------------------------

@dataclass
class Waypoint:
    x: float
    y: float
    rotate_in_place: bool = False


@dataclass
class TrajectorySpec:
    """
    Start and end in front of the picture wall facing it; circles of 360
    degrees at rotate-in-place waypoints.
    """
    start: Tuple[float, float] = (1.5, 3.0)
    start_heading: float = math.pi
    waypoints: List[Waypoint] = field(default_factory=lambda: [
        Waypoint(2.0, 1.5), Waypoint(4.0, 1.5, True), Waypoint(6.5, 1.5), Waypoint(6.5, 4.5, True),
        Waypoint(4.0, 4.5), Waypoint(2.0, 4.5, True), Waypoint(1.5, 3.0),
    ])
    speed: float = 0.3
    turn_rate: float = math.radians(45.0)
    frame_period: float = 1.0

    def validate(self):
        if self.speed <= 0 or self.turn_rate <= 0 or self.frame_period <= 0:
            raise InvalidParams("speed, turn rate and frame period must be positive")
        last = self.waypoints[-1] if self.waypoints else None
        if last is None or (last.x, last.y) != tuple(self.start):
            raise InvalidParams("trajectory must return to its start")

    def keyframes(self) -> List[Tuple[float, float, float, float]]:
        """(elapsed seconds, x, y, unwrapped heading) at every motion change."""
        t, x, y, h = 0.0, self.start[0], self.start[1], self.start_heading
        keys = [(t, x, y, h)]

        def turn_to(target: float):
            nonlocal t, h
            delta = (target - h + math.pi) % (2.0 * math.pi) - math.pi
            if abs(delta) > 1e-12:
                t += abs(delta) / self.turn_rate
                h += delta
                keys.append((t, x, y, h))

        for wp in self.waypoints:
            dx, dy = wp.x - x, wp.y - y
            dist = math.hypot(dx, dy)
            if dist > 1e-9:
                turn_to(math.atan2(dy, dx))
                t += dist / self.speed
                x, y = wp.x, wp.y
                keys.append((t, x, y, h))
            if wp.rotate_in_place:
                t += 2.0 * math.pi / self.turn_rate
                h += 2.0 * math.pi
                keys.append((t, x, y, h))
        turn_to(self.start_heading)
        return keys

    def poses(self) -> List[Pose]:
        self.validate()
        keys = np.array(self.keyframes())
        times = np.arange(0.0, keys[-1, 0] + 1e-9, self.frame_period)
        xs = np.interp(times, keys[:, 0], keys[:, 1])
        ys = np.interp(times, keys[:, 0], keys[:, 2])
        hs = np.interp(times, keys[:, 0], keys[:, 3])
        return [camera_pose(x, y, h) for x, y, h in zip(xs, ys, hs)]


@dataclass
class OdometryNoise:
    sigma_rot: float = 0.002
    sigma_trans: float = 0.005


@dataclass(eq=False)
class SessionRecord:
    timestamp: float
    odom_pose: Pose
    gt_pose: Pose
    frame: FeatureFrame


@dataclass(eq=False)
class SessionData:
    label: str
    start_time: float
    family: str
    frame_offset: Pose
    records: List[SessionRecord]
    camera: CameraIntrinsics = DEFAULT_CAMERA
    noise: OdometryNoise = field(default_factory=OdometryNoise)

    def __len__(self):
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "label": self.label, "start_time": self.start_time, "family": self.family,
            "frame_offset": encode_pose(self.frame_offset), "camera": self.camera.to_dict(),
            "noise": asdict(self.noise),
            "records": [{"timestamp": r.timestamp, "odom_pose": encode_pose(r.odom_pose),
                         "gt_pose": encode_pose(r.gt_pose), "frame": r.frame.to_dict()} for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionData":
        records = [SessionRecord(float(r["timestamp"]), decode_pose(r["odom_pose"]), decode_pose(r["gt_pose"]),
                                 FeatureFrame.from_dict(r["frame"])) for r in d["records"]]
        return cls(d["label"], float(d["start_time"]), d["family"], decode_pose(d["frame_offset"]), records,
                   CameraIntrinsics.from_dict(d["camera"]), OdometryNoise(**d["noise"]))

    def save(self, path: str) -> str:
        return dump_document("session", self.to_dict(), path)

    @classmethod
    def load(cls, path: str) -> "SessionData":
        return cls.from_dict(load_document("session", path))


def simulate_odometry(gt: List[Pose], noise: OdometryNoise, rng: np.random.Generator,
                      frame_offset: Pose = None) -> List[Pose]:
    """odom_0 = frame_offset * gt_0; each step composes the true increment with tangent noise."""
    frame_offset = frame_offset or Pose.identity()
    odom = [compose(frame_offset, gt[0])]
    for a, b in zip(gt[:-1], gt[1:]):
        step = relative(a, b)
        if noise.sigma_rot > 0 or noise.sigma_trans > 0:
            xi = np.concatenate([rng.normal(0.0, noise.sigma_rot, 3), rng.normal(0.0, noise.sigma_trans, 3)])
            step = compose(step, exp_tangent(xi))
        odom.append(compose(odom[-1], step))
    return odom


def simulate_session(world: World, traj: TrajectorySpec, start_time: float, family_cfg: FeatureFamilyConfig,
                     odo_noise: OdometryNoise, seed: int, K: CameraIntrinsics = DEFAULT_CAMERA,
                     label: str = "", frame_offset: Pose = None) -> SessionData:
    """
    One traversal: ground truth from the trajectory, drifting odometry and a
    rendered frame per step, all drawn from `seed`.
    """
    rng = np.random.default_rng(seed)
    gt = traj.poses()
    frame_offset = frame_offset or Pose.identity()
    odom = simulate_odometry(gt, odo_noise, np.random.default_rng([seed, 1]), frame_offset)
    records = []
    for k, (g, o) in enumerate(zip(gt, odom)):
        t = start_time + k * traj.frame_period
        frame = render_frame(world, g, t, K, family_cfg, rng, frame_id=k)
        records.append(SessionRecord(t, o, g, frame))
    mean_feats = np.mean([len(r.frame) for r in records]) if records else 0.0
    logger.info(f"Simulated session {label or clock_label(start_time)}: {len(records)} frames, "
                f"{mean_feats:.1f} features/frame, family {family_cfg.family}")
    return SessionData(label, float(start_time), family_cfg.family, frame_offset, records, K, odo_noise)
