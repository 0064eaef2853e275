"""
Descriptor families, feature frames and frame-to-frame matching (NNDR and
window-guided).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from errors import FamilyMismatch, InvalidParams
from geom import CameraIntrinsics, Pose, back_project_points, project_points, transform_points
from mapio import decode_array, encode_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DescriptorFamily:
    name: str
    label: str
    dimension: int
    binary: bool
    bytes_per_element: int

    @property
    def dtype(self):
        return np.uint8 if self.binary else np.float32


# Dimensions and element sizes of the eight compared extractors.
FAMILIES: Dict[str, DescriptorFamily] = {f.name: f for f in (
    DescriptorFamily("SU", "SURF", 64, False, 4),
    DescriptorFamily("SI", "SIFT", 128, False, 4),
    DescriptorFamily("BF", "BRIEF", 32, True, 1),
    DescriptorFamily("BK", "BRISK", 64, True, 1),
    DescriptorFamily("KA", "KAZE", 64, False, 4),
    DescriptorFamily("FR", "FREAK", 64, True, 1),
    DescriptorFamily("DY", "DAISY", 200, False, 4),
    DescriptorFamily("SP", "SuperPoint", 256, False, 4),
)}


def get_family(name: str) -> DescriptorFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise InvalidParams(f"unknown descriptor family {name!r}; known: {', '.join(FAMILIES)}")


@dataclass(frozen=True, eq=False)
class Descriptor:
    family: str
    values: np.ndarray

    def __post_init__(self):
        fam = get_family(self.family)
        values = np.asarray(self.values, dtype=fam.dtype).reshape(-1)
        if len(values) != fam.dimension:
            raise FamilyMismatch(f"{fam.label} descriptors have {fam.dimension} elements, got {len(values)}")
        if fam.binary and np.any(values > 1):
            raise FamilyMismatch(f"{fam.label} descriptors are binary")
        object.__setattr__(self, "values", values)


@dataclass(eq=False)
class FeatureFrame:
    """
    One camera observation. Keypoints, descriptors and word ids are stored as
    parallel arrays; word id -1 means unassigned.
    """
    frame_id: int
    timestamp: float
    family: str
    pixels: np.ndarray
    depths: np.ndarray
    descriptors: np.ndarray
    word_ids: np.ndarray = None

    def __post_init__(self):
        fam = get_family(self.family)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        n = len(self.pixels)
        self.depths = np.asarray(self.depths, dtype=float).reshape(n)
        self.descriptors = np.asarray(self.descriptors, dtype=fam.dtype).reshape(n, fam.dimension)
        if self.word_ids is None:
            self.word_ids = np.full(n, -1, dtype=np.int64)
        self.word_ids = np.asarray(self.word_ids, dtype=np.int64).reshape(n)
        if np.any(self.depths < 0):
            raise ValueError("keypoint depth must be >= 0")

    def __len__(self):
        return len(self.pixels)

    @property
    def descriptor_family(self) -> DescriptorFamily:
        return get_family(self.family)

    def copy(self) -> "FeatureFrame":
        return FeatureFrame(self.frame_id, self.timestamp, self.family, self.pixels.copy(),
                            self.depths.copy(), self.descriptors.copy(), self.word_ids.copy())

    def to_dict(self) -> dict:
        return {
            "frame_id": int(self.frame_id),
            "timestamp": float(self.timestamp),
            "family": self.family,
            "pixels": encode_array(self.pixels),
            "depths": encode_array(self.depths),
            "descriptors": encode_array(self.descriptors),
            "word_ids": encode_array(self.word_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureFrame":
        return cls(int(d["frame_id"]), float(d["timestamp"]), d["family"], decode_array(d["pixels"]),
                   decode_array(d["depths"]), decode_array(d["descriptors"]), decode_array(d["word_ids"]))


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


def distance_matrix(family: DescriptorFamily, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Hamming distances for binary families, Euclidean otherwise."""
    if family.binary:
        A = np.asarray(A, dtype=np.int32)
        B = np.asarray(B, dtype=np.int32)
        return (A @ (1 - B).T + (1 - A) @ B.T).astype(float)
    return cdist(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def descriptor_distance(a: Descriptor, b: Descriptor) -> float:
    if a.family != b.family or len(a.values) != len(b.values):
        raise FamilyMismatch(f"cannot compare {a.family} with {b.family}")
    return float(distance_matrix(get_family(a.family), a.values[None], b.values[None])[0, 0])


def check_family(a: FeatureFrame, b: FeatureFrame):
    if a.family != b.family:
        raise FamilyMismatch(f"frames use different descriptor families ({a.family} vs {b.family})")


def _one_to_one(ia: np.ndarray, ib: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Indices into the claims keeping the smallest-distance claimant per b index."""
    if not len(ia):
        return np.zeros(0, dtype=int)
    order = np.lexsort((ia, d, ib))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ib[order][1:] != ib[order][:-1]
    keep = order[first]
    return keep[np.argsort(ia[keep], kind="stable")]


def nndr_match(a: FeatureFrame, b: FeatureFrame, ratio: float = 0.8) -> List[Match]:
    """
    Nearest neighbor distance ratio matching of a against all of b.

    Every query claims its nearest neighbor in b; per b index the closest
    claimant wins, and the winner survives only if d1 < ratio * d2.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"NNDR ratio must lie in (0, 1), got {ratio}")
    check_family(a, b)
    if len(a) == 0 or len(b) < 2:
        return []
    D = distance_matrix(a.descriptor_family, a.descriptors, b.descriptors)
    rows = np.arange(len(a))
    nn1 = D.argmin(axis=1)
    d1 = D[rows, nn1]
    D[rows, nn1] = np.inf
    d2 = D.min(axis=1)
    keep = _one_to_one(rows, nn1, d1)
    keep = keep[d1[keep] < ratio * d2[keep]]
    return [Match(int(i), int(nn1[i]), float(d1[i])) for i in keep]


def guided_match(a: FeatureFrame, b: FeatureFrame, transform_ab: Pose, K: CameraIntrinsics,
                 window_px: float = 20.0, ratio: float = 0.8) -> List[Match]:
    """
    Project a's depth-backed features into b with transform_ab (a-camera to
    b-camera) and match each against b's keypoints inside a square window of
    half-side window_px around the projection.
    """
    check_family(a, b)
    if window_px <= 0 or len(a) == 0 or len(b) == 0:
        return []
    ia = np.flatnonzero(a.depths > 0)
    if not len(ia):
        return []
    pc = transform_points(transform_ab, back_project_points(a.pixels[ia], a.depths[ia], K))
    front = pc[:, 2] > 1e-9
    ia, pc = ia[front], pc[front]
    if not len(ia):
        return []
    proj = project_points(pc, K)
    candidates = cKDTree(b.pixels).query_ball_point(proj, r=window_px, p=np.inf)

    fam = a.descriptor_family
    claims_a, claims_b, claims_d = [], [], []
    for i, cand in zip(ia, candidates):
        if not cand:
            continue
        cand = np.sort(np.asarray(cand, dtype=int))
        d = distance_matrix(fam, a.descriptors[i:i + 1], b.descriptors[cand])[0]
        best = int(np.argmin(d))
        if len(cand) > 1:
            second = np.partition(d, 1)[1]
            if not d[best] < ratio * second:
                continue
        claims_a.append(i)
        claims_b.append(cand[best])
        claims_d.append(d[best])
    ca, cb, cd = np.array(claims_a, dtype=int), np.array(claims_b, dtype=int), np.array(claims_d, dtype=float)
    keep = _one_to_one(ca, cb, cd)
    return [Match(int(ca[k]), int(cb[k]), float(cd[k])) for k in keep]
