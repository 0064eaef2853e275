"""
Multi-session pose graph and its sparse Levenberg-Marquardt optimizer.

Nodes carry a session-local odometry pose and a global optimized pose. The
first node of the oldest session is the anchor that fixes the gauge; other
sessions join the anchor's frame once a loop closure links them.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial.transform import Rotation

from errors import (DisconnectedGraph, InvalidLink, InvalidParams, NonPositiveDefiniteInformation,
                    UnknownNode)
from features import FeatureFrame
from geom import Pose, compose, invert, relative, skew, so3_right_jacobian_inv
from mapio import decode_array, decode_pose, dump_document, encode_array, encode_pose, load_document
from vocabulary import Vocabulary, VocabularyConfig

logger = logging.getLogger(__name__)

_COST_FLOOR = 1e-24


class LinkKind(Enum):
    ODOMETRY = "odometry"
    LOOP_CLOSURE = "loop_closure"
    PROXIMITY = "proximity"


@dataclass
class Session:
    session_id: int
    label: str
    start_time: float
    family: str
    aligned: bool = False
    frame_offset: Optional[Pose] = None
    node_ids: List[int] = field(default_factory=list)


@dataclass(eq=False)
class MapNode:
    node_id: int
    session_id: int
    timestamp: float
    odom_pose: Pose
    opt_pose: Pose
    frame: FeatureFrame
    gt_pose: Optional[Pose] = None


@dataclass(frozen=True, eq=False)
class Link:
    from_id: int
    to_id: int
    kind: LinkKind
    transform: Pose
    information: np.ndarray
    inliers: int = 0


def information_from_sigmas(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    """diag(1/sigma^2) over [rotation, translation]."""
    if sigma_rot <= 0 or sigma_trans <= 0:
        raise InvalidParams("information sigmas must be positive")
    return np.diag([1.0 / sigma_rot ** 2] * 3 + [1.0 / sigma_trans ** 2] * 3)


def _check_information(information) -> np.ndarray:
    omega = np.array(information, dtype=float)
    if omega.shape != (6, 6) or not np.all(np.isfinite(omega)):
        raise NonPositiveDefiniteInformation("information must be a finite 6x6 matrix")
    if not np.allclose(omega, omega.T, rtol=1e-9, atol=1e-12):
        raise NonPositiveDefiniteInformation("information matrix is not symmetric")
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteInformation("information matrix is not positive-definite")
    omega.setflags(write=False)
    return omega


def link_residual(link: Link, pose_from: Pose, pose_to: Pose) -> np.ndarray:
    """Tangent of link.transform^-1 * (pose_from^-1 * pose_to), rotation first."""
    E = compose(invert(link.transform), relative(pose_from, pose_to))
    return np.concatenate([E.rotvec(), E.translation])


class MultiSessionMap:
    """
    Sessions (oldest first), nodes, links and the shared vocabulary.
    """

    def __init__(self, family: str, vocab_cfg: VocabularyConfig = None):
        self.family = family
        self.sessions: List[Session] = []
        self.nodes: Dict[int, MapNode] = {}
        self.links: List[Link] = []
        self.vocabulary = Vocabulary(family, vocab_cfg)
        self.config: dict = {}
        self._adjacency: Dict[int, Set[int]] = {}
        self._chain: Dict[int, Set[int]] = {}
        self._next_node_id = 0

    def __len__(self):
        return len(self.nodes)

    @property
    def anchor_id(self) -> Optional[int]:
        for s in self.sessions:
            if s.node_ids:
                return s.node_ids[0]
        return None

    def session(self, session_id: int) -> Session:
        if not 0 <= session_id < len(self.sessions):
            raise InvalidParams(f"unknown session {session_id}")
        return self.sessions[session_id]

    def node(self, node_id: int) -> MapNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"node {node_id} does not exist")

    def session_of(self, node_id: int) -> Session:
        return self.sessions[self.node(node_id).session_id]

    def add_session(self, label: str, start_time: float = 0.0, frame_offset: Pose = None) -> Session:
        s = Session(len(self.sessions), label, float(start_time), self.family,
                    aligned=not self.nodes, frame_offset=frame_offset)
        self.sessions.append(s)
        logger.info(f"Added session {s.session_id} ({label}), aligned={s.aligned}")
        return s

    def add_node(self, session_id: int, timestamp: float, odom_pose: Pose, frame: FeatureFrame,
                 opt_pose: Pose = None, gt_pose: Pose = None) -> MapNode:
        """
        Append a node. Without an explicit opt_pose the first node of a session
        takes its odometry pose and later ones follow the odometry increment
        from the previous node of the session.
        """
        s = self.session(session_id)
        if frame.family != self.family:
            raise InvalidParams(f"frame family {frame.family} does not match map family {self.family}")
        if opt_pose is None:
            if s.node_ids:
                prev = self.nodes[s.node_ids[-1]]
                opt_pose = compose(prev.opt_pose, relative(prev.odom_pose, odom_pose))
            else:
                opt_pose = odom_pose
        n = MapNode(self._next_node_id, session_id, float(timestamp), odom_pose, opt_pose, frame, gt_pose)
        self._next_node_id += 1
        self.nodes[n.node_id] = n
        self._adjacency[n.node_id] = set()
        self._chain[n.node_id] = set()
        s.node_ids.append(n.node_id)
        return n

    def add_link(self, from_id: int, to_id: int, kind: LinkKind, transform: Pose, information,
                 inliers: int = 0) -> Link:
        for node_id in (from_id, to_id):
            if node_id not in self.nodes:
                raise UnknownNode(f"link references unknown node {node_id}")
        if from_id == to_id:
            raise InvalidLink(f"{kind.value} link from node {from_id} to itself")
        if kind is LinkKind.ODOMETRY:
            a, b = self.nodes[from_id], self.nodes[to_id]
            chain = self.sessions[a.session_id].node_ids
            if a.session_id != b.session_id or chain.index(to_id) != chain.index(from_id) + 1:
                raise InvalidLink(f"odometry link {from_id}->{to_id} does not join consecutive nodes of one session")
        link = Link(int(from_id), int(to_id), kind, transform, _check_information(information), int(inliers))
        self.links.append(link)
        self._adjacency[from_id].add(to_id)
        self._adjacency[to_id].add(from_id)
        if kind is LinkKind.ODOMETRY:
            self._chain[from_id].add(to_id)
            self._chain[to_id].add(from_id)
        return link

    def neighbors(self, node_id: int) -> List[int]:
        return sorted(self._adjacency[self.node(node_id).node_id])

    def chain_neighbors(self, node_id: int) -> List[int]:
        """Previous and next node of the same session."""
        return sorted(self._chain[self.node(node_id).node_id])

    def links_of_kind(self, *kinds: LinkKind) -> List[Link]:
        return [l for l in self.links if l.kind in kinds]

    def residual(self) -> float:
        """Sum over links of r^T Omega r at the current optimized poses."""
        total = 0.0
        for l in self.links:
            r = link_residual(l, self.nodes[l.from_id].opt_pose, self.nodes[l.to_id].opt_pose)
            total += float(r @ l.information @ r)
        return total

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "config": self.config,
            "sessions": [{
                "session_id": s.session_id, "label": s.label, "start_time": s.start_time,
                "family": s.family, "aligned": s.aligned, "node_ids": list(s.node_ids),
                "frame_offset": encode_pose(s.frame_offset) if s.frame_offset is not None else None,
            } for s in self.sessions],
            "nodes": [{
                "node_id": n.node_id, "session_id": n.session_id, "timestamp": n.timestamp,
                "odom_pose": encode_pose(n.odom_pose), "opt_pose": encode_pose(n.opt_pose),
                "gt_pose": encode_pose(n.gt_pose) if n.gt_pose is not None else None,
                "frame": n.frame.to_dict(),
            } for n in sorted(self.nodes.values(), key=lambda n: n.node_id)],
            "links": [{
                "from": l.from_id, "to": l.to_id, "kind": l.kind.value, "inliers": l.inliers,
                "transform": encode_pose(l.transform), "information": encode_array(np.asarray(l.information)),
            } for l in self.links],
            "vocabulary": self.vocabulary.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiSessionMap":
        m = cls(d["family"])
        m.vocabulary = Vocabulary.from_dict(d["vocabulary"])
        m.config = dict(d.get("config") or {})
        for sd in d["sessions"]:
            offset = decode_pose(sd["frame_offset"]) if sd.get("frame_offset") else None
            m.sessions.append(Session(int(sd["session_id"]), sd["label"], float(sd["start_time"]), sd["family"],
                                      bool(sd["aligned"]), offset, []))
        for nd in d["nodes"]:
            gt = decode_pose(nd["gt_pose"]) if nd.get("gt_pose") else None
            n = MapNode(int(nd["node_id"]), int(nd["session_id"]), float(nd["timestamp"]),
                        decode_pose(nd["odom_pose"]), decode_pose(nd["opt_pose"]),
                        FeatureFrame.from_dict(nd["frame"]), gt)
            m.nodes[n.node_id] = n
            m._adjacency[n.node_id] = set()
            m._chain[n.node_id] = set()
            m.sessions[n.session_id].node_ids.append(n.node_id)
            m._next_node_id = max(m._next_node_id, n.node_id + 1)
        for ld in d["links"]:
            m.add_link(int(ld["from"]), int(ld["to"]), LinkKind(ld["kind"]), decode_pose(ld["transform"]),
                       decode_array(ld["information"]), int(ld["inliers"]))
        return m

    def save(self, path: str) -> str:
        try:
            return dump_document("map", self.to_dict(), path)
        except OSError as e:
            logger.error(f"Failed to save map to {path}: {e}")
            raise

    @classmethod
    def load(cls, path: str) -> "MultiSessionMap":
        m = cls.from_dict(load_document("map", path))
        logger.info(f"Loaded map {path}: {len(m.sessions)} sessions, {len(m.nodes)} nodes, "
                    f"{len(m.links)} links, {len(m.vocabulary)} words")
        return m


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    max_iterations: int = 50
    rel_tol: float = 1e-9
    lambda_init: float = 1e-3
    lambda_range: Tuple[float, float] = (1e-9, 1e9)
    robust: str = "none"
    huber_delta: float = 1.0


@dataclass
class OptimizationResult:
    initial_cost: float
    final_cost: float
    iterations: int
    history: List[float]
    unreached: List[int] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.final_cost <= self.initial_cost


def reachable_from(m: MultiSessionMap, start: int) -> Set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        n = queue.popleft()
        for j in m._adjacency[n]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return seen


class _Problem:
    """Vectorized link residuals and Jacobians over one connected component."""

    def __init__(self, ids: List[int], links: List[Link], cfg: OptimizerConfig):
        self.cfg = cfg
        position = {n: k for k, n in enumerate(ids)}
        self.fi = np.array([position[l.from_id] for l in links], dtype=int)
        self.tj = np.array([position[l.to_id] for l in links], dtype=int)
        self.Zr = np.array([l.transform.rotation for l in links]).reshape(-1, 3, 3)
        self.Zt = np.array([l.transform.translation for l in links]).reshape(-1, 3)
        self.omega = np.array([l.information for l in links]).reshape(-1, 6, 6)

    def residuals(self, R: np.ndarray, t: np.ndarray):
        Ri, Rj = R[self.fi], R[self.tj]
        RiT = np.transpose(Ri, (0, 2, 1))
        R_ij = RiT @ Rj
        t_ij = np.einsum("nij,nj->ni", RiT, t[self.tj] - t[self.fi])
        ZrT = np.transpose(self.Zr, (0, 2, 1))
        R_E = ZrT @ R_ij
        t_E = np.einsum("nij,nj->ni", ZrT, t_ij - self.Zt)
        phi = Rotation.from_matrix(R_E).as_rotvec() if len(R_E) else np.zeros((0, 3))
        return np.hstack([phi, t_E]), R_ij, t_ij, R_E

    def weights(self, r: np.ndarray) -> np.ndarray:
        s2 = np.einsum("ni,nij,nj->n", r, self.omega, r)
        if self.cfg.robust == "huber":
            s = np.sqrt(np.maximum(s2, 0.0))
            d = self.cfg.huber_delta
            return np.where(s <= d, 1.0, d / np.maximum(s, 1e-300))
        if self.cfg.robust != "none":
            raise InvalidParams(f"unknown robust kernel {self.cfg.robust!r}")
        return np.ones(len(r))

    def cost(self, R: np.ndarray, t: np.ndarray) -> float:
        r = self.residuals(R, t)[0]
        s2 = np.einsum("ni,nij,nj->n", r, self.omega, r)
        if self.cfg.robust == "huber":
            d = self.cfg.huber_delta
            s = np.sqrt(np.maximum(s2, 0.0))
            s2 = np.where(s <= d, s2, 2.0 * d * s - d * d)
        return float(math.fsum(s2.tolist()))

    def jacobians(self, r, R_ij, t_ij, R_E):
        m = len(r)
        Jr_inv = so3_right_jacobian_inv(r[:, :3]).reshape(m, 3, 3)
        ZrT = np.transpose(self.Zr, (0, 2, 1))
        Ji = np.zeros((m, 6, 6))
        Jj = np.zeros((m, 6, 6))
        Ji[:, :3, :3] = -Jr_inv @ np.transpose(R_ij, (0, 2, 1))
        Ji[:, 3:, :3] = ZrT @ skew(t_ij)
        Ji[:, 3:, 3:] = -ZrT
        Jj[:, :3, :3] = Jr_inv
        Jj[:, 3:, 3:] = R_E
        return Ji, Jj


def _assemble(problem: _Problem, r, Ji, Jj, w, var: np.ndarray, n_vars: int):
    """Normal equations H dx = -b on the non-anchor variables, as sparse blocks."""
    W = problem.omega * w[:, None, None]
    blocks = {
        (0, 0): np.transpose(Ji, (0, 2, 1)) @ W @ Ji,
        (0, 1): np.transpose(Ji, (0, 2, 1)) @ W @ Jj,
        (1, 0): np.transpose(Jj, (0, 2, 1)) @ W @ Ji,
        (1, 1): np.transpose(Jj, (0, 2, 1)) @ W @ Jj,
    }
    ends = (var[problem.fi], var[problem.tj])
    grads = (np.einsum("nji,njk,nk->ni", Ji, W, r), np.einsum("nji,njk,nk->ni", Jj, W, r))
    rows, cols, data = [], [], []
    k6 = np.arange(6)
    for (a, c), block in blocks.items():
        ok = (ends[a] >= 0) & (ends[c] >= 0)
        if not np.any(ok):
            continue
        rr = 6 * ends[a][ok][:, None, None] + k6[None, :, None]
        cc = 6 * ends[c][ok][:, None, None] + k6[None, None, :]
        rows.append(np.broadcast_to(rr, block[ok].shape).ravel())
        cols.append(np.broadcast_to(cc, block[ok].shape).ravel())
        data.append(block[ok].ravel())
    size = 6 * n_vars
    if data:
        H = sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(size, size)).tocsc()
    else:
        H = sparse.csc_matrix((size, size))
    b = np.zeros(size)
    for a in (0, 1):
        ok = ends[a] >= 0
        np.add.at(b, (6 * ends[a][ok][:, None] + k6[None, :]).ravel(), grads[a][ok].ravel())
    return H, b


def _retract(R, t, var_ids, dx):
    """Right-perturb rotations and body-frame translations of the free nodes."""
    R_new, t_new = R.copy(), t.copy()
    d = dx.reshape(-1, 6)
    R_new[var_ids] = R[var_ids] @ Rotation.from_rotvec(d[:, :3]).as_matrix()
    t_new[var_ids] = t[var_ids] + np.einsum("nij,nj->ni", R[var_ids], d[:, 3:])
    return R_new, t_new


def optimize(m: MultiSessionMap, cfg: OptimizerConfig = None, allow_disconnected: bool = False) -> OptimizationResult:
    """
    Minimize the information-weighted link residuals over all nodes connected
    to the anchor, keeping the anchor fixed. Results are written back only
    once the solve finishes. Nodes not connected to the anchor keep their poses
    and are reported; unless allow_disconnected, DisconnectedGraph is raised
    after the connected part has been updated.
    """
    cfg = cfg or OptimizerConfig()
    anchor = m.anchor_id
    if anchor is None:
        return OptimizationResult(0.0, 0.0, 0, [0.0])
    reached = reachable_from(m, anchor)
    unreached = sorted(set(m.nodes) - reached)
    ids = [anchor] + sorted(reached - {anchor})
    links = [l for l in m.links if l.from_id in reached and l.to_id in reached]

    R = np.array([m.nodes[n].opt_pose.rotation for n in ids])
    t = np.array([m.nodes[n].opt_pose.translation for n in ids])
    var = np.arange(len(ids)) - 1
    var_ids = np.arange(1, len(ids))
    n_vars = len(var_ids)

    problem = _Problem(ids, links, cfg)
    cost = problem.cost(R, t) if links else 0.0
    history = [cost]
    lam = cfg.lambda_init
    iterations = 0
    while links and n_vars and iterations < cfg.max_iterations and cost > _COST_FLOOR:
        iterations += 1
        r, R_ij, t_ij, R_E = problem.residuals(R, t)
        Ji, Jj = problem.jacobians(r, R_ij, t_ij, R_E)
        H, b = _assemble(problem, r, Ji, Jj, problem.weights(r), var, n_vars)
        damped = H + sparse.diags(lam * np.maximum(H.diagonal(), 1e-12), format="csc")
        dx = spsolve(damped, -b)
        if not np.all(np.isfinite(dx)):
            new_cost = math.inf
        else:
            R_try, t_try = _retract(R, t, var_ids, dx)
            new_cost = problem.cost(R_try, t_try)
        if new_cost < cost:
            improvement = (cost - new_cost) / max(cost, _COST_FLOOR)
            R, t, cost = R_try, t_try, new_cost
            history.append(cost)
            lam = max(lam / 10.0, cfg.lambda_range[0])
            logger.debug(f"graph iteration {iterations}: cost {cost:.6g}, lambda {lam:.1e}")
            if improvement < cfg.rel_tol:
                break
        else:
            if math.isfinite(new_cost) and new_cost - cost <= cfg.rel_tol * max(cost, _COST_FLOOR):
                break
            lam *= 10.0
            if lam > cfg.lambda_range[1]:
                break

    for k in var_ids:
        # re-orthonormalize accumulated products before they become Poses
        Rk = Rotation.from_matrix(R[k]).as_matrix()
        node = m.nodes[ids[k]]
        node.opt_pose = Pose(Rk, t[k])
    result = OptimizationResult(history[0], cost, iterations, history, unreached)
    logger.info(f"Optimized {len(ids)} nodes / {len(links)} links: cost {history[0]:.6g} -> {cost:.6g} "
                f"in {iterations} iterations")
    if unreached and not allow_disconnected:
        logger.warning(f"{len(unreached)} nodes are not connected to anchor node {anchor}")
        raise DisconnectedGraph(unreached, result)
    return result


def align_session(m: MultiSessionMap, session_id: int, correction: Pose):
    """Move every node of an unaligned session into the global frame: opt = correction * odom."""
    s = m.session(session_id)
    for node_id in s.node_ids:
        node = m.nodes[node_id]
        node.opt_pose = compose(correction, node.odom_pose)
    s.aligned = True
    logger.info(f"Aligned session {session_id} ({s.label}) into the global frame")


def nodes_within(m: MultiSessionMap, center: Pose, radius: float, candidates: Iterable[int]) -> List[int]:
    ids = list(candidates)
    if not ids:
        return []
    pos = np.array([m.nodes[n].opt_pose.translation for n in ids])
    d = np.linalg.norm(pos - center.translation, axis=1)
    return [n for n, di in zip(ids, d) if di <= radius]
