"""
Discrete Bayes filter over loop-closure hypotheses.

Hypotheses are the map nodes handed in through the neighbor mapping plus a
"new location" event. Prediction spreads each node's mass equally over itself
and its chain neighbors and leaks a share of it to the new-location event.
Nodes entering the hypothesis set are seeded from the new-location mass as if
it were spread uniformly over every hypothesis. The update multiplies by a
normalized likelihood and renormalizes.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from vocabulary import LikelihoodVector

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9


@dataclass
class BayesConfig:
    loop_threshold: float = 0.15
    neighbor_mass: float = 0.9
    diffuse: bool = True
    no_evidence_new_likelihood: float = 2.0
    recenter_weight: float = 0.5

    @classmethod
    def identity_transition(cls, **overrides) -> "BayesConfig":
        params = dict(neighbor_mass=1.0, diffuse=False)
        params.update(overrides)
        return cls(**params)


@dataclass
class Belief:
    p_new: float = 1.0
    p_loop: Dict[int, float] = field(default_factory=dict)

    def total(self) -> float:
        return self.p_new + math.fsum(self.p_loop.values())

    def is_valid(self, tol: float = NORMALIZATION_TOL) -> bool:
        return (abs(self.total() - 1.0) <= tol and self.p_new >= 0.0
                and all(p >= 0.0 for p in self.p_loop.values()))

    def argmax(self) -> Optional[int]:
        if not self.p_loop:
            return None
        return min(self.p_loop, key=lambda n: (-self.p_loop[n], n))

    def copy(self) -> "Belief":
        return Belief(self.p_new, dict(self.p_loop))


def normalize_likelihood(lik: LikelihoodVector, nodes: Sequence[int],
                         cfg: BayesConfig = None) -> Tuple[np.ndarray, float]:
    """
    L(i) = 1 + max(0, (s_i - mu) / sigma) over the hypothesis nodes, with mu and
    sigma the mean and standard deviation of the nonzero scores, and
    L(new) = max(1, 1 + mu / sigma).
    """
    cfg = cfg or BayesConfig()
    scores = np.array([lik.get(n) for n in nodes], dtype=float)
    nonzero = scores[scores > 0]
    if not len(nonzero):
        return np.ones(len(nodes)), cfg.no_evidence_new_likelihood
    mu = float(nonzero.mean())
    sigma = float(nonzero.std())
    if sigma <= 0.0:
        return np.ones(len(nodes)), 1.0
    L = 1.0 + np.maximum(0.0, (scores - mu) / sigma)
    return L, max(1.0, 1.0 + mu / sigma)


def _predict(b: Belief, nodes: Sequence[int], neighbors: Mapping[int, Sequence[int]],
             cfg: BayesConfig) -> Tuple[np.ndarray, float]:
    position = {n: k for k, n in enumerate(nodes)}
    m = np.array([b.p_loop.get(n, 0.0) for n in nodes], dtype=float)
    dropped = math.fsum(p for n, p in b.p_loop.items() if n not in position)

    if cfg.diffuse:
        spread = np.zeros(len(nodes))
        for k, n in enumerate(nodes):
            targets = [k] + sorted({position[j] for j in neighbors[n] if j in position and j != n})
            spread[targets] += m[k] / len(targets)
    else:
        spread = m.copy()
    pred = cfg.neighbor_mass * spread
    pred_new = b.p_new + (1.0 - cfg.neighbor_mass) * float(m.sum()) + dropped

    fresh = [k for k, n in enumerate(nodes) if n not in b.p_loop]
    if fresh:
        seed = b.p_new / (len(nodes) + 1)
        pred[fresh] += seed
        pred_new -= seed * len(fresh)
    return pred, pred_new


def bayes_update(b: Belief, lik: LikelihoodVector, neighbors: Mapping[int, Sequence[int]],
                 cfg: BayesConfig = None) -> Belief:
    """
    One predict/update step. `neighbors` maps every hypothesis node to its
    pose-graph neighbors; nodes absent from it hand their mass to p_new.
    """
    cfg = cfg or BayesConfig()
    nodes = sorted(neighbors)
    pred, pred_new = _predict(b, nodes, neighbors, cfg)
    L, L_new = normalize_likelihood(lik, nodes, cfg)
    post = L * pred
    post_new = L_new * pred_new
    eta = math.fsum(post.tolist()) + post_new
    if eta <= 0.0:
        return Belief(1.0, {})
    return Belief(post_new / eta, {n: float(p / eta) for n, p in zip(nodes, post)})


def check_hypothesis(b: Belief, threshold: float, neighbors: Mapping[int, Sequence[int]] = None) -> Optional[int]:
    """
    The most probable node if its posterior pooled with its graph neighbors'
    reaches the threshold.
    """
    best = b.argmax()
    if best is None:
        return None
    pooled = b.p_loop[best]
    if neighbors is not None:
        pooled += math.fsum(b.p_loop.get(j, 0.0) for j in neighbors.get(best, ()) if j != best)
    if pooled >= threshold:
        return best
    return None


def recenter(b: Belief, node_id: int, weight: float) -> Belief:
    """Blend the belief with a point mass on node_id after a localization."""
    p_loop = {n: (1.0 - weight) * p for n, p in b.p_loop.items()}
    p_loop[node_id] = p_loop.get(node_id, 0.0) + weight
    return Belief((1.0 - weight) * b.p_new, p_loop)
