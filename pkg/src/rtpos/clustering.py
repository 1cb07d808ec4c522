"""Connected-component clustering of position candidates and final position pick."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .positioning import NoPositionError, PositionCandidate, weighted_mean, weighted_variance


class MemoryMode(str, Enum):
    FULL = "full"  # precomputed N x N distance table
    STREAMING = "streaming"  # visited flags only, distances computed on demand


class Strategy(str, Enum):
    MAX_POSTERIOR = "max_posterior"
    WEIGHTED_MEAN = "weighted_mean"
    COMBINED = "combined"


@dataclass(frozen=True)
class ClusterConfig:
    d_cluster: float = 5.0
    memory: MemoryMode = MemoryMode.FULL

    def __post_init__(self):
        if not self.d_cluster > 0:
            raise ValueError("d_cluster must be positive")
        object.__setattr__(self, "memory", MemoryMode(self.memory))


@dataclass(frozen=True)
class Cluster:
    members: tuple[int, ...]  # indices into the candidate list, ascending
    points: np.ndarray
    weights: np.ndarray

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    @property
    def center(self) -> np.ndarray:
        return weighted_mean(self.points, self.weights)

    @property
    def variance(self) -> float:
        return weighted_variance(self.points, self.weights)

    @property
    def size(self) -> int:
        return len(self.members)


def _components_full(p: np.ndarray, d: float) -> list[list[int]]:
    adj = cdist(p, p, "sqeuclidean") < d * d
    seen = np.zeros(len(p), dtype=bool)
    comps = []
    for s in range(len(p)):
        if seen[s]:
            continue
        seen[s] = True
        stack, comp = [s], []
        while stack:
            i = stack.pop()
            comp.append(i)
            nb = np.flatnonzero(adj[i] & ~seen)
            seen[nb] = True
            stack.extend(nb[::-1].tolist())
        comps.append(sorted(comp))
    return comps


def _components_streaming(p: np.ndarray, d: float) -> list[list[int]]:
    seen = np.zeros(len(p), dtype=bool)
    comps = []
    for s in range(len(p)):
        if seen[s]:
            continue
        seen[s] = True
        stack, comp = [s], []
        while stack:
            i = stack.pop()
            comp.append(i)
            rest = np.flatnonzero(~seen)
            if len(rest) == 0:
                continue
            dd = p[rest] - p[i]
            nb = rest[np.einsum("ij,ij->i", dd, dd) < d * d]
            seen[nb] = True
            stack.extend(nb[::-1].tolist())
        comps.append(sorted(comp))
    return comps


def connected_components(points, d_cluster: float, memory: MemoryMode | str = MemoryMode.FULL) -> list[list[int]]:
    """Components of the graph linking points closer than ``d_cluster`` (depth-first)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if MemoryMode(memory) is MemoryMode.FULL:
        return _components_full(p, d_cluster)
    return _components_streaming(p, d_cluster)


def cluster_candidates(candidates: Sequence[PositionCandidate], cfg: ClusterConfig = ClusterConfig()
                       ) -> list[Cluster]:
    """Clusters ordered by descending total weight, ties by smallest member index."""
    if not candidates:
        return []
    p = np.array([c.position for c in candidates], dtype=np.float64)
    w = np.array([c.weight for c in candidates], dtype=np.float64)
    out = [Cluster(tuple(m), p[m], w[m]) for m in connected_components(p, cfg.d_cluster, cfg.memory)]
    out.sort(key=lambda c: (-c.total_weight, c.members[0]))
    return out


def select_cluster(clusters: Sequence[Cluster]) -> Cluster:
    if not clusters:
        raise NoPositionError()
    return min(clusters, key=lambda c: (-c.total_weight, c.members[0]))


def pick_position(cluster: Cluster, strategy: Strategy | str = Strategy.WEIGHTED_MEAN) -> np.ndarray:
    strategy = Strategy(strategy)
    if cluster.size == 0:
        raise NoPositionError()
    best = cluster.points[int(np.argmax(cluster.weights))]
    if strategy is Strategy.MAX_POSTERIOR:
        return best.copy()
    mean = cluster.center
    if strategy is Strategy.WEIGHTED_MEAN:
        return mean
    return 0.5 * (best + mean)
