"""Multi-source shortest-path-tree reconstruction of labeled vessel trees."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import CenterlineTree

UNASSIGNED = 0


@dataclass
class SourceSpec:
    positions: dict[int, list[float]]
    snap_radius: float = 10.0

    def __post_init__(self):
        self.positions = {int(k): [float(c) for c in v] for k, v in self.positions.items()}
        for label, p in self.positions.items():
            if label <= 0:
                raise ValueError("source classes must be positive labels")
            if len(p) != 3:
                raise ValueError(f"source for class {label} must be a 3-vector")

    @classmethod
    def from_dict(cls, d) -> "SourceSpec":
        return cls({int(k): v for k, v in d["positions"].items()}, d.get("snap_radius", 10.0))

    def to_dict(self):
        return {"positions": {str(k): v for k, v in sorted(self.positions.items())}, "snap_radius": self.snap_radius}


class SourceSnapError(ValueError):
    pass


def snap_sources(spec: SourceSpec, centers) -> dict[int, int]:
    """Nearest center id (within snap_radius, ties to the smaller id) for each source class."""
    if not len(centers):
        raise ValueError("no centers to snap to")
    pos = centers.positions
    out = {}
    for label in sorted(spec.positions):
        d = np.linalg.norm(pos - np.asarray(spec.positions[label]), axis=1)
        best = int(np.argmin(d))  # argmin returns the first, i.e. smallest id, on ties
        if d[best] > spec.snap_radius:
            raise SourceSnapError(
                f"no center within {spec.snap_radius} voxels of the class {label} source (nearest {d[best]:.2f})"
            )
        out[label] = best
    return out


@dataclass
class ReconstructedForest:
    label: np.ndarray  # 0 = unassigned
    parent: np.ndarray  # -1 = none
    dist: np.ndarray  # inf when unassigned
    sources: dict[int, int] = field(default_factory=dict)

    @property
    def unassigned(self) -> np.ndarray:
        return np.flatnonzero(self.label == UNASSIGNED)

    def report(self) -> dict:
        assigned = self.label != UNASSIGNED
        counts = {str(c): int(np.count_nonzero(self.label == c)) for c in sorted(self.sources)}
        return {
            "unassigned_count": int(np.count_nonzero(~assigned)),
            "per_class_vertex_counts": counts,
            "total_cost": math.fsum(self.dist[assigned].tolist()),
        }


def _adjacency(graph):
    adj: list[list[tuple[int, float]]] = [[] for _ in range(graph.n_vertices)]
    for a, b, w in zip(graph.i.tolist(), graph.j.tolist(), graph.weight.tolist()):
        adj[a].append((b, w))
        adj[b].append((a, w))
    return adj


def shortest_path_forest(graph, sources: dict[int, int]) -> ReconstructedForest:
    """Multi-source Dijkstra; each vertex takes the class of its cheapest source.

    A vertex's tentative state is the key (dist, parent id, class); an offer
    replaces it only when strictly smaller, which fixes all ties. Sources
    start with parent -1.
    """
    verts = list(sources.values())
    if len(set(verts)) != len(verts):
        raise ValueError("two classes share a source vertex")
    n = graph.n_vertices
    for v in verts:
        if not 0 <= v < n:
            raise ValueError(f"source vertex {v} out of range")
    best = [(math.inf, n, 0)] * n
    done = [False] * n
    heap = []
    for label, v in sorted(sources.items()):
        best[v] = (0.0, -1, label)
        heapq.heappush(heap, (0.0, v))
    adj = _adjacency(graph)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u] or d != best[u][0]:
            continue
        done[u] = True
        label = best[u][2]
        for v, w in adj[u]:
            if done[v]:
                continue
            offer = (d + w, u, label)
            if offer < best[v]:
                best[v] = offer
                heapq.heappush(heap, (offer[0], v))
    dist = np.array([b[0] if done[k] else math.inf for k, b in enumerate(best)])
    parent = np.array([b[1] if done[k] else -1 for k, b in enumerate(best)], dtype=np.int64)
    label = np.array([b[2] if done[k] else UNASSIGNED for k, b in enumerate(best)], dtype=np.int64)
    return ReconstructedForest(label, parent, dist, dict(sources))


def forest_to_trees(forest: ReconstructedForest, centers) -> tuple[list[CenterlineTree], dict]:
    """One CenterlineTree per class (radius fixed at 1.0) plus a run report."""
    pos = centers.positions
    trees = []
    for label in sorted(forest.sources):
        members = np.flatnonzero(forest.label == label)
        trees.append(
            CenterlineTree(
                ids=members,
                pos=pos[members],
                radius=np.ones(len(members)),
                parent=forest.parent[members],
                label=label,
            )
        )
    report = forest.report()
    report["dropped_vertex_ids"] = [int(v) for v in forest.unassigned]
    return trees, report


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
