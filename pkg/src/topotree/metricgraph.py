"""Reconstruction graphs over center voxels built from a learned metric."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError


@dataclass
class MetricGraph:
    n_vertices: int
    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not (len(self.i) == len(self.j) == len(self.weight)):
            raise ValueError("edge arrays differ in length")
        if np.any(self.i >= self.j):
            raise ValueError("edges must satisfy i < j")
        if np.any(~np.isfinite(self.weight)) or np.any(self.weight < 0):
            raise ValueError("edge weights must be finite and >= 0")
        if len(self.i) and (self.i.min() < 0 or self.j.max() >= self.n_vertices):
            raise ValueError("edge endpoint outside vertex range")
        order = np.lexsort((self.j, self.i))
        self.i, self.j, self.weight = self.i[order], self.j[order], self.weight[order]
        if len(self.i) > 1 and np.any((np.diff(self.i) == 0) & (np.diff(self.j) == 0)):
            raise ValueError("duplicate edge")

    def __len__(self):
        return len(self.i)

    def edges(self):
        return [(int(a), int(b), float(w)) for a, b, w in zip(self.i, self.j, self.weight)]

    def __eq__(self, other):
        return (
            isinstance(other, MetricGraph)
            and self.n_vertices == other.n_vertices
            and np.array_equal(self.i, other.i)
            and np.array_equal(self.j, other.j)
            and self.weight.tobytes() == other.weight.tobytes()
        )


def neighbor_pairs(positions, radius: float) -> np.ndarray:
    """Index pairs (i < j) whose voxel-space distance is <= radius, sorted by (i, j)."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    cand = cKDTree(pos).query_pairs(radius + 1e-6, output_type="ndarray")
    if not len(cand):
        return np.zeros((0, 2), dtype=np.int64)
    sq = ((pos[cand[:, 0]] - pos[cand[:, 1]]) ** 2).sum(axis=1)
    cand = np.sort(cand[sq <= radius * radius], axis=1)
    return cand[np.lexsort((cand[:, 1], cand[:, 0]))]


def _vectors(centers, embeddings):
    ids = np.arange(len(centers))
    return embeddings.vectors[embeddings.row_of(ids)]


def build_topology_graph(centers, embeddings, radius: float = 15.0, alpha: float = 1.0 / 15.0,
                         feasibility_cutoff: float = 2.0) -> MetricGraph:
    """Edge (i, j) with weight (w/alpha)^2 for neighbors whose embedding distance w < cutoff."""
    X = _vectors(centers, embeddings)
    pairs = neighbor_pairs(centers.positions, radius)
    w = np.linalg.norm(X[pairs[:, 0]] - X[pairs[:, 1]], axis=1)
    keep = w < feasibility_cutoff
    return MetricGraph(len(centers), pairs[keep, 0], pairs[keep, 1], (w[keep] / alpha) ** 2)


def build_cosine_graph(centers, embeddings, radius: float = 15.0) -> MetricGraph:
    """Edge with weight E * (1 - S) for neighbors with signed cosine similarity S >= 0."""
    X = _vectors(centers, embeddings)
    sq = np.einsum("ij,ij->i", X, X)
    if np.any(sq == 0):
        bad = int(np.flatnonzero(sq == 0)[0])
        raise ValueError(f"undefined cosine: zero-norm embedding for center {bad}")
    pairs = neighbor_pairs(centers.positions, radius)
    a, b = pairs[:, 0], pairs[:, 1]
    S = np.einsum("ij,ij->i", X[a], X[b]) / np.sqrt(sq[a] * sq[b])
    E = np.linalg.norm(centers.positions[a] - centers.positions[b], axis=1)
    keep = S >= 0
    # S can exceed 1 by rounding
    return MetricGraph(len(centers), a[keep], b[keep], E[keep] * np.maximum(1.0 - S[keep], 0.0))


def build_label_graph(centers, labels, radius: float = 15.0) -> MetricGraph:
    """Ground-truth-label graph: same-label neighbors only, weight = squared voxel distance."""
    labels = np.asarray(labels)
    pairs = neighbor_pairs(centers.positions, radius)
    a, b = pairs[:, 0], pairs[:, 1]
    keep = labels[a] == labels[b]
    sq = ((centers.voxels[a] - centers.voxels[b]) ** 2).sum(axis=1).astype(np.float64)
    return MetricGraph(len(centers), a[keep], b[keep], sq[keep])


def write_graph(graph: MetricGraph, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# n_vertices={graph.n_vertices}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "weight"])
        for a, b, wt in zip(graph.i, graph.j, graph.weight):
            w.writerow([int(a), int(b), repr(float(wt))])
    return path


class GraphFormatError(FormatError):
    pass


def read_graph(path, n_vertices: int | None = None) -> MetricGraph:
    """Read a graph CSV. The vertex count comes from the leading comment or ``n_vertices``."""
    lines = Path(path).read_text().splitlines()
    n = n_vertices
    if lines and lines[0].startswith("#"):
        meta = lines.pop(0)[1:].strip()
        if meta.startswith("n_vertices="):
            n = int(meta.split("=", 1)[1]) if n is None else n
    if not lines or lines[0].strip() != "i,j,weight":
        raise GraphFormatError(f"{path}: missing header i,j,weight")
    rows = list(csv.reader(lines[1:]))
    try:
        i = [int(r[0]) for r in rows if r]
        j = [int(r[1]) for r in rows if r]
        w = [float(r[2]) for r in rows if r]
    except (ValueError, IndexError) as exc:
        raise GraphFormatError(f"{path}: bad edge row: {exc}") from exc
    if n is None:
        n = max(i + j, default=-1) + 1
    return MetricGraph(n, i, j, w)
