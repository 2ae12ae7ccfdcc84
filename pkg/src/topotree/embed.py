"""Per-center-voxel embeddings optimized directly against the pair losses.

There is no image model here: each center voxel owns a free 8-vector and
momentum gradient descent moves those vectors until the topology (or cosine)
objective is met.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError
from .losses import PairSet, TopologyLossParams, cosine_total_loss, topology_total_loss
from .phantom import tree_geodesic_matrix

log = logging.getLogger(__name__)

EMBED_DIM = 8


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


class EmbeddingTable:
    def __init__(self, ids, vectors):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = np.asarray(vectors, dtype=np.float64).reshape(len(self.ids), -1)
        if self.vectors.shape[1] != EMBED_DIM:
            raise ValueError(f"embeddings must be {EMBED_DIM}-dimensional, got {self.vectors.shape[1]}")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate embedding ids")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite embedding entries")
        self._row = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def row_of(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in np.atleast_1d(ids)], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"missing embedding for center id {exc.args[0]}") from None

    def vector(self, node_id) -> np.ndarray:
        return self.vectors[self.row_of(node_id)[0]]

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingTable)
            and np.array_equal(self.ids, other.ids)
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def write_embeddings(table: EmbeddingTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "dim": EMBED_DIM,
        "entries": [{"id": int(i), "vec": [float(x) for x in v]} for i, v in zip(table.ids, table.vectors)],
    }
    path.write_text(json.dumps(doc) + "\n")
    return path


def read_embeddings(path) -> EmbeddingTable:
    doc = json.loads(Path(path).read_text())
    if doc.get("dim") != EMBED_DIM:
        raise FormatError(f"{path}: expected dim {EMBED_DIM}, got {doc.get('dim')}")
    entries = doc["entries"]
    return EmbeddingTable([e["id"] for e in entries], [e["vec"] for e in entries])


@dataclass
class OptimizerConfig:
    seed: int = 0
    init_scale: float = 1.0
    step_size: float = 0.5
    momentum: float = 0.9
    max_iters: int = 3000
    target_loss: float = 0.0
    log_every: int = 250

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def to_dict(self):
        return asdict(self)


def _nearest_nodes(tree, points):
    """Nearest tree node id per point; exact distance ties go to the lower id."""
    kd = cKDTree(tree.pos)
    d, _ = kd.query(points)
    out = np.empty(len(points), dtype=np.int64)
    for k, (p, dk) in enumerate(zip(points, d)):
        cand = kd.query_ball_point(p, dk * (1 + 1e-9) + 1e-9)
        cand = np.asarray(cand, dtype=np.int64)
        dist = np.linalg.norm(tree.pos[cand] - p, axis=1)
        best = cand[dist == dist.min()]
        out[k] = tree.ids[best].min()
    return out


def center_labels(phantom, centers) -> np.ndarray:
    v = centers.voxels
    return phantom.vessel_labels.data[v[:, 0], v[:, 1], v[:, 2]].astype(np.int64)


def build_pair_set(phantom, centers, radius: float = 15.0) -> PairSet:
    """All center pairs within ``radius`` voxels, labeled, with tree arc length D for same-label pairs."""
    n = len(centers)
    if n == 0:
        raise ValueError("no centers")
    pos = centers.voxels
    r2 = radius * radius
    cand = cKDTree(pos.astype(np.float64)).query_pairs(radius + 1e-6, output_type="ndarray")
    if len(cand):
        sq = ((pos[cand[:, 0]] - pos[cand[:, 1]]) ** 2).sum(axis=1)
        cand = cand[sq <= r2]
    if not len(cand):
        return PairSet([], [], [], [])
    i, j = cand[:, 0], cand[:, 1]
    labels = center_labels(phantom, centers)
    same = labels[i] == labels[j]
    D = np.full(len(i), np.nan)
    node = np.full(n, -1, dtype=np.int64)
    for tree in phantom.trees:
        members = np.flatnonzero(labels == tree.label)
        if len(members):
            node[members] = _nearest_nodes(tree, pos[members].astype(np.float64))
        sel = np.flatnonzero(same & (labels[i] == tree.label))
        if len(sel):
            D[sel] = tree_geodesic_matrix(tree, zip(node[i[sel]], node[j[sel]]))
    return PairSet(i, j, same, D)


def write_pairs(pairs: PairSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "same_label", "D"])
        for a, b, s, d in zip(pairs.i, pairs.j, pairs.same, pairs.D):
            w.writerow([int(a), int(b), int(s), repr(float(d)) if s else ""])
    return path


def read_pairs(path) -> PairSet:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "j", "same_label", "D"]:
            raise FormatError(f"{path}: expected header i,j,same_label,D, got {header}")
        rows = [r for r in reader if r]
    return PairSet(
        [int(r[0]) for r in rows],
        [int(r[1]) for r in rows],
        [r[2] == "1" for r in rows],
        [float(r[3]) if r[3] else np.nan for r in rows],
    )


def optimize_embeddings(
    pairs: PairSet,
    n_centers: int,
    config: OptimizerConfig,
    objective: str = "topology",
    params: TopologyLossParams | None = None,
):
    """Fit one 8-vector per center id ``0..n_centers-1``; returns (EmbeddingTable, loss trace).

    Each embedding's step is scaled by (pair count / its own pair degree), a
    fixed diagonal preconditioner that makes ``step_size`` independent of
    the pair-set size. The velocity is reset to zero whenever the loss rises,
    which stops momentum from ringing around the optimum.
    """
    if not len(pairs):
        raise ValueError("empty pair set")
    if objective not in ("topology", "cosine"):
        raise ValueError(f"unknown objective {objective!r}")
    params = params or TopologyLossParams()
    rng = np.random.default_rng(config.seed)
    X = rng.standard_normal((n_centers, EMBED_DIM)) * config.init_scale
    deg = np.bincount(np.concatenate([pairs.i, pairs.j]), minlength=n_centers).astype(np.float64)
    scale = (len(pairs) / np.maximum(deg, 1.0))[:, None]
    vel = np.zeros_like(X)
    trace: list[float] = []
    # overflow shows up as a non-finite loss and is reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(config.max_iters):
            if objective == "topology":
                loss, grad = topology_total_loss(X, pairs, params)
            else:
                loss, grad = cosine_total_loss(X, pairs)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(it, loss)
            trace.append(loss)
            if config.log_every and it % config.log_every == 0:
                log.debug("iter %d  %s loss %.6g", it, objective, loss)
            if loss <= config.target_loss:
                break
            if len(trace) > 1 and loss > trace[-2]:
                vel[:] = 0.0  # restart momentum whenever the loss goes up
            vel = config.momentum * vel - config.step_size * scale * grad
            X = X + vel
    log.info("%s objective: %d iterations, final loss %.6g", objective, len(trace), trace[-1])
    return EmbeddingTable(np.arange(n_centers), X), trace


def trace_settles(trace, window: int = 50, slack: float = 1e-12) -> bool:
    """True when every loss is no larger than the one ``window`` iterations earlier."""
    t = np.asarray(trace)
    if len(t) <= window:
        return True
    return bool(np.all(t[window:] <= t[:-window] + slack))


def perturb_embeddings(table: EmbeddingTable, sigma: float, seed: int) -> EmbeddingTable:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return EmbeddingTable(table.ids.copy(), table.vectors.copy())
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=table.vectors.shape)
    return EmbeddingTable(table.ids.copy(), table.vectors + noise)


def write_trace(trace, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for k, v in enumerate(trace):
            w.writerow([k, repr(float(v))])
    return path
